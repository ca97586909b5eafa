"""Command-line entry point: ``autoscout optimize`` and ``autoscout benchmark``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from .evaluator import INFEASIBLE, AdaptiveEvaluator, FidelityController, OracleError
from .harness import Scenario, build_simulator, load_preset, run_experiment
from .orchestrator import RunConfig, run, write_best
from .space import Configuration, SpaceError, load_space

log = logging.getLogger("autoscout")

EXIT_OK, EXIT_INVALID, EXIT_PROTOCOL, EXIT_NO_EVALS = 0, 2, 3, 4


class ProtocolError(OracleError):
    """The external oracle answered with something other than one cost line."""


@dataclass
class OracleSpec:
    kind: str  # "builtin" or "command"
    target: str
    timeout: float = 3600.0
    env_passthrough: List[str] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str, timeout: float = 3600.0, env: Sequence[str] = ()) -> "OracleSpec":
        kind, sep, target = text.partition(":")
        if not sep or kind not in ("builtin", "command") or not target:
            raise ValueError(f"oracle must be builtin:<preset> or command:<path>, got {text!r}")
        if kind == "command" and not Path(target).exists():
            raise ValueError(f"oracle command {target!r} does not exist")
        return cls(kind, target, timeout, list(env))


def parse_cost_line(text: str) -> float:
    lines = text.splitlines()
    if len(lines) != 1:
        raise ProtocolError(f"expected exactly one output line, got {len(lines)}")
    token = lines[0].strip()
    if token == "INFEASIBLE":
        return INFEASIBLE
    try:
        cost = float(token)
    except ValueError:
        raise ProtocolError(f"unparseable oracle output {token!r}") from None
    if not math.isfinite(cost):
        raise ProtocolError(f"non-finite oracle output {token!r}")
    return cost


def external_oracle_eval(spec: OracleSpec, c: Configuration) -> float:
    """Run the oracle command once: configuration JSON on stdin, one cost line
    (or ``INFEASIBLE``) on stdout."""
    env = {k: os.environ[k] for k in spec.env_passthrough if k in os.environ} if spec.env_passthrough else None
    if env is not None:
        env.setdefault("PATH", os.environ.get("PATH", ""))
    try:
        proc = subprocess.run(
            [spec.target], input=json.dumps(c.to_json_dict(), sort_keys=True) + "\n",
            capture_output=True, text=True, timeout=spec.timeout, env=env,
        )
    except subprocess.TimeoutExpired:
        raise OracleError(f"oracle timed out after {spec.timeout}s") from None
    except OSError as e:
        raise OracleError(f"could not launch oracle: {e}") from e
    if proc.returncode != 0:
        raise ProtocolError(f"oracle exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    return parse_cost_line(proc.stdout)


class CommandOracle:
    def __init__(self, spec: OracleSpec):
        self.spec = spec
        self.protocol_errors = 0

    def __call__(self, c: Configuration) -> float:
        try:
            return external_oracle_eval(self.spec, c)
        except ProtocolError:
            self.protocol_errors += 1
            raise


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autoscout", description="Configuration search for training systems.")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="search a configuration space against an oracle")
    o.add_argument("--space", required=True, help="space definition JSON")
    o.add_argument("--oracle", required=True, help="builtin:<preset> or command:<path>")
    o.add_argument("--budget-iters", type=int, default=200)
    o.add_argument("--budget-seconds", type=float, default=None)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default="autoscout-out")
    o.add_argument("--tau", type=_positive_int, default=10)
    o.add_argument("--epsilon", type=float, default=0.1)
    o.add_argument("--k-tournament", type=_positive_int, default=5)
    o.add_argument("--c0", type=float, default=1.414)
    o.add_argument("--gamma", type=float, default=0.995)
    o.add_argument("--max-parallel", type=_positive_int, default=4)
    o.add_argument("--oracle-timeout", type=float, default=3600.0)
    o.add_argument("--oracle-env", action="append", default=[], metavar="NAME",
                   help="environment variable passed to the oracle command (repeatable)")
    o.add_argument("--no-simulators", action="store_true", help="profile every evaluation")

    b = sub.add_parser("benchmark", help="run a scripted experiment")
    b.add_argument("--scenario", required=True, help="scenario JSON")
    b.add_argument("--out", default="bench")
    b.add_argument("--workers", type=_positive_int, default=1)
    return p


def cmd_optimize(args: argparse.Namespace) -> int:
    try:
        space = load_space(args.space)
        spec = OracleSpec.parse(args.oracle, args.oracle_timeout, args.oracle_env)
        cfg = RunConfig(
            budget_iters=args.budget_iters, budget_seconds=args.budget_seconds, seed=args.seed,
            tau=args.tau, epsilon=args.epsilon, k_tournament=args.k_tournament, c0=args.c0,
            gamma=args.gamma, max_parallel=args.max_parallel,
            use_simulators=not args.no_simulators and spec.kind == "builtin",
        )
        if spec.kind == "builtin":
            model = load_preset(f"builtin:{spec.target}", space)
    except (SpaceError, ValueError, FileNotFoundError, json.JSONDecodeError, TypeError) as e:
        print(f"autoscout: error: {e}", file=sys.stderr)
        return EXIT_INVALID

    command: Optional[CommandOracle] = None
    if spec.kind == "builtin":
        oracle: Callable[[Configuration], float] = model
        simulate = build_simulator(space, model, args.seed) if cfg.use_simulators else None
        model_time = True
    else:
        oracle = command = CommandOracle(spec)
        simulate = None
        model_time = False
    ev = AdaptiveEvaluator(oracle, simulate, FidelityController(cfg.tau, cfg.epsilon),
                           model_time=model_time, max_parallel=cfg.max_parallel)
    result = run(space, oracle, cfg, evaluator=ev)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.csv").write_text(result.trace_csv())
    if result.config is None:
        if command is not None and command.protocol_errors:
            print(f"autoscout: error: oracle protocol violations ({command.protocol_errors}); "
                  "no successful evaluation", file=sys.stderr)
            return EXIT_PROTOCOL
        print("autoscout: error: budget exhausted with zero successful evaluations", file=sys.stderr)
        return EXIT_NO_EVALS
    write_best(out / "best.json", result)
    cost = "INFEASIBLE" if not math.isfinite(result.cost) else f"{result.cost:.6g}"
    print(json.dumps(result.config.to_json_dict(), sort_keys=True))
    print(f"cost {cost}")
    print(f"wrote {out / 'best.json'}")
    print(f"wrote {out / 'trace.csv'}")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    try:
        sc = Scenario.load(args.scenario)
        sc.build_space()
    except (ValueError, TypeError, SpaceError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"autoscout: error: invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    summary = run_experiment(sc, args.out, workers=args.workers)
    for row in summary:
        print(f"K={row['K']:<3} {row['method']:<16} median best {row['median_best_cost']:.4f}  "
              f"median evals to 5% {row['median_evals_to_5pct']}")
    print(f"wrote {Path(args.out) / 'summary.csv'}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("AUTOSCOUT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "optimize":
        return cmd_optimize(args)
    return cmd_benchmark(args)


if __name__ == "__main__":
    sys.exit(main())
