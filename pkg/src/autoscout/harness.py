"""Synthetic ground truth, brute-force oracle, baselines and scripted experiments.

The cost model is a stand-in for GPU measurements: a closed-form
seconds-per-iteration estimate over the Megatron-style knob space, with a
memory bound that marks configurations infeasible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .evaluator import INFEASIBLE, SimulatorEnsemble, fit_ensemble, wrap_noisy
from .orchestrator import RunConfig, RunResult, TRACE_COLUMNS, run, trace_to_csv
from .space import (
    INACTIVE,
    ConfigSpace,
    Configuration,
    SpaceError,
    builtin_space,
    device_allocation,
    enumerate_space,
    load_space,
)

log = logging.getLogger(__name__)

DATA = Path(__file__).parent / "data"

SCENARIO_FEATURES = {
    "3dp": ("pp", "tp", "dp", "mbs"),
    "5dp": ("pp", "tp", "dp", "mbs", "ep", "cp", "sp"),
    "full": ("pp", "tp", "dp", "ep", "cp", "sp", "ar", "mbs", "ddp", "tp_comm", "ddp_bucket"),
}

METHODS = ("autoscout", "random", "sparse_only", "dense_only", "no_orchestrator", "no_simulators")
ABLATIONS = ("sparse_only", "dense_only", "no_orchestrator", "no_simulators")

BRUTE_FORCE_GUARD = 10**6


@dataclass(frozen=True)
class SyntheticClusterModel:
    space: ConfigSpace
    name: str = "custom"
    F_work: float = 100.0
    P_mem: float = 30.0
    A_mem: float = 4.0
    B: int = 64
    alpha_tp: float = 2.0
    alpha_dp: float = 1.5
    r_ar: float = 1.33
    sp_discount: float = 0.8

    def __post_init__(self) -> None:
        for k in ("F_work", "P_mem", "A_mem", "B", "alpha_tp", "alpha_dp", "r_ar", "sp_discount"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")

    def constants(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in
                ("name", "F_work", "P_mem", "A_mem", "B", "alpha_tp", "alpha_dp", "r_ar", "sp_discount")}

    @property
    def preset_hash(self) -> str:
        blob = json.dumps(self.constants(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def _assigned(self, world: int):
        alloc = device_allocation(self.space, world)
        return [d for d in self.space.devices if alloc[d.name] > 0]

    def memory(self, c: Configuration) -> Tuple[float, float]:
        """(per-device memory demand, per-device capacity) in GB."""
        v = _values(c)
        used = self._assigned(v["pp"] * v["tp"] * v["dp"] * v["cp"])
        cap = min(d.mem_gb for d in used) if used else math.inf
        act = self.A_mem * v["mbs"] * (0.3 if v["ar"] else 1.0) / v["cp"]
        return self.P_mem / (v["pp"] * v["tp"]) + act, cap

    def fits(self, c: Configuration) -> bool:
        need, cap = self.memory(c)
        return need <= cap

    def __call__(self, c: Configuration) -> float:
        return synthetic_cost(self, c)


def _values(c: Configuration) -> Dict[str, Any]:
    raw = c.values()
    v = {k: (None if x is INACTIVE else x) for k, x in raw.items()}
    for k in ("pp", "tp", "dp", "ep", "cp", "mbs"):
        v[k] = int(v.get(k) or 1)
    v["ar"] = bool(v.get("ar") or False)
    v["sp"] = bool(v.get("sp") or False)
    return v


def synthetic_cost(m: SyntheticClusterModel, c: Configuration) -> float:
    """Seconds per training iteration, or ``INFEASIBLE`` when memory overflows."""
    v = _values(c)
    pp, tp, dp, ep, cp, mbs = v["pp"], v["tp"], v["dp"], v["ep"], v["cp"], v["mbs"]
    world = pp * tp * dp * cp
    used = m._assigned(world)
    eff = min(d.rel_throughput for d in used) if used else 1.0
    cap = min(d.mem_gb for d in used) if used else math.inf

    mem = m.P_mem / (pp * tp) + m.A_mem * mbs * (0.3 if v["ar"] else 1.0) / cp
    if mem > cap:
        return INFEASIBLE

    micro_steps = m.B / (dp * mbs)
    r = m.r_ar if v["ar"] else 1.0
    mbs_scale = 1.0 + 0.1 * math.log2(mbs)
    t_comp = m.F_work * r / (world * eff * mbs_scale)
    t_bubble = t_comp * (pp - 1) / micro_steps

    if tp > 1:
        tp_comm = v.get("tp_comm")
        tp_comm = 12 if tp_comm is None else tp_comm
        overlap = min(max((tp_comm - 12) / 16, 0.0), 0.5)
    else:
        overlap = 0.0
    t_tp = m.alpha_tp * (tp - 1) / tp * (1 - overlap) * (m.sp_discount if v["sp"] else 1.0)

    if dp > 1:
        bucket = v.get("ddp_bucket") or 1
        bucket_pen = 1 + 0.1 * (math.log2(bucket) - 2) ** 2
    else:
        bucket_pen = 0.0
    t_dp = m.alpha_dp * (dp - 1) / dp * bucket_pen
    t_ep = m.alpha_tp * 0.5 * (ep - 1) / ep
    return t_comp + t_bubble + t_tp + t_dp + t_ep


def load_preset(ref: Union[str, Path], space: ConfigSpace) -> SyntheticClusterModel:
    """``builtin:<name>`` or a path to a preset JSON file."""
    ref = str(ref)
    path = DATA / "presets" / f"{ref.split(':', 1)[1]}.json" if ref.startswith("builtin:") else Path(ref)
    if not path.exists():
        raise FileNotFoundError(f"no model preset {ref!r}")
    doc = json.loads(path.read_text())
    doc.pop("version", None)
    doc.pop("description", None)
    return SyntheticClusterModel(space=space, **doc)


def builtin_presets() -> List[str]:
    return sorted(p.stem for p in (DATA / "presets").glob("*.json"))


def scenario_space(name: str, base: Optional[ConfigSpace] = None) -> ConfigSpace:
    if name not in SCENARIO_FEATURES:
        raise SpaceError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIO_FEATURES)}")
    base = base or builtin_space()
    if name == "full":
        return base
    return base.restrict(SCENARIO_FEATURES[name])


# -- oracles ---------------------------------------------------------------------------


def brute_force_optimum(space: ConfigSpace, model: Callable[[Configuration], float],
                        guard: int = BRUTE_FORCE_GUARD) -> Tuple[Configuration, float]:
    """Exact argmin over every feasible configuration; ties keep the first."""
    if space.size() > guard:
        raise ValueError(f"space has {space.size()} configurations, above the guard of {guard}")
    best, best_cost = None, math.inf
    for c in enumerate_space(space):
        cost = model(c)
        if cost < best_cost:
            best, best_cost = c, cost
    if best is None:
        raise ValueError("every configuration is infeasible under the model")
    return best, best_cost


def simulator_specs(path: Optional[Path] = None) -> List[Dict[str, Any]]:
    return json.loads(Path(path or DATA / "simulators.json").read_text())


def training_samples(space: ConfigSpace, model: Callable[[Configuration], float], n: int = 200,
                     seed: int = 0) -> List[Tuple[Configuration, float]]:
    """``n`` random configurations that the model can run, with their costs.

    Draws that overflow memory are skipped, since a regression on an
    infinite target is meaningless."""
    rng = np.random.default_rng(seed)
    out: List[Tuple[Configuration, float]] = []
    for _ in range(100 * n):
        c = space.sample(rng)
        cost = model(c)
        if math.isfinite(cost):
            out.append((c, cost))
            if len(out) == n:
                break
    return out


class SimulatedOracle:
    """Ensemble latency estimate behind an analytic memory check."""

    def __init__(self, ensemble: SimulatorEnsemble, model: Optional[SyntheticClusterModel] = None,
                 noise_pct: float = 0.0, seed: int = 0):
        self.ensemble = ensemble
        self.model = model
        self.predict = wrap_noisy(ensemble, noise_pct, seed) if noise_pct > 0 else ensemble

    def __call__(self, c: Configuration) -> Optional[float]:
        if self.model is not None and not self.model.fits(c):
            return INFEASIBLE
        return self.predict(c)


def build_simulator(space: ConfigSpace, model: SyntheticClusterModel, seed: int = 0, noise_pct: float = 0.0,
                    n_samples: int = 200, specs: Optional[Sequence[Mapping]] = None) -> SimulatedOracle:
    samples = training_samples(space, model, n_samples, seed)
    ens = fit_ensemble(space, specs or simulator_specs(), samples, seed=seed)
    return SimulatedOracle(ens, model, noise_pct, seed + 7919)


# -- baselines -------------------------------------------------------------------------


def baseline_random_search(space: ConfigSpace, oracle: Callable[[Configuration], float], budget: int,
                           seed: int = 0, without_replacement: bool = False,
                           stop_below: Optional[float] = None) -> List[Dict[str, Any]]:
    """Uniform random feasible configurations, one trace row per evaluation."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    if without_replacement:
        pool = list(enumerate_space(space))
        order = rng.permutation(len(pool))[:budget]
        draws = (pool[i] for i in order)
    else:
        draws = (space.sample(rng) for _ in range(budget))
    rows, best, clock = [], math.inf, 0.0
    for i, c in enumerate(draws, start=1):
        cost = oracle(c)
        clock += cost if math.isfinite(cost) else 1.0
        best = min(best, cost)
        rows.append({
            "iteration": i, "wall_seconds": clock, "arm_selected": "random", "fidelity": "real",
            "c_bb": cost, "c_bc": math.nan, "c_cb": math.nan, "c_cc": math.nan,
            "delta_sparse": math.nan, "delta_dense": math.nan,
            "best_cost": best if math.isfinite(best) else math.nan,
            "real_evals_cumulative": i, "sim_evals_cumulative": 0,
        })
        if stop_below is not None and best <= stop_below:
            break
    return rows


def ablation_config(variant: str, cfg: RunConfig) -> RunConfig:
    if variant == "sparse_only":
        return replace(cfg, enable_dense=False)
    if variant == "dense_only":
        return replace(cfg, enable_sparse=False)
    if variant == "no_orchestrator":
        return replace(cfg, round_robin=True)
    if variant == "no_simulators":
        return replace(cfg, use_simulators=False)
    raise ValueError(f"unknown ablation variant {variant!r}")


def baseline_ablations(space: ConfigSpace, oracle: Callable[[Configuration], float], budget: int, seed: int,
                       variant: str, simulate: Optional[Callable] = None,
                       cfg: Optional[RunConfig] = None) -> RunResult:
    base = replace(cfg or RunConfig(), budget_iters=budget, seed=seed)
    return run(space, oracle, ablation_config(variant, base), simulate=simulate)


# -- metrics ----------------------------------------------------------------------------


def evals_to_threshold(rows: Sequence[Mapping[str, Any]], threshold: float) -> float:
    """Real evaluations spent when the best real cost first drops to ``threshold``."""
    for r in rows:
        b = r.get("best_cost")
        if b is not None and not (isinstance(b, float) and math.isnan(b)) and b <= threshold:
            return float(r["real_evals_cumulative"])
    return math.inf


def final_real_cost(rows: Sequence[Mapping[str, Any]]) -> float:
    vals = [r["best_cost"] for r in rows
            if r.get("best_cost") is not None and not (isinstance(r["best_cost"], float) and math.isnan(r["best_cost"]))]
    return min(vals) if vals else math.inf


# -- scenarios -------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    space: str = "builtin:megatron"
    model_preset: str = "builtin:moe-30B"
    noise_pct: float = 0.0
    K: Union[int, List[int]] = 5
    seeds: int = 20
    budget_iters: int = 200
    budget_seconds: Optional[float] = None
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    random_budget: Optional[int] = None
    run_config: Dict[str, Any] = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False)

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_FEATURES:
            raise ValueError(f"unknown scenario {self.name!r}")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.noise_pct < 0 or self.seeds < 1 or self.budget_iters < 0:
            raise ValueError("invalid scenario numbers")

    @property
    def k_values(self) -> List[int]:
        return list(self.K) if isinstance(self.K, list) else [int(self.K)]

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Scenario":
        path = Path(path)
        doc = json.loads(path.read_text())
        if not isinstance(doc, dict) or "name" not in doc:
            raise ValueError("scenario must be a JSON object with a name")
        return cls(base_dir=path.parent, **doc)

    def _resolve(self, ref: str) -> Union[str, Path]:
        return ref if ref.startswith("builtin:") else self.base_dir / ref

    def build_space(self) -> ConfigSpace:
        ref = self._resolve(self.space)
        base = builtin_space(ref.split(":", 1)[1]) if isinstance(ref, str) else load_space(ref)
        return scenario_space(self.name, base)

    def build_model(self, space: ConfigSpace) -> SyntheticClusterModel:
        return load_preset(self._resolve(self.model_preset), space)


def _one_run(args) -> Tuple[str, int, int, List[Dict[str, Any]], Optional[str]]:
    sc, method, k, seed, opt_cost = args
    space = sc.build_space()
    model = sc.build_model(space)
    try:
        if method == "random":
            budget = sc.random_budget or 4 * max(1, sc.budget_iters)
            rows = baseline_random_search(space, model, budget, seed)
        else:
            cfg = RunConfig.from_json({**sc.run_config, "budget_iters": sc.budget_iters,
                                       "budget_seconds": sc.budget_seconds, "k_tournament": k, "seed": seed})
            if method != "autoscout":
                cfg = ablation_config(method, cfg)
            simulate = build_simulator(space, model, seed, sc.noise_pct) if cfg.use_simulators else None
            rows = run(space, model, cfg, simulate=simulate).trace
        return method, k, seed, rows, None
    except Exception as e:  # noqa: BLE001 - recorded per seed
        log.exception("run %s/K=%d/seed=%d failed", method, k, seed)
        return method, k, seed, [], repr(e)


SUMMARY_COLUMNS = ["scenario", "K", "method", "seeds_completed", "median_best_cost", "mean_best_cost",
                   "median_evals_to_5pct", "median_wall_seconds", "optimum_cost", "incomplete"]


def run_experiment(sc: Scenario, out_dir: Union[str, Path], workers: int = 1) -> List[Dict[str, Any]]:
    """Run every method for every seed (and K), writing one trace CSV per run
    and ``summary.csv``. Returns the summary rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = sc.build_space()
    model = sc.build_model(space)
    _, opt_cost = brute_force_optimum(space, model)
    jobs = [(sc, m, k, s, opt_cost) for k in sc.k_values for m in sc.methods for s in range(sc.seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_run, jobs))
    else:
        results = [_one_run(j) for j in jobs]

    sweep = len(sc.k_values) > 1
    grouped: Dict[Tuple[int, str], List] = {}
    for method, k, seed, rows, err in results:
        d = out / f"K{k}" if sweep else out
        d.mkdir(parents=True, exist_ok=True)
        if err is None:
            (d / f"{method}_seed{seed:02d}.csv").write_text(trace_to_csv(rows))
        grouped.setdefault((k, method), []).append((rows, err))

    summary = []
    for (k, method), runs in grouped.items():
        ok = [rows for rows, err in runs if err is None]
        finals = [final_real_cost(r) for r in ok]
        evals = [evals_to_threshold(r, 1.05 * opt_cost) for r in ok]
        walls = [r[-1]["wall_seconds"] for r in ok if r]
        summary.append({
            "scenario": sc.name, "K": k, "method": method, "seeds_completed": len(ok),
            "median_best_cost": statistics.median(finals) if finals else math.nan,
            "mean_best_cost": statistics.fmean(finals) if finals and all(map(math.isfinite, finals)) else math.nan,
            "median_evals_to_5pct": statistics.median(evals) if evals else math.nan,
            "median_wall_seconds": statistics.median(walls) if walls else math.nan,
            "optimum_cost": opt_cost,
            "incomplete": len(ok) < len(runs),
        })
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: (repr(round(v, 6)) if isinstance(v, float) and math.isfinite(v) else v)
                        for k, v in row.items()})
    return summary
