"""Coordinated sparse/dense search.

Every iteration evaluates a 2x2 batch built from (base, candidate) structures
crossed with (base, candidate) dense settings. A difference-of-differences
contrast credits each optimizer, and a UCB1 bandit with a decaying
exploration coefficient decides which optimizer explores next.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import dense as dense_opt
from .evaluator import (
    REAL,
    SIMULATED,
    AdaptiveEvaluator,
    FidelityController,
    OracleError,
    switch_fidelity,
)
from .space import ConfigSpace, Configuration, Value, combine, mask, sparse_key
from .sparse import (
    MctsTree,
    TournamentState,
    candidate_orderings,
    tournament_next,
    tournament_record_and_halve,
)

log = logging.getLogger(__name__)

SPARSE_ARM, DENSE_ARM = "sparse", "dense"
ARMS = (SPARSE_ARM, DENSE_ARM)

TRACE_COLUMNS = [
    "iteration", "wall_seconds", "arm_selected", "fidelity",
    "c_bb", "c_bc", "c_cb", "c_cc", "delta_sparse", "delta_dense",
    "best_cost", "real_evals_cumulative", "sim_evals_cumulative",
]


# -- bandit -----------------------------------------------------------------------


@dataclass
class BanditState:
    c0: float = 1.414
    gamma: float = 0.995
    q: Dict[str, float] = field(default_factory=lambda: {a: 0.0 for a in ARMS})
    n: Dict[str, float] = field(default_factory=lambda: {a: 0.0 for a in ARMS})
    t: int = 0

    @property
    def n_total(self) -> float:
        return sum(self.n.values())

    def exploration(self, t: Optional[int] = None) -> float:
        return self.c0 * self.gamma ** (self.t if t is None else t)

    def ucb(self, arm: str, t: Optional[int] = None) -> float:
        if self.n[arm] == 0:
            return math.inf
        bonus = math.sqrt(max(math.log(self.n_total), 0.0) / self.n[arm]) if self.n_total > 0 else 0.0
        return self.q[arm] / self.n[arm] + self.exploration(t) * bonus

    def update(self, arm: str, reward: float) -> None:
        self.q[arm] += reward
        self.n[arm] += 1

    def scale(self, lam: float) -> None:
        for a in ARMS:
            self.q[a] *= lam
            self.n[a] *= lam


def select_arm(b: BanditState, t: Optional[int] = None) -> str:
    """Unpulled arms first, then the UCB1 argmax; ties go to the sparse arm."""
    for a in ARMS:
        if b.n[a] == 0:
            return a
    scores = [b.ucb(a, t) for a in ARMS]
    return ARMS[0] if scores[0] >= scores[1] else ARMS[1]


# -- batches ------------------------------------------------------------------------


CELLS = ("bb", "bc", "cb", "cc")


@dataclass
class EvalBatch:
    configs: Dict[str, Configuration]
    costs: Dict[str, float] = field(default_factory=dict)
    fidelity: Dict[str, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def distinct(self) -> List[Configuration]:
        seen: Dict[str, Configuration] = {}
        for cell in CELLS:
            c = self.configs[cell]
            seen.setdefault(c.canonical_key, c)
        return list(seen.values())

    def argmin(self) -> str:
        best = "bb"
        for cell in CELLS[1:]:
            if self.costs[cell] < self.costs[best]:
                best = cell
        return best


def build_batch(s_base: Mapping[str, Value], s_cand: Mapping[str, Value],
                x_base: Mapping[str, Value], x_cand: Mapping[str, Value],
                space: ConfigSpace) -> EvalBatch:
    """Cross structures with dense settings, re-projecting each dense setting
    onto the mask of the structure it is paired with."""
    configs = {
        "bb": combine(space, s_base, x_base),
        "bc": combine(space, s_base, x_cand),
        "cb": combine(space, s_cand, x_base),
        "cc": combine(space, s_cand, x_cand),
    }
    batch = EvalBatch(configs)
    for cell in ("bc", "cc"):
        projected = configs[cell].dense_dict
        if any(projected[k] != x_cand.get(k) for k in projected):
            batch.notes.append(f"{cell}: dense candidate re-projected")
    return batch


@dataclass
class AttributionResult:
    delta_sparse: float
    delta_dense: float
    reward_sparse: float
    reward_dense: float
    reseed_base: bool = False

    def reward(self, arm: str) -> float:
        return self.reward_sparse if arm == SPARSE_ARM else self.reward_dense


def _mean_finite(values: Sequence[float]) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return sum(vals) / len(vals) if vals else 0.0


def attribute(batch: EvalBatch) -> AttributionResult:
    """Difference-of-differences credit (lower cost is better).

    Each arm's delta averages its two contrasts with the other factor held
    fixed. Rewards are delta/c_bb clipped to [0, 1]; a cell that came back
    infeasible zeroes the reward of every arm whose candidate produced it.
    """
    c = batch.costs
    bb, bc, cb, cc = (c[k] for k in CELLS)
    if not math.isfinite(bb):
        return AttributionResult(0.0, 0.0, 0.0, 0.0, reseed_base=True)
    d_sparse = _mean_finite([bb - cb if math.isfinite(cb) else math.nan,
                             bc - cc if math.isfinite(bc) and math.isfinite(cc) else math.nan])
    d_dense = _mean_finite([bb - bc if math.isfinite(bc) else math.nan,
                            cb - cc if math.isfinite(cb) and math.isfinite(cc) else math.nan])

    def reward(delta: float) -> float:
        return min(max(delta / bb, 0.0), 1.0) if bb > 0 else 0.0

    # an infeasible cc is blamed on the candidate whose single-factor cell is
    # also infeasible; when neither (or both) is, on both
    sparse_bad = not math.isfinite(cb) or (not math.isfinite(cc) and math.isfinite(bc))
    dense_bad = not math.isfinite(bc) or (not math.isfinite(cc) and math.isfinite(cb))
    r_sparse = 0.0 if sparse_bad else reward(d_sparse)
    r_dense = 0.0 if dense_bad else reward(d_dense)
    return AttributionResult(d_sparse, d_dense, r_sparse, r_dense)


@dataclass
class Best:
    config: Optional[Configuration] = None
    cost: float = math.inf
    fidelity: str = REAL


def update_best(best: Best, batch: EvalBatch) -> Best:
    """Replace ``best`` iff some cell is strictly cheaper."""
    cell = batch.argmin()
    if batch.costs[cell] < best.cost:
        return Best(batch.configs[cell], batch.costs[cell], batch.fidelity[cell])
    return best


# -- run configuration ---------------------------------------------------------------------


@dataclass
class RunConfig:
    budget_iters: int = 200
    budget_seconds: Optional[float] = None
    tau: int = 10
    epsilon: float = 0.1
    c0: float = 1.414
    gamma: float = 0.995
    c_uct: float = 1.414
    step_cap: int = 8
    k_tournament: int = 5
    k_reval: int = 5
    lam: float = 0.25
    seed: int = 0
    # ablation switches
    enable_sparse: bool = True
    enable_dense: bool = True
    round_robin: bool = False
    use_simulators: bool = True
    max_parallel: int = 1
    orderings: Optional[List[List[str]]] = None

    def __post_init__(self) -> None:
        if self.budget_iters < 0:
            raise ValueError("budget_iters must be >= 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.k_tournament < 1:
            raise ValueError("k_tournament must be >= 1")

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class RunResult:
    config: Optional[Configuration]
    cost: float
    trace: List[Dict[str, Any]]
    tree: Optional[MctsTree] = None
    bandit: Optional[BanditState] = None
    evaluator: Optional[AdaptiveEvaluator] = None
    tournament: Optional[TournamentState] = None
    switch_info: Dict[str, Any] = field(default_factory=dict)

    def trace_csv(self, include_wall: bool = True) -> str:
        return trace_to_csv(self.trace, include_wall)


def trace_to_csv(rows: Sequence[Mapping[str, Any]], include_wall: bool = True,
                 extra: Sequence[str] = ()) -> str:
    cols = list(extra) + [c for c in TRACE_COLUMNS if include_wall or c != "wall_seconds"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in cols})
    return buf.getvalue()


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf"
        return repr(round(v, 10))
    return "" if v is None else v


# -- the search loop ------------------------------------------------------------------------


class Orchestrator:
    """Owns the optimizer states and runs warm-start, initialization and the
    coordinated loop against an :class:`AdaptiveEvaluator`."""

    def __init__(self, space: ConfigSpace, evaluator: AdaptiveEvaluator, cfg: RunConfig):
        self.space = space
        self.ev = evaluator
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.bandit = BanditState(cfg.c0, cfg.gamma)
        self.best = Best()
        self.best_real = Best()
        self.c_ref: Optional[float] = None
        self.trace: List[Dict[str, Any]] = []
        self.tree: Optional[MctsTree] = None
        self.tournament: Optional[TournamentState] = None
        self.switch_info: Dict[str, Any] = {}
        self.sparse_reward: Dict[str, float] = {}
        self._structures: Optional[List[Tuple[str, Dict[str, Value]]]] = None
        self._rr = 0
        self._rebase: Optional[Configuration] = None

    # -- bookkeeping --------------------------------------------------------------

    def reward_of(self, cost: float) -> float:
        if not math.isfinite(cost) or cost <= 0:
            return 0.0
        if self.c_ref is None:
            self.c_ref = cost
        return self.c_ref / cost

    def _trees(self) -> List[MctsTree]:
        if self.tournament is not None and not self.tournament.done:
            return self.tournament.trees
        return [self.tree] if self.tree is not None else []

    def _record(self, configs: Sequence[Configuration], costs: Sequence[float],
                fids: Sequence[str], fresh: Sequence[bool]) -> None:
        for c, v, f, new in zip(configs, costs, fids, fresh):
            if f == REAL and v < self.best_real.cost:
                self.best_real = Best(c, v, REAL)
            if v < self.best.cost:
                self.best = Best(c, v, f)
            if new and self.cfg.enable_sparse:
                r = self.reward_of(v)
                for tree in self._trees():
                    tree.backpropagate(c.sparse_dict, r)
            k = sparse_key(c.sparse_dict)
            self.sparse_reward[k] = max(self.sparse_reward.get(k, 0.0), self.reward_of(v))

    def _row(self, iteration: int, arm: str, batch: Optional[EvalBatch] = None,
             att: Optional[AttributionResult] = None) -> Dict[str, Any]:
        costs = batch.costs if batch else {}
        row = {
            "iteration": iteration,
            "wall_seconds": self.ev.clock,
            "arm_selected": arm,
            "fidelity": self.ev.mode,
            "delta_sparse": att.delta_sparse if att else math.nan,
            "delta_dense": att.delta_dense if att else math.nan,
            "best_cost": self.best_real.cost if self.best_real.config is not None else math.nan,
            "real_evals_cumulative": self.ev.fc.real_evals,
            "sim_evals_cumulative": self.ev.fc.sim_evals,
        }
        for cell in CELLS:
            row["c_" + cell] = costs.get(cell, math.nan)
        self.trace.append(row)
        return row

    def _out_of_time(self) -> bool:
        return self.cfg.budget_seconds is not None and self.ev.clock >= self.cfg.budget_seconds

    # -- proposals ----------------------------------------------------------------

    def _fresh_sparse(self, avoid: Mapping[str, Value]) -> Dict[str, Value]:
        """A structure not evaluated before, preferably from the tree.

        Revisited structures are scored from their best known reward so the
        tree's statistics move on; after repeated revisits an untried
        structure is drawn at random."""
        avoid_key = sparse_key(avoid)
        s = self.tree.propose()
        for _ in range(32):
            k = sparse_key(s)
            if k not in self.sparse_reward and k != avoid_key:
                return s
            self.tree.backpropagate(s, self.sparse_reward.get(k, 0.0))
            s = self.tree.propose()
        if self._structures is None:
            self._structures = [(sparse_key(f), f) for f in self.space.feasible_sparse]
        untried = [f for k, f in self._structures if k not in self.sparse_reward]
        if untried:
            return dict(untried[int(self.rng.integers(len(untried)))])
        return s

    # -- phases ---------------------------------------------------------------------

    def warm_start(self) -> None:
        cfg = self.cfg
        if cfg.orderings:
            orders = [list(o) for o in cfg.orderings][: cfg.k_tournament]
        else:
            orders = candidate_orderings(self.space, cfg.k_tournament, self.rng)
        trees = [MctsTree(self.space, o, cfg.c_uct, seed=cfg.seed * 1000 + i) for i, o in enumerate(orders)]
        self.tournament = TournamentState(trees)
        dense_defaults = self.space.default_dense()
        while not self.tournament.done and not self._out_of_time():
            k = tournament_next(self.tournament)
            s = trees[k].propose()
            c = combine(self.space, s, dense_defaults)
            try:
                res = self.ev.evaluate([c])
            except OracleError as e:
                log.warning("oracle failure during warm-start: %s", e)
                tournament_record_and_halve(self.tournament, k, 0.0)
                continue
            self._record([c], res.costs, res.fidelities, res.fresh)
            tournament_record_and_halve(self.tournament, k, self.reward_of(res.costs[0]))
            self._row(0, f"warmup:T{k + 1}")
        if not self.tournament.done:
            # out of time: settle on the current leader
            lead = sorted(self.tournament.survivors, key=lambda i: (-self.tournament.cumulative[i], i))[0]
            self.tournament.survivors = [lead]
        self.tree = self.tournament.winner
        log.info("tournament winner ordering: %s", self.tree.ordering)

    def run(self) -> RunResult:
        cfg, space = self.cfg, self.space
        if cfg.enable_sparse and cfg.k_tournament > 1 and cfg.budget_iters > 0:
            self.warm_start()
        else:
            order = cfg.orderings[0] if cfg.orderings else space.sparse_names
            self.tree = MctsTree(space, order, cfg.c_uct, seed=cfg.seed * 1000)

        # Phase 1: initial pairs
        if cfg.enable_sparse:
            s_base = self.tree.best_path() if self.tree.root.visits else space.default_sparse()
            s_cand = self._fresh_sparse(s_base) if cfg.budget_iters > 0 else s_base
        else:
            s_base = s_cand = space.default_sparse()
        dstate = dense_opt.init_state(space, mask(space, s_base), cfg.step_cap)
        x_base = dict(dstate.current)
        if cfg.enable_dense and cfg.budget_iters > 0:
            x_cand = dense_opt.propose(dstate, mask(space, s_base))
        else:
            x_cand = dict(x_base)
        dense_pending = cfg.enable_dense and x_cand != x_base

        if cfg.budget_iters == 0:
            c0 = combine(space, s_base, x_base)
            try:
                cost = self.ev.real(c0)
            except OracleError as e:
                log.warning("initial evaluation failed: %s", e)
                self._row(0, "failed")
                return self._result()
            self.best = self.best_real = Best(c0, cost, REAL)
            self._row(0, "init")
            return self._result()

        arm_prev: Optional[str] = None
        for t in range(1, cfg.budget_iters + 1):
            if self._out_of_time():
                break
            self.bandit.t = t
            batch = build_batch(s_base, s_cand, x_base, x_cand, space)
            configs = [batch.configs[cell] for cell in CELLS]
            try:
                res = self.ev.evaluate(configs)
            except OracleError as e:
                log.warning("iteration %d skipped: %s", t, e)
                self._row(t, "failed")
                # keep going with fresh candidates
                if cfg.enable_sparse:
                    s_cand = self._fresh_sparse(s_base)
                continue
            for cell, cost, fid in zip(CELLS, res.costs, res.fidelities):
                batch.costs[cell] = cost
                batch.fidelity[cell] = fid
            self._record(configs, res.costs, res.fidelities, res.fresh)
            att = attribute(batch)

            # bandit credit: the arm that generated this batch's fresh candidate(s)
            if arm_prev is None:
                for a in self._enabled_arms():
                    self.bandit.update(a, att.reward(a))
            else:
                self.bandit.update(arm_prev, att.reward(arm_prev))

            # validation / fidelity switch
            if self.ev.mode == SIMULATED:
                err = self.ev.validate(t, configs, res.costs)
                self._sync_best()
                if err is not None and err > cfg.epsilon:
                    self._switch(t, err)

            arm = self._select()
            self._row(t, arm, batch, att)

            # bases advance to the argmin cell; a fidelity switch or an
            # all-infeasible batch re-anchors them instead
            win = batch.argmin()
            anchor = self._rebase
            self._rebase = None
            if anchor is None and not math.isfinite(batch.costs[win]):
                anchor = self.best.config or self.best_real.config
                if anchor is None:
                    anchor = combine(space, space.default_sparse(), space.default_dense())
            sparse_improved = anchor is None and win in ("cb", "cc")
            dense_improved = anchor is None and win in ("bc", "cc")
            if dense_pending:
                dense_opt.update(dstate, dense_improved, x_cand)
            if anchor is not None:
                s_new = anchor.sparse_dict
            else:
                s_new = s_cand if sparse_improved else s_base
            if sparse_key(s_new) != sparse_key(s_base):
                dense_opt.reproject(space, dstate, mask(space, s_new))
            if anchor is not None:
                dstate.current = combine(space, s_new, anchor.dense_dict).dense_dict
            s_base, x_base = s_new, dict(dstate.current)

            # the selected arm explores; the other one holds a candidate that
            # just won and regenerates one that lost
            if cfg.enable_sparse and (arm == SPARSE_ARM or not sparse_improved):
                s_cand = self._fresh_sparse(s_base)
            else:
                s_cand = s_base
            if cfg.enable_dense and (arm == DENSE_ARM or not dense_improved):
                x_cand = dense_opt.propose(dstate, mask(space, s_base))
                dense_pending = True
            else:
                x_cand = dict(x_base)
                dense_pending = False
            arm_prev = arm

        self._finalize()
        return self._result()

    def _enabled_arms(self) -> List[str]:
        arms = []
        if self.cfg.enable_sparse:
            arms.append(SPARSE_ARM)
        if self.cfg.enable_dense:
            arms.append(DENSE_ARM)
        return arms

    def _select(self) -> str:
        arms = self._enabled_arms()
        if len(arms) == 1:
            return arms[0]
        if self.cfg.round_robin:
            arm = ARMS[self._rr % 2]
            self._rr += 1
            return arm
        return select_arm(self.bandit)

    def _sync_best(self) -> None:
        for c, v in self.ev.cache.entries(REAL):
            if v < self.best_real.cost:
                self.best_real = Best(c, v, REAL)

    def _switch(self, t: int, err: float) -> None:
        nodes_before = self.tree.node_count()
        queue = switch_fidelity(self.ev.fc, self._trees(), self.bandit, self.ev.cache.entries(SIMULATED),
                                self.cfg.lam, self.cfg.k_reval, t)
        log.info("fidelity switch at t=%d (MAPE %.3f); re-evaluating %d configurations", t, err, len(queue))
        for c in queue:
            try:
                self.ev.real(c)
            except OracleError as e:
                log.warning("re-evaluation failed: %s", e)
        self._sync_best()
        # simulated costs are no longer comparable with what comes next
        self.best = Best(self.best_real.config, self.best_real.cost, REAL)
        self._rebase = self.best_real.config
        self.switch_info = {"t": t, "mape": err, "nodes_before": nodes_before,
                            "nodes_after": self.tree.node_count(), "queued": len(queue)}

    def _finalize(self) -> None:
        """Profile the best configuration if it was only simulated, then fall
        back to the best real-validated configuration."""
        if self.best.config is not None and self.best.fidelity != REAL:
            # walk down the simulated ranking until one candidate holds up
            ranked = [self.best.config] + [c for _, _, c in sorted(
                (v, c.canonical_key, c) for c, v in self.ev.cache.entries(SIMULATED)
                if math.isfinite(v) and c != self.best.config)]
            for c in ranked[: max(1, self.cfg.k_reval)]:
                try:
                    if math.isfinite(self.ev.real(c)):
                        break
                except OracleError as e:
                    log.warning("final validation failed: %s", e)
            self._sync_best()
            self._row(self.cfg.budget_iters, "final")
        self._sync_best()
        if self.best_real.config is None and self.best.config is not None:
            log.warning("no real-validated configuration available")

    def _result(self) -> RunResult:
        return RunResult(
            self.best_real.config, self.best_real.cost, self.trace,
            tree=self.tree, bandit=self.bandit, evaluator=self.ev,
            tournament=self.tournament, switch_info=self.switch_info,
        )


def run(space: ConfigSpace, oracle: Callable[[Configuration], float], cfg: RunConfig,
        simulate: Optional[Callable[[Configuration], Optional[float]]] = None,
        evaluator: Optional[AdaptiveEvaluator] = None) -> RunResult:
    """Search ``space`` for the cheapest configuration under ``oracle``.

    ``simulate`` enables simulated evaluation until the fidelity check trips;
    without it every evaluation is profiled.
    """
    if evaluator is None:
        evaluator = AdaptiveEvaluator(
            oracle,
            simulate if cfg.use_simulators else None,
            FidelityController(cfg.tau, cfg.epsilon),
            max_parallel=cfg.max_parallel,
        )
    return Orchestrator(space, evaluator, cfg).run()


def write_best(path: Path, result: RunResult) -> None:
    doc = {
        "config": result.config.to_json_dict() if result.config is not None else None,
        "cost": result.cost if math.isfinite(result.cost) else None,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
