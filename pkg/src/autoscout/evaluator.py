"""Fidelity-adaptive evaluation.

Costs come either from an R^2-weighted ensemble of linear simulators or from
the real oracle. Selected configurations are profiled every ``tau``
iterations; once the interval's MAPE exceeds ``epsilon`` the evaluator
switches to real profiling for good.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .space import INACTIVE, ConfigSpace, Configuration, device_allocation, log2_or_raw, world_size

log = logging.getLogger(__name__)

INFEASIBLE = math.inf
SIMULATED, REAL = "simulated", "real"

Oracle = Callable[[Configuration], float]


class OracleError(RuntimeError):
    """The oracle could not produce a cost (timeout, crash, bad output)."""


# -- linear simulators ------------------------------------------------------------


def encode(space: ConfigSpace, c: Configuration, name: str, log_features: bool = False) -> float:
    """Numeric regression input for one knob.

    Inactive knobs take their default; booleans map to 0/1; device-class
    names resolve to the number of devices of that class allocated to ``c``.
    With ``log_features``, power-of-two integers are encoded as log2.
    """
    values = c.values()
    if name in values:
        v = values[name]
        if v is INACTIVE:
            v = space.feature(name).default
    else:
        alloc = device_allocation(space, world_size(space, c))
        if name not in alloc:
            raise KeyError(f"unknown simulator input {name!r}")
        return float(alloc[name])
    if isinstance(v, bool):
        return float(v)
    return log2_or_raw(v) if log_features else float(v)


@dataclass
class LinearSimulator:
    name: str
    inputs: List[str]
    coef: np.ndarray
    intercept: float
    r2: float
    n_train: int
    ridge: bool = False
    log_features: bool = False
    log_target: bool = False

    def predict_row(self, row: np.ndarray) -> float:
        y = float(row @ self.coef + self.intercept)
        return math.exp(y) if self.log_target else y

    def predict(self, space: ConfigSpace, c: Configuration) -> float:
        row = np.array([encode(space, c, n, self.log_features) for n in self.inputs])
        return self.predict_row(row)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "inputs": list(self.inputs),
            "coef": [float(v) for v in self.coef],
            "intercept": self.intercept,
            "r2": self.r2,
            "n_train": self.n_train,
            "ridge": self.ridge,
            "log_features": self.log_features,
            "log_target": self.log_target,
        }


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def _solve(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, float, bool]:
    design = np.column_stack([X, np.ones(len(X))])
    ridge = np.linalg.matrix_rank(design) < design.shape[1]
    if ridge:
        penalty = 1e-6 * np.eye(design.shape[1])
        penalty[-1, -1] = 0.0
        beta = np.linalg.solve(design.T @ design + penalty, design.T @ y)
    else:
        beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return beta[:-1], float(beta[-1]), bool(ridge)


def fit_simulator(
    subset: Sequence[str],
    samples: Sequence[Tuple[Configuration, float]],
    space: ConfigSpace,
    *,
    name: str = "simulator",
    seed: int = 0,
    holdout: float = 0.2,
    log_features: bool = False,
    log_target: bool = False,
) -> LinearSimulator:
    """Ordinary least squares on the subset's encodings, scored by R^2 on a
    seeded holdout split. Rank-deficient designs fall back to a 1e-6 ridge."""
    data = [(c, y) for c, y in samples if math.isfinite(y)]
    if len(data) < len(subset) + 2:
        raise ValueError(f"need at least {len(subset) + 2} finite samples, got {len(data)}")
    X = np.array([[encode(space, c, n, log_features) for n in subset] for c, _ in data], dtype=float)
    y = np.array([v for _, v in data], dtype=float)
    n = len(y)
    n_hold = min(max(1, int(round(holdout * n))), n - len(subset) - 1)
    perm = np.random.default_rng(seed).permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]
    target = np.log(y) if log_target else y
    coef, intercept, ridge = _solve(X[train], target[train])
    sim = LinearSimulator(name, list(subset), coef, intercept, 0.0, len(train), ridge, log_features, log_target)
    pred = np.array([sim.predict_row(r) for r in X[hold]])
    sim.r2 = r2_score(y[hold], pred)
    return sim


def ensemble_weights(r2: Sequence[float]) -> Optional[List[float]]:
    clipped = [max(0.0, v) for v in r2]
    total = sum(clipped)
    if total <= 0.0:
        return None
    return [v / total for v in clipped]


@dataclass
class SimulatorEnsemble:
    space: ConfigSpace
    simulators: List[LinearSimulator]

    @property
    def weights(self) -> Optional[List[float]]:
        return ensemble_weights([s.r2 for s in self.simulators])

    def predict(self, c: Configuration) -> Optional[float]:
        """Weighted prediction, or ``None`` when no simulator has positive R^2."""
        return ensemble_predict(self, c)

    def __call__(self, c: Configuration) -> Optional[float]:
        return ensemble_predict(self, c)

    def to_json(self) -> str:
        return json.dumps(
            {"simulators": [s.to_dict() for s in self.simulators], "weights": self.weights},
            indent=2,
        )


def ensemble_predict(e: SimulatorEnsemble, c: Configuration) -> Optional[float]:
    if not e.simulators:
        raise ValueError("ensemble has no simulators")
    w = e.weights
    if w is None:
        return None
    return sum(wi * s.predict(e.space, c) for wi, s in zip(w, e.simulators) if wi > 0.0)


def fit_ensemble(
    space: ConfigSpace,
    specs: Sequence[Mapping],
    samples: Sequence[Tuple[Configuration, float]],
    seed: int = 0,
    log_features: bool = True,
    log_target: bool = True,
) -> SimulatorEnsemble:
    """Fit one simulator per spec entry ``{"name", "inputs"}``. Inputs naming
    knobs absent from ``space`` (other than device classes) are dropped."""
    known = set(space.sparse_names) | set(space.dense_names) | {d.name for d in space.devices}
    sims = []
    for i, spec in enumerate(specs):
        inputs = [n for n in spec["inputs"] if n in known]
        sims.append(fit_simulator(
            inputs, samples, space, name=spec["name"], seed=seed + i,
            log_features=spec.get("log_features", log_features),
            log_target=spec.get("log_target", log_target),
        ))
    return SimulatorEnsemble(space, sims)


# -- noise ------------------------------------------------------------------------


class NoisyOracle:
    """Multiplies each output by ``1 + u`` with ``u ~ U[-noise_pct, noise_pct]``."""

    def __init__(self, oracle: Callable[[Configuration], Optional[float]], noise_pct: float, seed: int = 0):
        if noise_pct < 0:
            raise ValueError("noise_pct must be non-negative")
        self.oracle = oracle
        self.noise_pct = noise_pct
        self.rng = np.random.default_rng(seed)

    @staticmethod
    def perturb(cost: float, u: float) -> float:
        return cost * (1.0 + u)

    def __call__(self, c: Configuration) -> Optional[float]:
        cost = self.oracle(c)
        if self.noise_pct == 0 or cost is None or not math.isfinite(cost):
            return cost
        return self.perturb(cost, float(self.rng.uniform(-self.noise_pct, self.noise_pct)))


def wrap_noisy(oracle, noise_pct: float, seed: int = 0) -> NoisyOracle:
    return NoisyOracle(oracle, noise_pct, seed)


# -- cache and fidelity control ---------------------------------------------------------


class EvaluationCache:
    """canonical_key -> {fidelity: cost}. Real entries are never replaced by simulated ones."""

    def __init__(self) -> None:
        self._data: Dict[str, Dict[str, float]] = {}
        self._configs: Dict[str, Configuration] = {}
        self._lock = threading.Lock()

    def get(self, c: Configuration, require_real: bool = False) -> Optional[Tuple[float, str]]:
        entry = self._data.get(c.canonical_key)
        if not entry:
            return None
        if REAL in entry:
            return entry[REAL], REAL
        if not require_real and SIMULATED in entry:
            return entry[SIMULATED], SIMULATED
        return None

    def put(self, c: Configuration, cost: float, fidelity: str) -> None:
        with self._lock:
            entry = self._data.setdefault(c.canonical_key, {})
            self._configs.setdefault(c.canonical_key, c)
            if fidelity == SIMULATED and REAL in entry:
                return
            entry[fidelity] = cost

    def simulated(self, c: Configuration) -> Optional[float]:
        entry = self._data.get(c.canonical_key)
        return entry.get(SIMULATED) if entry else None

    def entries(self, fidelity: str) -> List[Tuple[Configuration, float]]:
        return [(self._configs[k], v[fidelity]) for k, v in self._data.items() if fidelity in v]

    def __len__(self) -> int:
        return len(self._data)


@dataclass
class FidelityController:
    tau: int = 10
    epsilon: float = 0.1
    mode: str = SIMULATED
    # absolute percentage errors gathered since the last checkpoint
    window: List[float] = field(default_factory=list)
    sim_evals: int = 0
    real_evals: int = 0
    switched_at: Optional[int] = None
    mape_log: List[Tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def is_checkpoint(self, t: int) -> bool:
        return self.mode == SIMULATED and t > 0 and t % self.tau == 0


def mape(pairs: Sequence[Tuple[float, float]]) -> float:
    return float(np.mean([abs(p - r) / r for p, r in pairs]))


@dataclass
class EvalResult:
    costs: List[float]
    fidelities: List[str]
    fresh: List[bool]
    real_calls: int = 0
    sim_calls: int = 0


class AdaptiveEvaluator:
    """Routes evaluations to the simulator or the real oracle, owns the cache
    and the model clock.

    ``simulate`` returns a cost, ``INFEASIBLE``, or ``None`` when no estimate is
    available (which forces a real evaluation). With ``model_time`` the clock
    advances by each real cost (``infeasible_seconds`` for failed launches);
    otherwise by measured wall time.
    """

    def __init__(
        self,
        real_oracle: Oracle,
        simulate: Optional[Callable[[Configuration], Optional[float]]] = None,
        fc: Optional[FidelityController] = None,
        *,
        model_time: bool = True,
        sim_seconds: float = 0.001,
        infeasible_seconds: float = 1.0,
        max_parallel: int = 1,
    ):
        self.real_oracle = real_oracle
        self.simulate = simulate
        self.fc = fc or FidelityController()
        if simulate is None:
            self.fc.mode = REAL
        self.cache = EvaluationCache()
        self.model_time = model_time
        self.sim_seconds = sim_seconds
        self.infeasible_seconds = infeasible_seconds
        self.max_parallel = max_parallel
        self.clock = 0.0
        self.oracle_failures = 0

    @property
    def mode(self) -> str:
        return self.fc.mode

    # -- raw calls ----------------------------------------------------------------

    def _call_real(self, c: Configuration) -> Tuple[float, float]:
        start = time.perf_counter()
        cost = float(self.real_oracle(c))
        elapsed = time.perf_counter() - start
        if self.model_time:
            elapsed = cost if math.isfinite(cost) else self.infeasible_seconds
        return cost, elapsed

    def real_many(self, configs: Sequence[Configuration]) -> List[float]:
        """Profile ``configs`` (all assumed cache misses), possibly concurrently.
        Raises :class:`OracleError` after recording every successful result."""
        if not configs:
            return []
        if self.max_parallel > 1 and len(configs) > 1:
            with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
                futures = [pool.submit(self._call_real, c) for c in configs]
                results = []
                for f in futures:
                    try:
                        results.append(f.result())
                    except Exception as e:  # noqa: BLE001 - any oracle crash is a failure
                        results.append(e)
        else:
            results = []
            for c in configs:
                try:
                    results.append(self._call_real(c))
                except Exception as e:  # noqa: BLE001
                    results.append(e)
        out, error = [], None
        for c, res in zip(configs, results):
            if isinstance(res, Exception):
                self.oracle_failures += 1
                error = error or res
                out.append(math.nan)
                continue
            cost, elapsed = res
            self.clock += elapsed
            self.fc.real_evals += 1
            self.cache.put(c, cost, REAL)
            out.append(cost)
        if error is not None:
            raise OracleError(str(error)) from error
        return out

    def real(self, c: Configuration) -> float:
        hit = self.cache.get(c, require_real=True)
        if hit is not None:
            return hit[0]
        return self.real_many([c])[0]

    # -- batches ------------------------------------------------------------------

    def evaluate(self, configs: Sequence[Configuration]) -> EvalResult:
        """Costs for ``configs`` under the current mode; duplicates share one
        evaluation and cache hits cost nothing."""
        require_real = self.fc.mode == REAL
        distinct: Dict[str, Configuration] = {}
        for c in configs:
            distinct.setdefault(c.canonical_key, c)
        known: Dict[str, Tuple[float, str]] = {}
        to_real: List[Configuration] = []
        sim_calls = 0
        fresh_keys = set()
        for key, c in distinct.items():
            hit = self.cache.get(c, require_real=require_real)
            if hit is not None:
                known[key] = hit
                continue
            fresh_keys.add(key)
            if not require_real:
                pred = self.simulate(c)
                if pred is not None:
                    pred = float(pred)
                    self.cache.put(c, pred, SIMULATED)
                    self.fc.sim_evals += 1
                    self.clock += self.sim_seconds
                    sim_calls += 1
                    known[key] = (pred, SIMULATED)
                    continue
            to_real.append(c)
        real_costs = self.real_many(to_real)
        for c, cost in zip(to_real, real_costs):
            known[c.canonical_key] = (cost, REAL)
        costs = [known[c.canonical_key][0] for c in configs]
        fids = [known[c.canonical_key][1] for c in configs]
        seen = set()
        fresh = []
        for c in configs:
            k = c.canonical_key
            fresh.append(k in fresh_keys and k not in seen)
            seen.add(k)
        return EvalResult(costs, fids, fresh, len(to_real), sim_calls)

    def best_simulated(self) -> Optional[Tuple[Configuration, float]]:
        entries = [(c, v) for c, v in self.cache.entries(SIMULATED) if math.isfinite(v)]
        if not entries:
            return None
        return min(entries, key=lambda e: e[1])

    def validate(self, t: int, batch: Sequence[Configuration], costs: Sequence[float]) -> Optional[float]:
        """At a checkpoint, profile the best-simulated configuration and the
        batch argmin; return the interval MAPE (``None`` if nothing was
        validated or this is not a checkpoint)."""
        if not self.fc.is_checkpoint(t):
            return None
        picks: List[Configuration] = []
        best = self.best_simulated()
        if best is not None:
            picks.append(best[0])
        finite = [(v, i) for i, v in enumerate(costs) if math.isfinite(v)]
        if finite:
            picks.append(batch[min(finite)[1]])
        seen = set()
        for c in picks:
            if c.canonical_key in seen:
                continue
            seen.add(c.canonical_key)
            pred = self.cache.simulated(c)
            try:
                real = self.real(c)
            except OracleError as e:
                log.warning("validation of %s failed: %s", c.canonical_key, e)
                continue
            if pred is None:
                continue
            if math.isfinite(pred) and math.isfinite(real) and real > 0:
                self.fc.window.append(abs(pred - real) / real)
            elif math.isfinite(pred) != math.isfinite(real):
                # feasibility disagreement counts as a 100% error
                self.fc.window.append(1.0)
        if not self.fc.window:
            return None
        err = float(np.mean(self.fc.window))
        self.fc.window = []
        self.fc.mape_log.append((t, err))
        return err


def switch_fidelity(fc: FidelityController, trees, bandit, sim_history: Sequence[Tuple[Configuration, float]],
                    lam: float, k_reval: int, t: Optional[int] = None) -> List[Configuration]:
    """One-way switch to real profiling.

    Search trees are left untouched; bandit statistics are shrunk by ``lam``
    so they act as weak priors. Returns the ``k_reval`` distinct
    configurations with the lowest simulated cost, best first.
    """
    if fc.mode != SIMULATED:
        raise RuntimeError("fidelity switch is one-way")
    if not 0 < lam <= 1:
        raise ValueError("lam must lie in (0, 1]")
    fc.mode = REAL
    fc.switched_at = t
    fc.window = []
    bandit.scale(lam)
    ranked = sorted(((v, c.canonical_key, c) for c, v in sim_history if math.isfinite(v)), key=lambda e: (e[0], e[1]))
    queue, seen = [], set()
    for _, key, c in ranked:
        if key in seen:
            continue
        seen.add(key)
        queue.append(c)
        if len(queue) == k_reval:
            break
    return queue
