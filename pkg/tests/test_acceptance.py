"""The ten acceptance criteria, each at its stated tolerance and runtime.

Every test records one PASS/FAIL line that is printed in the pytest terminal
summary. Search-efficiency criteria use the moe-30B preset on the builtin space.
"""

import math
import statistics
import time

import numpy as np
import pytest

from autoscout.dense import init_state, propose as dense_propose, update as dense_update
from autoscout.evaluator import REAL, SIMULATED, EvaluationCache, FidelityController, ensemble_weights, switch_fidelity
from autoscout.harness import (
    baseline_random_search,
    brute_force_optimum,
    build_simulator,
    evals_to_threshold,
    final_real_cost,
    load_preset,
    scenario_space,
)
from autoscout.orchestrator import BanditState, RunConfig, attribute, run, select_arm
from autoscout.space import builtin_space, combine, is_feasible, mask, project
from autoscout.sparse import MctsTree, TournamentState, candidate_orderings, tournament_next, tournament_record_and_halve

from test_orchestrator import batch_with

SEEDS = range(20)
PRESET = "builtin:moe-30B"


@pytest.fixture(scope="module")
def full():
    sp = scenario_space("full")
    model = load_preset(PRESET, sp)
    _, opt = brute_force_optimum(sp, model)
    print(f"preset {model.name} hash {model.preset_hash} full optimum {opt:.4f}")
    return sp, model, opt


def autoscout_runs(sp, model, cfg, noise=0.0, **over):
    out = []
    for seed in SEEDS:
        c = RunConfig(**{**cfg, "seed": seed, **over})
        sim = build_simulator(sp, model, seed, noise) if c.use_simulators else None
        out.append(run(sp, model, c, simulate=sim))
    return out


def test_c1_ensemble_weights(report):
    t0 = time.perf_counter()
    w = ensemble_weights([0.8, 0.2, -0.1, 0.1])
    want = [8 / 11, 2 / 11, 0.0, 1 / 11]
    err = max(abs(a - b) for a, b in zip(w, want))
    dt = time.perf_counter() - t0
    assert report(1, err <= 1e-12 and dt < 1, f"max weight error {err:.1e}, {dt:.3f}s")


def test_c2_ucb1(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(10_000):
        n = rng.integers(1, 50, size=2).astype(float)
        q = rng.random(2) * n
        c0, gamma, t = rng.uniform(0.1, 3), rng.uniform(0.9, 1), int(rng.integers(0, 500))
        b = BanditState(c0=c0, gamma=gamma, q={"sparse": q[0], "dense": q[1]},
                        n={"sparse": n[0], "dense": n[1]}, t=t)
        c = c0 * gamma ** t
        score = [q[i] / n[i] + c * math.sqrt(math.log(n.sum()) / n[i]) for i in (0, 1)]
        want = "sparse" if score[0] >= score[1] else "dense"
        mismatches += select_arm(b) != want
    b = BanditState(c0=1.0, gamma=1.0, q={"sparse": 3.0, "dense": 1.0}, n={"sparse": 2.0, "dense": 2.0})
    example = select_arm(b) == "sparse"
    dt = time.perf_counter() - t0
    assert report(2, mismatches == 0 and example and dt < 5,
                  f"{mismatches} mismatches in 10^4 cases, worked example {'ok' if example else 'wrong'}, {dt:.2f}s")


def test_c3_difference_of_differences(report):
    t0 = time.perf_counter()
    r = attribute(batch_with((10, 8, 9, 6)))
    z = attribute(batch_with((0, 0, 0, 0)))
    ok = (r.delta_sparse, r.delta_dense) == (1.5, 2.5) and (z.delta_sparse, z.delta_dense) == (0, 0)
    dt = time.perf_counter() - t0
    assert report(3, ok and dt < 1, f"deltas {r.delta_sparse}/{r.delta_dense}, zero batch {z.delta_sparse}/{z.delta_dense}")


def test_c4_tournament(report, full):
    t0 = time.perf_counter()
    sp, model, _ = full
    rng = np.random.default_rng(0)
    trees = [MctsTree(sp, o, seed=i) for i, o in enumerate(candidate_orderings(sp, 8, rng))]
    ts = TournamentState(trees)
    oracle_ok = zigzag_ok = True
    rounds = []
    while not ts.done:
        order = ts.round_order()
        seen = []
        for _ in range(len(order)):
            i = tournament_next(ts)
            seen.append(i)
            s = ts.trees[i].propose()
            c = combine(sp, s, project(sp, sp.default_dense(), mask(sp, s)))
            cost = model(c)
            r = 0.0 if not math.isfinite(cost) else 11.0 / cost
            ts.trees[i].backpropagate(s, r)
            tournament_record_and_halve(ts, i, r)
        asc = len(rounds) % 2 == 0
        zigzag_ok &= seen == sorted(seen, reverse=not asc)
        top = sorted(seen, key=lambda k: (-ts.cumulative[k], k))[: math.ceil(len(seen) / 2)]
        oracle_ok &= sorted(top) == ts.survivors
        rounds.append(seen)
    # the same schedule inside a full run
    res = run(sp, model, RunConfig(budget_iters=5, k_tournament=8, seed=0), simulate=build_simulator(sp, model, 0))
    dt = time.perf_counter() - t0
    ok = ts.halvings == 3 and [len(r) for r in rounds] == [8, 4, 2] and zigzag_ok and oracle_ok \
        and res.tournament.halvings == 3 and dt < 10
    assert report(4, ok, f"halvings {ts.halvings} (run {res.tournament.halvings}), rounds {rounds}, {dt:.2f}s")


def test_c5_fidelity_switch(report, full):
    t0 = time.perf_counter()
    sp, model, _ = full
    zero = run(sp, model, RunConfig(budget_iters=500, seed=0, tau=10), simulate=model)
    a = not zero.switch_info and zero.evaluator.fc.mode == SIMULATED
    times3 = run(sp, model, RunConfig(budget_iters=30, seed=0, tau=10), simulate=lambda c: 3 * model(c))
    div3 = run(sp, model, RunConfig(budget_iters=30, seed=0, tau=10), simulate=lambda c: model(c) / 3)
    b = (times3.switch_info["t"] == 10 and abs(times3.switch_info["mape"] - 2.0) <= 1e-9
         and div3.switch_info["t"] == 10 and abs(div3.switch_info["mape"] - 2 / 3) <= 1e-9)
    nodes = all(r.switch_info["nodes_before"] == r.switch_info["nodes_after"] for r in (times3, div3))
    # Q/N ratios across the lambda scaling
    tree = MctsTree(sp, sp.sparse_names, seed=0)
    for _ in range(57):
        tree.backpropagate(tree.propose(), 0.5)
    before_nodes, snap = tree.node_count(), tree.export()
    bandit = BanditState(q={"sparse": 7.3, "dense": 2.9}, n={"sparse": 11.0, "dense": 6.0})
    ratios = {k: bandit.q[k] / bandit.n[k] for k in bandit.q}
    switch_fidelity(FidelityController(), [tree], bandit, [], lam=0.25, k_reval=5)
    preserved = all(abs(bandit.q[k] / bandit.n[k] - ratios[k]) <= 1e-12 for k in ratios)
    c = nodes and preserved and tree.node_count() == before_nodes and tree.export() == snap
    dt = time.perf_counter() - t0
    assert report(5, a and b and c and dt < 30,
                  f"(a) {'no switch' if a else 'switched'} over 500 iters; (b) x3 MAPE {times3.switch_info['mape']:.3f}, "
                  f"/3 MAPE {div3.switch_info['mape']:.3f}, both at t={times3.switch_info['t']}; "
                  f"(c) nodes kept {nodes}, Q/N kept {preserved}; {dt:.1f}s")


def test_c6_oracle_equivalence(report):
    t0 = time.perf_counter()
    sp = scenario_space("3dp")
    model = load_preset(PRESET, sp)
    _, opt = brute_force_optimum(sp, model)
    budget = round(0.2 * sp.size())
    runs = autoscout_runs(sp, model, {"budget_iters": budget})
    hits = sum(r.cost <= 1.05 * opt for r in runs)
    dt = time.perf_counter() - t0
    assert report(6, sp.size() <= 2000 and hits >= 18 and dt < 120,
                  f"{hits}/20 seeds within 5% of {opt:.4f} at T={budget} (|space|={sp.size()}), {dt:.1f}s")


def test_c7_search_efficiency(report, full):
    t0 = time.perf_counter()
    sp, model, opt = full
    runs = autoscout_runs(sp, model, {"budget_iters": 300, "budget_seconds": 600})
    ours = statistics.median(evals_to_threshold(r.trace, 1.05 * opt) for r in runs)
    rand = statistics.median(
        evals_to_threshold(baseline_random_search(sp, model, 3000, seed), 1.05 * opt) for seed in SEEDS)
    dt = time.perf_counter() - t0
    assert report(7, ours <= 0.5 * rand and dt < 300,
                  f"median real evals to 5%: autoscout {ours}, random {rand} (preset {model.name} {model.preset_hash}), {dt:.1f}s")


def test_c8_ablation_ordering(report, full):
    t0 = time.perf_counter()
    sp, model, opt = full
    base = {"budget_iters": 300, "budget_seconds": 600}
    variants = {"autoscout": {}, "no_simulators": {"use_simulators": False}, "sparse_only": {"enable_dense": False}}
    runs = {k: autoscout_runs(sp, model, base, **v) for k, v in variants.items()}
    med = {k: statistics.median(final_real_cost(r.trace) for r in rs) / opt for k, rs in runs.items()}
    evals = {k: statistics.median(evals_to_threshold(r.trace, 1.05 * opt) for r in runs[k])
             for k in ("autoscout", "no_simulators")}
    ok = med["autoscout"] <= med["no_simulators"] <= med["sparse_only"] and evals["no_simulators"] > evals["autoscout"]
    dt = time.perf_counter() - t0
    assert report(8, ok and dt < 300,
                  "median cost/optimum " + ", ".join(f"{k} {v:.4f}" for k, v in med.items())
                  + f"; evals to 5% {evals['autoscout']} vs {evals['no_simulators']}; {dt:.1f}s")


def test_c9_noise_robustness(report, full):
    t0 = time.perf_counter()
    sp, model, opt = full
    runs = autoscout_runs(sp, model, {"budget_iters": 200, "epsilon": 0.1}, noise=0.8)
    switched = sum(bool(r.switch_info) for r in runs)
    hits = sum(bool(r.switch_info) and r.cost <= 1.10 * opt for r in runs)
    dt = time.perf_counter() - t0
    assert report(9, hits >= 16 and dt < 300, f"{switched}/20 switched, {hits}/20 switched and within 10%, {dt:.1f}s")


def test_c10_determinism_and_feasibility(report, full):
    t0 = time.perf_counter()
    sp, model, _ = full
    traces = [run(sp, model, RunConfig(budget_iters=40, seed=9), simulate=build_simulator(sp, model, 9))
              .trace_csv(include_wall=False) for _ in range(2)]
    deterministic = traces[0] == traces[1]

    rng = np.random.default_rng(0)
    tree = MctsTree(sp, sp.sparse_names, seed=0)
    infeasible = 0
    structures = []
    for _ in range(10_000):
        s = tree.propose()
        c = combine(sp, s, project(sp, sp.default_dense(), mask(sp, s)))
        infeasible += not is_feasible(sp, c)
        tree.backpropagate(s, float(rng.random()))
        structures.append(s)
    for i in range(10_000):
        # one dense search of 25 steps per structure
        if i % 25 == 0:
            s = structures[i]
            m = mask(sp, s)
            state = init_state(sp, m)
        x = dense_propose(state, m)
        infeasible += not is_feasible(sp, combine(sp, s, x))
        dense_update(state, bool(rng.random() < 0.3), x)

    idempotent = True
    for _ in range(1000):
        c = sp.sample(rng)
        m = mask(sp, sp.sample(rng).sparse_dict)
        once = project(sp, c.dense_dict, m)
        idempotent &= project(sp, once, m) == once

    cache = EvaluationCache()
    downgraded = False
    for _ in range(2000):
        c = sp.sample(rng)
        cache.put(c, float(rng.random()), REAL if rng.random() < 0.5 else SIMULATED)
        was_real = cache.get(c, require_real=True) is not None
        cache.put(c, float(rng.random()), SIMULATED)
        downgraded |= was_real and cache.get(c, require_real=True) is None
    dt = time.perf_counter() - t0
    ok = deterministic and infeasible == 0 and idempotent and not downgraded and dt < 60
    assert report(10, ok, f"deterministic {deterministic}, infeasible proposals {infeasible}/20000, "
                          f"idempotent {idempotent}, downgrades {int(downgraded)}, {dt:.1f}s")
