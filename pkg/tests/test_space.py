import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoscout.space import (
    INACTIVE,
    SpaceError,
    combine,
    config_from_json,
    device_allocation,
    enumerate_space,
    is_feasible,
    load_space,
    mask,
    nearest,
    project,
)

from autoscout.space import builtin_space

from conftest import feature, space_doc

MEGATRON = builtin_space()


def base_sparse(**kw):
    s = {"pp": 1, "tp": 1, "dp": 1, "ep": 1, "cp": 1, "sp": INACTIVE, "ar": False, "mbs": 1}
    s.update(kw)
    return s


def test_builtin_partition(megatron):
    assert len(megatron.features) == 11
    assert megatron.sparse_names == ["pp", "tp", "dp", "ep", "cp", "sp", "ar", "mbs"]
    assert megatron.dense_names == ["ddp", "tp_comm", "ddp_bucket"]
    assert megatron.total_devices == 12


def test_empty_feature_list_rejected():
    with pytest.raises(SpaceError):
        load_space(space_doc([]))


def test_cyclic_activation_rejected():
    doc = space_doc([
        feature("f1", [1, 2], requires=[("f2", ">", 1)]),
        feature("f2", [1, 2], requires=[("f1", ">", 1)]),
    ])
    with pytest.raises(SpaceError, match="cycl"):
        load_space(doc)


@pytest.mark.parametrize("doc", [
    space_doc([feature("a", [], default=1)]),
    space_doc([feature("a", [1, 2], requires=[("ghost", ">", 1)])]),
    space_doc([feature("a", [1, 2]), feature("a", [1, 2])]),
    space_doc([feature("a", [1, 2], default=3)]),
    space_doc([feature("a", [1, 2]), feature("x", [3, 1], kind="dense")]),
    space_doc([feature("a", [1, 2])], constraints=[{"type": "product_le_devices", "features": ["zz"]}]),
])
def test_invalid_documents(doc):
    with pytest.raises(SpaceError):
        load_space(doc)


def test_load_from_json_string_and_path(tmp_path, megatron):
    from autoscout.space import builtin_space_path
    text = builtin_space_path().read_text()
    assert load_space(text).size() == megatron.size()
    p = tmp_path / "s.json"
    p.write_text(text)
    assert load_space(p).size() == megatron.size()


def test_mask_dp1_deactivates_ddp(megatron):
    m = mask(megatron, base_sparse(dp=1))
    assert "ddp" not in m.active_dense and "ddp_bucket" not in m.active_dense


def test_mask_tp1_deactivates_tp_comm(megatron):
    assert "tp_comm" not in mask(megatron, base_sparse(tp=1)).active_dense


def test_mask_tp2_dp2_full_grids(megatron):
    m = mask(megatron, base_sparse(tp=2, dp=2, sp=False))
    assert m.active_dense == frozenset({"ddp", "tp_comm", "ddp_bucket"})
    for name in m.active_dense:
        assert tuple(m.grid(name)) == tuple(megatron.feature(name).domain)


def test_mask_is_pure(megatron):
    s = base_sparse(tp=2, dp=4, sp=True)
    assert mask(megatron, s) == mask(megatron, dict(s))


def test_project_deactivates(megatron):
    m = mask(megatron, base_sparse(tp=2, sp=False, dp=1))
    x = {"ddp": 4, "tp_comm": 16, "ddp_bucket": 2}
    out = project(megatron, x, m)
    assert out["ddp"] is INACTIVE and out["ddp_bucket"] is INACTIVE
    assert out["tp_comm"] == 16


def test_project_deactivates_ddp_only():
    # a space where only ddp depends on dp, to mirror the three-knob example exactly
    doc = space_doc([
        feature("dp", [1, 2]), feature("tp", [1, 2]),
        feature("ddp", [1, 2, 4, 8], kind="dense", requires=[("dp", ">", 1)]),
        feature("tp_comm", list(range(12, 21)), kind="dense"),
        feature("ddp_bucket", list(range(1, 9)), kind="dense"),
    ])
    sp = load_space(doc)
    out = project(sp, {"ddp": 4, "tp_comm": 16, "ddp_bucket": 2}, mask(sp, {"dp": 1, "tp": 1}))
    assert out == {"ddp": INACTIVE, "tp_comm": 16, "ddp_bucket": 2}


def test_project_unchanged_inside(megatron):
    m = mask(megatron, base_sparse(tp=2, sp=False, dp=2))
    x = {"ddp": 2, "tp_comm": 14, "ddp_bucket": 4}
    assert project(megatron, x, m) == x


def test_project_clamps_to_narrowed_grid():
    doc = space_doc([
        feature("tp", [1, 2, 4]),
        feature("tp_comm", list(range(12, 21)), kind="dense", requires=[("tp", ">", 1)],
                narrow=[{"requires": [{"feature": "tp", "op": "==", "value": 2}], "domain": [12, 13, 14, 15, 16]}]),
    ])
    sp = load_space(doc)
    m = mask(sp, {"tp": 2})
    assert tuple(m.grid("tp_comm")) == (12, 13, 14, 15, 16)
    # nearest-value oracle over the sub-grid
    want = min(m.grid("tp_comm"), key=lambda g: (abs(g - 20), g))
    assert project(sp, {"tp_comm": 20}, m)["tp_comm"] == want == 16


def test_nearest_tie_goes_down():
    assert nearest([1, 3], 2) == 1
    assert nearest([2, 4, 8], 6) == 4
    assert nearest([2, 4, 8], 7) == 8


def test_is_feasible_examples(megatron):
    bad_sp = combine(megatron, base_sparse(tp=1), megatron.default_dense())
    bad_sp = bad_sp.__class__.make({**bad_sp.sparse_dict, "sp": True}, bad_sp.dense_dict)
    assert not is_feasible(megatron, bad_sp)
    minimal = combine(megatron, base_sparse(), megatron.default_dense())
    assert is_feasible(megatron, minimal)
    big = minimal.__class__.make(base_sparse(pp=8, tp=8, dp=8, sp=False), minimal.dense_dict)
    assert 8 * 8 * 8 > megatron.total_devices
    assert not is_feasible(megatron, big)


def test_is_feasible_rejects_off_grid(megatron):
    c = combine(megatron, base_sparse(tp=2, sp=False), megatron.default_dense())
    off = c.__class__.make(c.sparse_dict, {**c.dense_dict, "tp_comm": 25})
    assert not is_feasible(megatron, off)


def test_enumerate_two_booleans():
    sp = load_space(space_doc([feature("a", [False, True]), feature("b", [False, True])]))
    assert len(list(enumerate_space(sp))) == 4


def test_enumerate_gated(gated_tp):
    got = {json.dumps(c.to_json_dict(), sort_keys=True) for c in enumerate_space(gated_tp)}
    assert got == {
        json.dumps({"tp": 1, "sp": None}, sort_keys=True),
        json.dumps({"tp": 2, "sp": False}, sort_keys=True),
        json.dumps({"tp": 2, "sp": True}, sort_keys=True),
    }


def test_enumerate_builtin_order_of_magnitude(megatron):
    configs = list(enumerate_space(megatron))
    assert 10**4 <= len(configs) < 10**5
    assert len(configs) == megatron.size()
    keys = {c.canonical_key for c in configs}
    assert len(keys) == len(configs)
    assert all(is_feasible(megatron, c) for c in configs[::37])


def test_canonical_key_distinguishes_inactive(gated_tp):
    a, b, c = list(enumerate_space(gated_tp))
    assert len({a.canonical_key, b.canonical_key, c.canonical_key}) == 3
    assert "null" in a.canonical_key


def test_config_json_round_trip(megatron):
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = megatron.sample(rng)
        assert config_from_json(megatron, json.loads(json.dumps(c.to_json_dict()))) == c


def test_device_allocation_fastest_first():
    sp = load_space(space_doc([feature("pp", [1, 2, 4, 8, 16])],
                              devices=(("slow", 8, 48.0, 0.5), ("fast", 4, 80.0, 1.0)),
                              constraints=[{"type": "product_le_devices", "features": ["pp"]}]))
    assert device_allocation(sp, 4) == {"fast": 4, "slow": 0}
    assert device_allocation(sp, 8) == {"fast": 4, "slow": 4}


def test_restrict_pins_other_features(megatron):
    small = megatron.restrict(["pp", "tp", "dp", "mbs"])
    assert small.size() == 80
    for c in enumerate_space(small):
        assert c["ep"] == 1 and c["cp"] == 1 and c["ar"] is False


# -- properties ------------------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 10**9))
def test_project_combine_feasible_and_idempotent(seed_s, seed_x):
    sp = MEGATRON
    rs, rx = np.random.default_rng(seed_s), np.random.default_rng(seed_x)
    s = sp.feasible_sparse[int(rs.integers(len(sp.feasible_sparse)))]
    x = {f.name: f.domain[int(rx.integers(len(f.domain)))] for f in sp.dense_features}
    m = mask(sp, s)
    once = project(sp, x, m)
    assert project(sp, once, m) == once
    assert is_feasible(sp, combine(sp, s, x))


def test_project_feasible_10k_draws(megatron):
    rng = np.random.default_rng(0)
    table = megatron.feasible_sparse
    for _ in range(10_000):
        s = table[int(rng.integers(len(table)))]
        x = {f.name: f.domain[int(rng.integers(len(f.domain)))] for f in megatron.dense_features}
        assert is_feasible(megatron, combine(megatron, s, x))
