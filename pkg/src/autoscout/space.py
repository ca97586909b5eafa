"""Structured configuration spaces: sparse structural knobs, gridded dense knobs,
conditional activation and global feasibility constraints.
"""

from __future__ import annotations

import itertools
import json
import math
import operator
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

SPARSE = "sparse"
DENSE = "dense"


class _Inactive:
    """Marker for a feature whose activation predicate is false."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Inactive"

    def __reduce__(self):
        return (_Inactive, ())


INACTIVE = _Inactive()

Value = Union[int, bool, _Inactive]


class SpaceError(ValueError):
    """Raised for malformed or unsatisfiable space definitions."""


_OPS = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class Condition:
    feature: str
    op: str
    value: Any

    def holds(self, assignment: Mapping[str, Value]) -> bool:
        v = assignment.get(self.feature, INACTIVE)
        if v is INACTIVE:
            return False
        return bool(_OPS[self.op](v, self.value))


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    domain: Tuple[Value, ...]
    default: Value
    requires: Tuple[Condition, ...] = ()
    # Optional narrowing of a dense grid: first rule whose conditions hold wins.
    narrow: Tuple[Tuple[Tuple[Condition, ...], Tuple[Value, ...]], ...] = ()

    @property
    def is_sparse(self) -> bool:
        return self.kind == SPARSE

    def is_active(self, assignment: Mapping[str, Value]) -> bool:
        return all(c.holds(assignment) for c in self.requires)

    def subgrid(self, assignment: Mapping[str, Value]) -> Tuple[Value, ...]:
        for conds, dom in self.narrow:
            if all(c.holds(assignment) for c in conds):
                return dom
        return self.domain


@dataclass(frozen=True)
class Constraint:
    """Global constraint over sparse feature values.

    ``product_le_devices``: product of the listed degrees must not exceed the
    device count. ``divides``: value of ``a`` divides value of ``b``.
    Inactive features act as 1 in products and make ``divides`` vacuous.
    """

    type: str
    features: Tuple[str, ...]

    def check(self, assignment: Mapping[str, Value], total_devices: int) -> bool:
        if self.type == "product_le_devices":
            prod = 1
            for f in self.features:
                v = assignment.get(f, INACTIVE)
                if v is not INACTIVE:
                    prod *= int(v)
            return prod <= total_devices
        if self.type == "divides":
            a, b = (assignment.get(f, INACTIVE) for f in self.features)
            if a is INACTIVE or b is INACTIVE:
                return True
            return int(b) % int(a) == 0
        raise SpaceError(f"unknown constraint type {self.type!r}")


@dataclass(frozen=True)
class DeviceClass:
    name: str
    count: int
    mem_gb: float = 0.0
    rel_throughput: float = 1.0


@dataclass(frozen=True)
class Configuration:
    """A sparse assignment paired with a dense assignment.

    Both maps cover every feature of their kind; gated-off features hold
    ``INACTIVE``.
    """

    sparse: Tuple[Tuple[str, Value], ...]
    dense: Tuple[Tuple[str, Value], ...]

    @classmethod
    def make(cls, sparse: Mapping[str, Value], dense: Mapping[str, Value]) -> "Configuration":
        return cls(tuple(sparse.items()), tuple(dense.items()))

    @property
    def sparse_dict(self) -> Dict[str, Value]:
        return dict(self.sparse)

    @property
    def dense_dict(self) -> Dict[str, Value]:
        return dict(self.dense)

    def values(self) -> Dict[str, Value]:
        out = dict(self.sparse)
        out.update(self.dense)
        return out

    def __getitem__(self, name: str) -> Value:
        for k, v in itertools.chain(self.sparse, self.dense):
            if k == name:
                return v
        raise KeyError(name)

    def to_json_dict(self) -> Dict[str, Any]:
        return {k: (None if v is INACTIVE else v) for k, v in itertools.chain(self.sparse, self.dense)}

    @cached_property
    def canonical_key(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))

    def __hash__(self) -> int:
        return hash(self.canonical_key)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.canonical_key == other.canonical_key


def sparse_key(s: Mapping[str, Value]) -> str:
    return json.dumps({k: (None if v is INACTIVE else v) for k, v in s.items()}, sort_keys=True)


@dataclass(frozen=True)
class Mask:
    """Active dense features under a sparse assignment and their feasible sub-grids."""

    active: Tuple[str, ...]
    subgrids: Tuple[Tuple[str, Tuple[Value, ...]], ...]

    @property
    def active_dense(self) -> frozenset:
        return frozenset(self.active)

    def grid(self, name: str) -> Tuple[Value, ...]:
        for k, g in self.subgrids:
            if k == name:
                return g
        raise KeyError(name)


@dataclass
class ConfigSpace:
    features: List[FeatureSpec]
    devices: List[DeviceClass] = field(default_factory=list)
    constraints: List[Constraint] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_name = {f.name: f for f in self.features}

    @property
    def sparse_features(self) -> List[FeatureSpec]:
        return [f for f in self.features if f.is_sparse]

    @property
    def dense_features(self) -> List[FeatureSpec]:
        return [f for f in self.features if not f.is_sparse]

    @property
    def sparse_names(self) -> List[str]:
        return [f.name for f in self.features if f.is_sparse]

    @property
    def dense_names(self) -> List[str]:
        return [f.name for f in self.features if not f.is_sparse]

    @property
    def total_devices(self) -> int:
        return sum(d.count for d in self.devices) if self.devices else 1

    def feature(self, name: str) -> FeatureSpec:
        return self._by_name[name]

    def dependencies(self, name: str) -> List[str]:
        f = self._by_name[name]
        deps = [c.feature for c in f.requires]
        for conds, _ in f.narrow:
            deps.extend(c.feature for c in conds)
        return deps

    # -- sparse structure ---------------------------------------------------

    def sparse_consistent(self, s: Mapping[str, Value]) -> bool:
        for f in self.sparse_features:
            if f.name not in s:
                return False
            v = s[f.name]
            if f.is_active(s):
                if v is INACTIVE or v not in f.domain:
                    return False
            elif v is not INACTIVE:
                return False
        return all(c.check(s, self.total_devices) for c in self.constraints)

    @cached_property
    def feasible_sparse(self) -> List[Dict[str, Value]]:
        """All sparse assignments satisfying activation and global constraints,
        in declaration/domain order."""
        out: List[Dict[str, Value]] = []
        feats = self.sparse_features

        def rec(i: int, partial: Dict[str, Value]) -> None:
            if i == len(feats):
                if all(c.check(partial, self.total_devices) for c in self.constraints):
                    out.append(dict(partial))
                return
            f = feats[i]
            values = f.domain if f.is_active(partial) else (INACTIVE,)
            for v in values:
                partial[f.name] = v
                rec(i + 1, partial)
            del partial[f.name]

        rec(0, {})
        return out

    def default_sparse(self) -> Dict[str, Value]:
        """The all-defaults structure if feasible, else the first feasible one."""
        s: Dict[str, Value] = {}
        for f in self.sparse_features:
            s[f.name] = f.default if f.is_active(s) else INACTIVE
        if self.sparse_consistent(s):
            return s
        if not self.feasible_sparse:
            raise SpaceError("space has no feasible structure")
        return dict(self.feasible_sparse[0])

    def dense_completions(self, s: Mapping[str, Value]) -> int:
        m = mask(self, s)
        return int(np.prod([len(g) for _, g in m.subgrids])) if m.subgrids else 1

    def sample(self, rng: np.random.Generator) -> Configuration:
        """Uniform draw over feasible configurations."""
        sparse = self.feasible_sparse
        weights = self._completion_weights
        i = int(rng.choice(len(sparse), p=weights))
        s = sparse[i]
        m = mask(self, s)
        x = {name: INACTIVE for name in self.dense_names}
        for name, grid in m.subgrids:
            x[name] = grid[int(rng.integers(len(grid)))]
        return Configuration.make(s, x)

    @cached_property
    def _completion_weights(self) -> np.ndarray:
        w = np.array([self.dense_completions(s) for s in self.feasible_sparse], dtype=float)
        return w / w.sum()

    def size(self) -> int:
        return int(sum(self.dense_completions(s) for s in self.feasible_sparse))

    def default_dense(self) -> Dict[str, Value]:
        return {f.name: f.default for f in self.dense_features}

    def restrict(self, names: Sequence[str]) -> "ConfigSpace":
        """Sub-space searching only ``names``; every other feature is pinned to its default."""
        unknown = set(names) - set(self._by_name)
        if unknown:
            raise SpaceError(f"unknown features {sorted(unknown)}")
        feats = []
        for f in self.features:
            if f.name in names:
                feats.append(f)
            else:
                feats.append(FeatureSpec(f.name, f.kind, (f.default,), f.default, f.requires))
        return ConfigSpace(feats, list(self.devices), list(self.constraints))


# -- loading --------------------------------------------------------------------


def _conditions(raw: Sequence[Mapping[str, Any]], where: str) -> Tuple[Condition, ...]:
    out = []
    for r in raw:
        try:
            cond = Condition(str(r["feature"]), str(r["op"]), r["value"])
        except KeyError as e:
            raise SpaceError(f"{where}: condition missing {e}") from None
        if cond.op not in _OPS:
            raise SpaceError(f"{where}: unsupported operator {cond.op!r}")
        out.append(cond)
    return tuple(out)


def load_space(definition: Union[str, Path, Mapping[str, Any]]) -> ConfigSpace:
    """Build a validated :class:`ConfigSpace` from a JSON document, a path to one,
    or an already-parsed mapping."""
    if isinstance(definition, Path) or (isinstance(definition, str) and not definition.lstrip().startswith("{")):
        doc = json.loads(Path(definition).read_text())
    elif isinstance(definition, str):
        doc = json.loads(definition)
    else:
        doc = definition
    if not isinstance(doc, Mapping):
        raise SpaceError("space definition must be a JSON object")

    raw_feats = doc.get("features")
    if not isinstance(raw_feats, list) or not raw_feats:
        raise SpaceError("space must declare at least one feature")

    features: List[FeatureSpec] = []
    seen = set()
    for rf in raw_feats:
        if not isinstance(rf, Mapping) or "name" not in rf:
            raise SpaceError(f"malformed feature entry: {rf!r}")
        name = str(rf["name"])
        if name in seen:
            raise SpaceError(f"duplicate feature {name!r}")
        seen.add(name)
        kind = rf.get("kind")
        if kind not in (SPARSE, DENSE):
            raise SpaceError(f"{name}: kind must be 'sparse' or 'dense'")
        domain = tuple(rf.get("domain") or ())
        if not domain:
            raise SpaceError(f"{name}: empty domain")
        if any(not isinstance(v, (int, bool)) for v in domain):
            raise SpaceError(f"{name}: domain values must be integers or booleans")
        if len(set(map(repr, domain))) != len(domain):
            raise SpaceError(f"{name}: duplicate domain values")
        if kind == DENSE and list(domain) != sorted(domain):
            raise SpaceError(f"{name}: dense grid must be strictly increasing")
        default = rf.get("default", domain[0])
        if default not in domain:
            raise SpaceError(f"{name}: default {default!r} not in domain")
        requires = _conditions(rf.get("requires", []), name)
        narrow = []
        for rule in rf.get("narrow", []):
            sub = tuple(rule["domain"])
            if not sub or any(v not in domain for v in sub):
                raise SpaceError(f"{name}: narrowed grid must be a non-empty subset of the domain")
            narrow.append((_conditions(rule.get("requires", []), name), sub))
        features.append(FeatureSpec(name, kind, domain, default, requires, tuple(narrow)))

    names = {f.name for f in features}
    for f in features:
        for c in f.requires + tuple(c for conds, _ in f.narrow for c in conds):
            if c.feature not in names:
                raise SpaceError(f"{f.name}: predicate references unknown feature {c.feature!r}")
    _check_acyclic(features)
    # predicates must reference earlier features
    order = {f.name: i for i, f in enumerate(features)}
    for f in features:
        for c in f.requires:
            if order[c.feature] >= order[f.name]:
                raise SpaceError(f"{f.name}: predicate references later feature {c.feature!r}")
            if not features[order[c.feature]].is_sparse:
                raise SpaceError(f"{f.name}: activation may only depend on sparse features")

    devices = [
        DeviceClass(str(d["class"]), int(d["count"]), float(d.get("mem_gb", 0.0)), float(d.get("rel_throughput", 1.0)))
        for d in (doc.get("hardware") or {}).get("devices", [])
    ]
    constraints = []
    for rc in doc.get("constraints", []):
        t = rc.get("type")
        if t == "product_le_devices":
            feats = tuple(rc["features"])
        elif t == "divides":
            feats = (rc["a"], rc["b"])
        else:
            raise SpaceError(f"unknown constraint type {t!r}")
        for fname in feats:
            if fname not in names:
                raise SpaceError(f"constraint references unknown feature {fname!r}")
            if not features[order[fname]].is_sparse:
                raise SpaceError(f"constraint references dense feature {fname!r}")
        constraints.append(Constraint(t, feats))

    space = ConfigSpace(features, devices, constraints)
    if not space.feasible_sparse:
        raise SpaceError("no configuration satisfies the constraints")
    return space


def _check_acyclic(features: Sequence[FeatureSpec]) -> None:
    deps = {f.name: {c.feature for c in f.requires} for f in features}
    state: Dict[str, int] = {}

    def visit(n: str, stack: List[str]) -> None:
        if state.get(n) == 1:
            raise SpaceError("cyclic activation dependency: " + " -> ".join(stack + [n]))
        if state.get(n) == 2:
            return
        state[n] = 1
        for d in deps.get(n, ()):
            visit(d, stack + [n])
        state[n] = 2

    for f in features:
        visit(f.name, [])


# -- masking, projection, feasibility ------------------------------------------------


def mask(space: ConfigSpace, s: Mapping[str, Value]) -> Mask:
    active = []
    grids = []
    for f in space.dense_features:
        if f.is_active(s):
            active.append(f.name)
            grids.append((f.name, f.subgrid(s)))
    return Mask(tuple(active), tuple(grids))


def nearest(grid: Sequence[Value], v: Value) -> Value:
    """Nearest grid value; ties go to the smaller value."""
    if v in grid:
        return v
    return min(grid, key=lambda g: (abs(int(g) - int(v)), int(g)))


def project(space: ConfigSpace, x: Mapping[str, Value], m: Mask) -> Dict[str, Value]:
    out: Dict[str, Value] = {}
    grids = dict(m.subgrids)
    for f in space.dense_features:
        if f.name not in grids:
            out[f.name] = INACTIVE
            continue
        v = x.get(f.name, INACTIVE)
        out[f.name] = f.default if v is INACTIVE else v
        out[f.name] = nearest(grids[f.name], out[f.name])
    return out


def combine(space: ConfigSpace, s: Mapping[str, Value], x: Mapping[str, Value]) -> Configuration:
    """Pair a structure with a dense assignment re-projected onto its mask."""
    return Configuration.make(
        {n: s[n] for n in space.sparse_names},
        project(space, x, mask(space, s)),
    )


def is_feasible(space: ConfigSpace, c: Configuration) -> bool:
    s = c.sparse_dict
    if set(s) != set(space.sparse_names) or not space.sparse_consistent(s):
        return False
    x = c.dense_dict
    if set(x) != set(space.dense_names):
        return False
    m = mask(space, s)
    grids = dict(m.subgrids)
    for name in space.dense_names:
        if name in grids:
            if x[name] is INACTIVE or x[name] not in grids[name]:
                return False
        elif x[name] is not INACTIVE:
            return False
    return True


def enumerate_space(space: ConfigSpace) -> Iterator[Configuration]:
    """Every feasible configuration once, sparse-major in declaration/domain order."""
    dense_names = space.dense_names
    for s in space.feasible_sparse:
        m = mask(space, s)
        grids = dict(m.subgrids)
        axes = [grids.get(n, (INACTIVE,)) for n in dense_names]
        for combo in itertools.product(*axes):
            yield Configuration.make(s, dict(zip(dense_names, combo)))


def config_from_json(space: ConfigSpace, obj: Mapping[str, Any]) -> Configuration:
    def val(name: str) -> Value:
        v = obj.get(name)
        return INACTIVE if v is None else v

    return Configuration.make(
        {n: val(n) for n in space.sparse_names},
        {n: val(n) for n in space.dense_names},
    )


def is_power_of_two(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1 and (v & (v - 1)) == 0


def log2_or_raw(v: Value) -> float:
    return math.log2(v) if is_power_of_two(v) else float(v)


def builtin_space_path(name: str = "megatron") -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def builtin_space(name: str = "megatron") -> ConfigSpace:
    return load_space(builtin_space_path(name))


def world_size(space: ConfigSpace, c: Union[Configuration, Mapping[str, Value]]) -> int:
    """Product of the degrees named by the device-count constraint(s)."""
    values = c.values() if isinstance(c, Configuration) else c
    names: List[str] = []
    for con in space.constraints:
        if con.type == "product_le_devices":
            names.extend(n for n in con.features if n not in names)
    world = 1
    for n in names:
        v = values.get(n, INACTIVE)
        if v is not INACTIVE:
            world *= int(v)
    return world


def device_allocation(space: ConfigSpace, world: int) -> Dict[str, int]:
    """Fill the fastest device class first."""
    alloc = {d.name: 0 for d in space.devices}
    left = world
    for d in sorted(space.devices, key=lambda d: -d.rel_throughput):
        take = min(left, d.count)
        alloc[d.name] = take
        left -= take
    return alloc
