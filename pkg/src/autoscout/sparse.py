"""MCTS over sparse structural knobs, one tree per feature ordering, plus the
tournament that picks which ordering to keep."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .space import INACTIVE, ConfigSpace, SpaceError, Value, sparse_key

PARALLEL_DEGREES = ("pp", "tp", "dp", "cp", "ep")


def is_topological(space: ConfigSpace, order: Sequence[str]) -> bool:
    pos = {n: i for i, n in enumerate(order)}
    if sorted(order) != sorted(space.sparse_names):
        return False
    return all(pos[d] < pos[n] for n in order for d in space.dependencies(n) if d in pos)


def topological_repair(space: ConfigSpace, preferred: Sequence[str]) -> List[str]:
    """Stable topological sort: emit the earliest preferred feature whose
    dependencies have all been placed."""
    remaining = list(preferred)
    placed: List[str] = []
    sparse = set(space.sparse_names)
    while remaining:
        for i, n in enumerate(remaining):
            if all(d in placed for d in space.dependencies(n) if d in sparse):
                placed.append(remaining.pop(i))
                break
        else:
            raise SpaceError("sparse dependencies are cyclic")
    return placed


def candidate_orderings(space: ConfigSpace, k: int, rng: np.random.Generator) -> List[List[str]]:
    """Declaration order, its reverse, parallelism degrees first, then seeded
    random shuffles; all repaired to respect activation dependencies."""
    names = space.sparse_names
    seeds = [
        names,
        names[::-1],
        [n for n in names if n in PARALLEL_DEGREES] + [n for n in names if n not in PARALLEL_DEGREES],
    ]
    out: List[List[str]] = []
    seen = set()

    def add(order: Sequence[str]) -> None:
        fixed = topological_repair(space, order)
        if tuple(fixed) not in seen:
            seen.add(tuple(fixed))
            out.append(fixed)

    for s in seeds:
        if len(out) < k:
            add(s)
    attempts = 0
    while len(out) < k:
        perm = [names[i] for i in rng.permutation(len(names))]
        before = len(out)
        add(perm)
        attempts += 1
        if len(out) == before and attempts > 100 * k:
            # fewer distinct orderings than requested
            out.append(list(out[len(out) % max(1, before)]))
    return out[:k]


def load_orderings(path: Path, space: ConfigSpace) -> List[List[str]]:
    orders = json.loads(Path(path).read_text())
    for o in orders:
        if not is_topological(space, o):
            raise SpaceError(f"ordering {o} is not a valid permutation of the sparse features")
    return [list(o) for o in orders]


@dataclass
class MctsNode:
    depth: int
    assignment: Dict[str, Value]
    visits: float = 0.0
    reward: float = 0.0
    children: Dict[str, "MctsNode"] = field(default_factory=dict)
    # indices into space.feasible_sparse compatible with this partial assignment
    compatible: Optional[np.ndarray] = None
    values: Optional[List[Value]] = None

    @property
    def mean(self) -> float:
        return self.reward / self.visits if self.visits else 0.0


_KEYS: Dict[Tuple[type, Any], str] = {}


def _vkey(v: Value) -> str:
    if v is INACTIVE:
        return "null"
    k = (type(v), v)
    s = _KEYS.get(k)
    if s is None:
        s = _KEYS[k] = json.dumps(v)
    return s


class MctsTree:
    """UCT search tree over one ordering of the sparse features.

    Children are restricted to values that keep the partial assignment
    extensible to a feasible structure, so every rollout is feasible.
    """

    def __init__(self, space: ConfigSpace, ordering: Sequence[str], c_uct: float = 1.414,
                 seed: int = 0):
        if not is_topological(space, ordering):
            raise SpaceError(f"ordering {list(ordering)} violates activation dependencies")
        if not space.feasible_sparse:
            raise SpaceError("no feasible structure exists")
        self.space = space
        self.ordering = list(ordering)
        self.c_uct = c_uct
        self.rng = np.random.default_rng(seed)
        self._table = space.feasible_sparse
        self._keys = [{n: _vkey(v) for n, v in row.items()} for row in self._table]
        self.root = MctsNode(0, {}, compatible=np.arange(len(self._table)))
        self._n_nodes = 1

    # -- helpers ----------------------------------------------------------------

    def node_count(self) -> int:
        return self._n_nodes

    def _values_at(self, node: MctsNode) -> List[Value]:
        if node.values is not None:
            return node.values
        name = self.ordering[node.depth]
        seen = {self._keys[i][name] for i in node.compatible}
        # keep domain order for determinism
        dom = self.space.feature(name).domain
        ordered = [v for v in dom if _vkey(v) in seen]
        if "null" in seen:
            ordered.append(INACTIVE)
        node.values = ordered
        return ordered

    def _child(self, node: MctsNode, v: Value) -> MctsNode:
        key = _vkey(v)
        child = node.children.get(key)
        if child is None:
            name = self.ordering[node.depth]
            comp = np.array([i for i in node.compatible if self._keys[i][name] == key], dtype=int)
            assignment = dict(node.assignment)
            assignment[name] = v
            child = MctsNode(node.depth + 1, assignment, compatible=comp)
            node.children[key] = child
            self._n_nodes += 1
        return child

    def uct_score(self, parent: MctsNode, child: MctsNode) -> float:
        if child.visits == 0:
            return math.inf
        return child.mean + self.c_uct * math.sqrt(math.log(parent.visits) / child.visits)

    def random_completion(self, partial: Mapping[str, Value],
                          compatible: Optional[Sequence[int]] = None) -> Dict[str, Value]:
        """Complete ``partial`` feature by feature with uniformly random
        values that keep the assignment feasible."""
        if compatible is not None:
            comp = list(compatible)
        else:
            want = {k: _vkey(v) for k, v in partial.items()}
            comp = [i for i, row in enumerate(self._keys) if all(row[k] == w for k, w in want.items())]
        if not comp:
            raise SpaceError("partial assignment has no feasible extension")
        out = dict(partial)
        for name in self.ordering:
            if name in out:
                continue
            vals: Dict[str, Value] = {}
            for i in comp:
                vals.setdefault(self._keys[i][name], self._table[i][name])
            keys = list(vals)
            pick = keys[int(self.rng.integers(len(keys)))]
            out[name] = vals[pick]
            comp = [i for i in comp if self._keys[i][name] == pick]
        return {n: out[n] for n in self.space.sparse_names}

    # -- public API ---------------------------------------------------------------

    def propose(self, completer: Optional[Callable[[Mapping[str, Value]], Dict[str, Value]]] = None
                ) -> Dict[str, Value]:
        node = self.root
        depth = len(self.ordering)
        while node.depth < depth:
            values = self._values_at(node)
            unvisited = [v for v in values
                         if _vkey(v) not in node.children or node.children[_vkey(v)].visits == 0]
            if unvisited:
                v = unvisited[int(self.rng.integers(len(unvisited)))]
                node = self._child(node, v)
                break
            best, best_score = None, -math.inf
            for v in values:
                score = self.uct_score(node, node.children[_vkey(v)])
                if score > best_score:
                    best, best_score = v, score
            node = node.children[_vkey(best)]
        if completer is None:
            s = self.random_completion(node.assignment, node.compatible)
        else:
            s = completer(node.assignment)
        return {n: s[n] for n in self.space.sparse_names}

    def backpropagate(self, s: Mapping[str, Value], r: float) -> None:
        if not math.isfinite(r):
            raise ValueError("reward must be finite")
        node = self.root
        node.visits += 1
        node.reward += r
        for name in self.ordering:
            node = self._child(node, s[name])
            node.visits += 1
            node.reward += r

    def best_path(self) -> Dict[str, Value]:
        """Greedy descent by mean reward through visited children; falls back
        to a random completion where no child has been visited."""
        node = self.root
        while node.depth < len(self.ordering):
            visited = [c for c in node.children.values() if c.visits > 0]
            if not visited:
                return self.random_completion(node.assignment)
            node = max(visited, key=lambda c: c.mean)
        return {n: node.assignment[n] for n in self.space.sparse_names}

    def leaves(self) -> Dict[str, tuple]:
        """Full assignments stored at depth len(ordering) -> (N, W)."""
        out = {}
        stack = [self.root]
        while stack:
            n = stack.pop()
            if n.depth == len(self.ordering) and n.visits > 0:
                out[sparse_key({k: n.assignment[k] for k in sorted(n.assignment)})] = (n.visits, n.reward)
            stack.extend(n.children.values())
        return out

    def export(self) -> Dict[str, Dict[str, float]]:
        """Node path -> {N, W}, for debugging and state comparisons."""
        out: Dict[str, Dict[str, float]] = {}

        def walk(n: MctsNode, path: str) -> None:
            out[path or "/"] = {"N": n.visits, "W": n.reward}
            for k, c in n.children.items():
                walk(c, f"{path}/{self.ordering[n.depth]}={k}")

        walk(self.root, "")
        return out


@dataclass
class TournamentState:
    trees: List[MctsTree]
    cumulative: List[float] = field(default_factory=list)
    survivors: List[int] = field(default_factory=list)
    round: int = 1
    position: int = 0
    halvings: int = 0
    history: List[List[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.trees:
            raise ValueError("tournament needs at least one tree")
        if not self.cumulative:
            self.cumulative = [0.0] * len(self.trees)
        if not self.survivors:
            self.survivors = list(range(len(self.trees)))

    @property
    def k_initial(self) -> int:
        return len(self.trees)

    @property
    def done(self) -> bool:
        return len(self.survivors) == 1

    @property
    def winner(self) -> MctsTree:
        if not self.done:
            raise RuntimeError("tournament still running")
        return self.trees[self.survivors[0]]

    def round_order(self) -> List[int]:
        order = sorted(self.survivors)
        return order if self.round % 2 == 1 else order[::-1]


def tournament_next(ts: TournamentState) -> int:
    """Index of the tree that proposes next (zigzag across rounds)."""
    if ts.done:
        return ts.survivors[0]
    return ts.round_order()[ts.position]


def tournament_record_and_halve(ts: TournamentState, proposer: int, r: float) -> TournamentState:
    if proposer not in ts.survivors:
        raise ValueError(f"tree {proposer} was already eliminated")
    ts.cumulative[proposer] += r
    if ts.done:
        return ts
    ts.position += 1
    if ts.position >= len(ts.survivors):
        ts.history.append(ts.round_order())
        ranked = sorted(ts.survivors, key=lambda i: (-ts.cumulative[i], i))
        ts.survivors = sorted(ranked[: math.ceil(len(ranked) / 2)])
        ts.halvings += 1
        ts.round += 1
        ts.position = 0
    return ts
