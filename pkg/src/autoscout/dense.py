"""Coordinate-wise grid search over dense knobs with step-doubling momentum."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List

from .space import INACTIVE, ConfigSpace, Mask, Value, project

FRESH, IMPROVED, FAILED = "fresh", "improved", "failed"


@dataclass
class DenseSearchState:
    current: Dict[str, Value]
    coords: List[str]
    active_coord: int = 0
    direction: Dict[str, int] = field(default_factory=dict)
    step: Dict[str, int] = field(default_factory=dict)
    last_outcome: str = FRESH
    flip_used: bool = False
    step_cap: int = 8
    pending: Dict[str, Value] | None = None

    @property
    def coordinate(self) -> str | None:
        return self.coords[self.active_coord] if self.coords else None

    def copy(self) -> "DenseSearchState":
        return replace(
            self,
            current=dict(self.current),
            coords=list(self.coords),
            direction=dict(self.direction),
            step=dict(self.step),
            pending=None if self.pending is None else dict(self.pending),
        )


def init_state(space: ConfigSpace, m: Mask, step_cap: int = 8) -> DenseSearchState:
    current = project(space, space.default_dense(), m)
    coords = list(m.active)
    return DenseSearchState(
        current=current,
        coords=coords,
        direction={c: 1 for c in coords},
        step={c: 1 for c in coords},
        step_cap=step_cap,
    )


def _move(grid, value: Value, direction: int, steps: int) -> Value:
    i = grid.index(value)
    j = min(max(i + direction * steps, 0), len(grid) - 1)
    return grid[j]


def propose(state: DenseSearchState, m: Mask) -> Dict[str, Value]:
    """Move the active coordinate ``step`` grid positions along its direction.

    At a grid boundary the direction is reflected before moving. Mutates the
    state's direction in that case and remembers the proposal for ``update``.
    """
    cand = dict(state.current)
    name = state.coordinate
    if name is None:
        state.pending = cand
        return cand
    grid = m.grid(name)
    value = state.current[name]
    step = state.step[name]
    moved = _move(grid, value, state.direction[name], step)
    if moved == value:
        state.direction[name] = -state.direction[name]
        moved = _move(grid, value, state.direction[name], step)
    cand[name] = moved
    state.pending = dict(cand)
    return cand


def update(state: DenseSearchState, improved: bool, accepted_candidate: Dict[str, Value]) -> DenseSearchState:
    name = state.coordinate
    if name is None:
        state.pending = None
        return state
    if improved:
        state.current = dict(accepted_candidate)
        state.step[name] = min(2 * state.step[name], state.step_cap)
        state.flip_used = False
        state.last_outcome = IMPROVED
    else:
        state.step[name] = 1
        state.last_outcome = FAILED
        if not state.flip_used:
            state.direction[name] = -state.direction[name]
            state.flip_used = True
        else:
            state.active_coord = (state.active_coord + 1) % len(state.coords)
            state.flip_used = False
    state.pending = None
    return state


def reproject(space: ConfigSpace, state: DenseSearchState, m_new: Mask) -> DenseSearchState:
    old_name = state.coordinate
    new_coords = list(m_new.active)
    if new_coords == state.coords and project(space, state.current, m_new) == state.current:
        return state
    current = dict(state.current)
    for c in new_coords:
        if c not in state.coords:
            current[c] = INACTIVE  # enters at its default via project
    state.current = project(space, current, m_new)
    for c in new_coords:
        if c not in state.coords:
            state.direction[c] = 1
            state.step[c] = 1
    for c in state.coords:
        if c not in new_coords:
            state.direction.pop(c, None)
            state.step.pop(c, None)
    state.coords = new_coords
    if old_name in new_coords:
        state.active_coord = new_coords.index(old_name)
    else:
        state.active_coord = 0
        state.flip_used = False
    state.pending = None
    return state
