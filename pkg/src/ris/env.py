"""Point-mass maze navigation with sparse -1/0 rewards.

States and goals are both (x, y) positions. Walls are closed axis-aligned
rectangles; the outer box is the maze bounds. Motion is resolved one axis at
a time so the agent slides along walls instead of sticking to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidMazeError

STATE_DIM = 2
ACTION_DIM = 2
MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    def contains(self, px, py):
        return (px >= self.x) & (px <= self.x + self.w) & (py >= self.y) & (py <= self.y + self.h)


@dataclass(frozen=True)
class MazeSpec:
    bounds: tuple
    walls: tuple = ()
    success_radius: float = 0.5
    max_step: float = 0.75
    episode_limit: int = 100
    name: str = "custom"
    # (start, goal) of the hardest evaluation task, if the layout defines one
    hardest: tuple = field(default=None, compare=False)

    def __post_init__(self):
        w, h = self.bounds
        if w <= 0 or h <= 0:
            raise ConfigurationError(f"bounds must be positive, got {self.bounds}")
        if self.success_radius <= 0:
            raise ConfigurationError("success_radius must be > 0")
        if self.max_step <= 0 or self.episode_limit < 1:
            raise ConfigurationError("max_step and episode_limit must be positive")
        for r in self.walls:
            if r.w <= 0 or r.h <= 0 or r.x < 0 or r.y < 0 or r.x + r.w > w or r.y + r.h > h:
                raise ConfigurationError(f"wall {r} does not lie within bounds {self.bounds}")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(*self.bounds))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * np.asarray(self.bounds, dtype=float)

    def in_wall(self, pos) -> np.ndarray:
        """Vectorised wall test over the trailing (x, y) axis."""
        pos = np.asarray(pos, dtype=float)
        hit = np.zeros(pos.shape[:-1], dtype=bool)
        for r in self.walls:
            hit |= r.contains(pos[..., 0], pos[..., 1])
        return hit

    def in_bounds(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        w, h = self.bounds
        return (pos[..., 0] >= 0) & (pos[..., 0] <= w) & (pos[..., 1] >= 0) & (pos[..., 1] <= h)

    def is_free(self, pos) -> np.ndarray:
        return self.in_bounds(pos) & ~self.in_wall(pos)


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    goal: np.ndarray
    steps_elapsed: int = 0


def make_maze(kind: str) -> MazeSpec:
    """Named layouts: ``u`` (7.5 x 18), ``s`` (12 x 12), ``corridor`` (12 x 3)."""
    kind = kind.lower()
    if kind == "u":
        # one 1.5-thick wall splits the box into two 3-wide arms joined at the top
        return MazeSpec(
            bounds=(7.5, 18.0),
            walls=(Rect(3.0, 0.0, 1.5, 13.5),),
            name="u",
            hardest=((1.5, 1.5), (6.0, 1.5)),
        )
    if kind == "s":
        return MazeSpec(
            bounds=(12.0, 12.0),
            walls=(Rect(0.0, 3.0, 9.0, 1.5), Rect(3.0, 7.5, 9.0, 1.5)),
            name="s",
            hardest=((1.5, 1.5), (10.5, 10.5)),
        )
    if kind == "corridor":
        return MazeSpec(bounds=(12.0, 3.0), name="corridor", hardest=((0.75, 1.5), (11.25, 1.5)))
    raise ConfigurationError(f"unknown maze kind {kind!r} (expected u, s or corridor)")


def maze_from_rects(bounds: Sequence[float], rects: Sequence[Sequence[float]], **kw) -> MazeSpec:
    return MazeSpec(bounds=tuple(float(b) for b in bounds), walls=tuple(Rect(*map(float, r)) for r in rects), **kw)


def sample_free(spec: MazeSpec, rng: np.random.Generator, lo=None, hi=None) -> np.ndarray:
    """Uniform point in free space (optionally within the box [lo, hi])."""
    lo = np.zeros(2) if lo is None else np.maximum(np.asarray(lo, float), 0.0)
    hi = np.asarray(spec.bounds, float) if hi is None else np.minimum(np.asarray(hi, float), spec.bounds)
    for _ in range(MAX_REJECTIONS):
        p = rng.uniform(lo, hi)
        if not spec.in_wall(p):
            return p
    raise InvalidMazeError(f"no free point found after {MAX_REJECTIONS} draws in {spec.name!r}")


def reset(spec: MazeSpec, rng: np.random.Generator) -> EnvState:
    return EnvState(position=sample_free(spec, rng), goal=sample_free(spec, rng), steps_elapsed=0)


def reset_hardest(spec: MazeSpec, rng: np.random.Generator, jitter: float = 0.5) -> EnvState:
    """Start and goal drawn uniformly within +-jitter of the layout's hardest pair."""
    if spec.hardest is None:
        raise ConfigurationError(f"maze {spec.name!r} has no hardest configuration")
    start, goal = (np.asarray(p, float) for p in spec.hardest)
    if jitter <= 0:
        return EnvState(position=start.copy(), goal=goal.copy())
    return EnvState(
        position=sample_free(spec, rng, start - jitter, start + jitter),
        goal=sample_free(spec, rng, goal - jitter, goal + jitter),
    )


def success(position, goal, spec: MazeSpec):
    d = np.linalg.norm(np.asarray(position, float) - np.asarray(goal, float), axis=-1)
    return d <= spec.success_radius


def _move_axis(spec: MazeSpec, pos: np.ndarray, axis: int, delta: float) -> np.ndarray:
    cand = pos.copy()
    cand[axis] = np.clip(cand[axis] + delta, 0.0, spec.bounds[axis])
    return pos if spec.in_wall(cand) else cand


def step(spec: MazeSpec, state: EnvState, action) -> tuple:
    """Advance one step. Returns ``(next_state, reward, done)``."""
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0) * spec.max_step
    pos = np.asarray(state.position, dtype=float)
    pos = _move_axis(spec, pos, 0, a[0])
    pos = _move_axis(spec, pos, 1, a[1])
    nxt = replace(state, position=pos, steps_elapsed=state.steps_elapsed + 1)
    if bool(success(pos, state.goal, spec)):
        return nxt, 0.0, True
    return nxt, -1.0, nxt.steps_elapsed >= spec.episode_limit
