"""Ground truth on a grid discretisation of a maze.

Cells are squares of side ``1/resolution``; a cell is free when its centre
is outside every wall. Paths move between 8-connected free cells (straight
cost 1, diagonal sqrt(2), no corner cutting) and distances are reported in
maze units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .env import MazeSpec, sample_free
from .errors import UsageError

DEFAULT_RESOLUTION = 4
_TIE = 1e-9


class Grid:
    """Free-cell graph of a maze at a fixed resolution."""

    def __init__(self, spec: MazeSpec, resolution: int = DEFAULT_RESOLUTION):
        self.spec = spec
        self.resolution = resolution
        self.nx = int(round(spec.bounds[0] * resolution))
        self.ny = int(round(spec.bounds[1] * resolution))
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        self.centers = np.stack([(ix + 0.5) / resolution, (iy + 0.5) / resolution], axis=-1)
        self.free = ~spec.in_wall(self.centers)
        self.node_of = np.full((self.nx, self.ny), -1, dtype=np.int64)
        self.cells = np.argwhere(self.free)
        self.node_of[self.free] = np.arange(len(self.cells))
        self.node_centers = self.centers[self.free]
        self.graph = self._build_graph()
        self._all_pairs = None

    def _build_graph(self):
        rows, cols, w = [], [], []
        f = self.free
        for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
            cost = math.sqrt(2.0) if dx and dy else 1.0
            xs = slice(0, self.nx - dx)
            xd = slice(dx, self.nx)
            ys = slice(max(0, -dy), self.ny - max(0, dy))
            yd = slice(max(0, dy), self.ny - max(0, -dy))
            ok = f[xs, ys] & f[xd, yd]
            if dx and dy:
                # both orthogonal neighbours must be free
                ok &= f[xd, ys] & f[xs, yd]
            a = self.node_of[xs, ys][ok]
            b = self.node_of[xd, yd][ok]
            rows += [a, b]
            cols += [b, a]
            w += [np.full(len(a), cost)] * 2
        n = len(self.cells)
        return coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()

    def node(self, pos) -> int:
        """Graph node containing ``pos``; snaps to the nearest free cell on wall-boundary cells."""
        pos = np.asarray(pos, dtype=float)
        if not self.spec.is_free(pos):
            raise UsageError(f"position {pos.tolist()} is inside a wall or out of bounds")
        i = min(int(pos[0] * self.resolution), self.nx - 1)
        j = min(int(pos[1] * self.resolution), self.ny - 1)
        n = self.node_of[i, j]
        if n >= 0:
            return int(n)
        return int(np.argmin(np.linalg.norm(self.node_centers - pos, axis=1)))

    def nodes(self, positions) -> np.ndarray:
        return np.array([self.node(p) for p in np.asarray(positions, float).reshape(-1, 2)])

    def nearest_nodes(self, positions) -> np.ndarray:
        """Vectorised lookup that snaps any point (even in a wall) to the nearest free cell."""
        pos = np.asarray(positions, float).reshape(-1, 2)
        i = np.clip((pos[:, 0] * self.resolution).astype(np.int64), 0, self.nx - 1)
        j = np.clip((pos[:, 1] * self.resolution).astype(np.int64), 0, self.ny - 1)
        out = self.node_of[i, j]
        for k in np.flatnonzero(out < 0):
            out[k] = np.argmin(np.linalg.norm(self.node_centers - pos[k], axis=1))
        return out

    def distances_from(self, node: int) -> np.ndarray:
        return dijkstra(self.graph, indices=node) / self.resolution

    def all_pairs(self) -> np.ndarray:
        if self._all_pairs is None:
            self._all_pairs = dijkstra(self.graph) / self.resolution
        return self._all_pairs


@lru_cache(maxsize=16)
def grid_for(spec: MazeSpec, resolution: int = DEFAULT_RESOLUTION) -> Grid:
    return Grid(spec, resolution)


@dataclass
class DistanceField:
    resolution: int
    source: tuple
    # (nx, ny) shortest-path distances in units; inf in walls and unreachable cells
    distance: np.ndarray

    def at(self, pos) -> float:
        i = min(int(pos[0] * self.resolution), self.distance.shape[0] - 1)
        j = min(int(pos[1] * self.resolution), self.distance.shape[1] - 1)
        return float(self.distance[i, j])


def build_distance_field(spec: MazeSpec, source, resolution: int = DEFAULT_RESOLUTION) -> DistanceField:
    grid = grid_for(spec, resolution)
    node = grid.node(source)
    field = np.full((grid.nx, grid.ny), np.inf)
    field[grid.free] = grid.distances_from(node)
    return DistanceField(resolution, tuple(int(v) for v in grid.cells[node]), field)


def steps_for_distance(distance, max_step: float):
    return np.ceil(np.asarray(distance, float) / max_step - 1e-12).astype(int)


def optimal_value(d, gamma: float):
    """Discounted return of reaching the goal in exactly ``d`` steps of reward -1."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise UsageError("step count must be nonnegative")
    out = -(1.0 - gamma**d) / (1.0 - gamma)
    return float(out) if out.ndim == 0 else out


@dataclass
class Midpoints:
    cells: np.ndarray  # (k, 2) grid indices of all minimisers
    centers: np.ndarray  # (k, 2) their positions in units
    cost: float  # max(d(s, c), d(c, g)) at the minimisers


def _midpoint_nodes(ds: np.ndarray, dg: np.ndarray) -> tuple:
    cost = np.maximum(ds, dg)
    best = cost.min()
    if not np.isfinite(best):
        raise UsageError("start and goal are not connected")
    return np.flatnonzero(cost <= best + _TIE), float(best)


def bruteforce_midpoint(spec: MazeSpec, s, g, resolution: int = DEFAULT_RESOLUTION) -> Midpoints:
    """All free cells minimising the longer of the two shortest-path legs."""
    grid = grid_for(spec, resolution)
    ds = grid.distances_from(grid.node(s))
    dg = grid.distances_from(grid.node(g))
    nodes, cost = _midpoint_nodes(ds, dg)
    return Midpoints(grid.cells[nodes], grid.node_centers[nodes], cost)


class MidpointTable:
    """Batched midpoint lookup backed by the all-pairs distance matrix."""

    def __init__(self, spec: MazeSpec, resolution: int = DEFAULT_RESOLUTION):
        self.grid = grid_for(spec, resolution)
        self.dist = self.grid.all_pairs()

    def midpoint(self, s, g) -> np.ndarray:
        """One representative midpoint per (s, g) row; points off the free grid snap to it.

        Among tied minimisers, prefer the one on a shortest path
        (smallest d(s,c) + d(c,g)), then the lowest cell index.
        """
        ns, ng = self.grid.nearest_nodes(s), self.grid.nearest_nodes(g)
        ds, dg = self.dist[ns], self.dist[ng]
        cost = np.maximum(ds, dg)
        best = cost.min(axis=1, keepdims=True)
        if not np.all(np.isfinite(best)):
            raise UsageError("start and goal are not connected")
        total = np.where(cost <= best + _TIE, ds + dg, np.inf)
        return self.grid.node_centers[np.argmin(total, axis=1)]


class SubgoalOracle:
    """Precomputed midpoint sets for a fixed list of (s, g) pairs."""

    def __init__(self, spec: MazeSpec, starts, goals, resolution: int = DEFAULT_RESOLUTION):
        self.spec = spec
        self.starts = np.asarray(starts, float)
        self.goals = np.asarray(goals, float)
        self.midpoints = [bruteforce_midpoint(spec, s, g, resolution).centers for s, g in zip(self.starts, self.goals)]

    def error(self, predicted) -> float:
        """Mean distance from each prediction to the nearest oracle midpoint."""
        predicted = np.asarray(predicted, float)
        return float(np.mean([np.linalg.norm(m - p[:2], axis=1).min() for m, p in zip(self.midpoints, predicted)]))

    def uniform_baseline(self, rng: np.random.Generator, draws: int = 200) -> float:
        """Monte-Carlo error of predictions drawn uniformly from free space."""
        errs = []
        for m in self.midpoints:
            pts = np.array([sample_free(self.spec, rng) for _ in range(draws)])
            errs.append(np.linalg.norm(pts[:, None, :] - m[None], axis=-1).min(axis=1).mean())
        return float(np.mean(errs))


def sample_pairs(spec: MazeSpec, n: int, rng: np.random.Generator) -> tuple:
    starts = np.array([sample_free(spec, rng) for _ in range(n)])
    goals = np.array([sample_free(spec, rng) for _ in range(n)])
    return starts, goals


def subgoal_error(highlevel, starts, goals, spec: MazeSpec, oracle: SubgoalOracle = None) -> float:
    """Mean distance from the high-level policy's mean subgoal to the nearest oracle midpoint.

    ``highlevel`` is anything with ``mean_subgoal(s, g)`` or a plain callable.
    """
    oracle = oracle or SubgoalOracle(spec, starts, goals)
    predict = getattr(highlevel, "mean_subgoal", highlevel)
    return oracle.error(predict(np.asarray(starts, float), np.asarray(goals, float)))
