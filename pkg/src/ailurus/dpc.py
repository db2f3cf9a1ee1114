"""Spatially constrained density-peaks clustering of a token grid.

The pipeline is single pass: spatial neighbor lists, local density,
distance to a denser neighbor, top-M center selection by ``rho * delta``,
nearest-center assignment and cluster-mean merging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from ._io import atomic_write_text
from .grid import DpcConfig, NeighborIndex, TokenGrid, spatial_neighbors

__all__ = [
    "DensityScores",
    "ClusterAssignment",
    "ReducedSequence",
    "spatial_weight",
    "neighbors_for",
    "weighted_neighbor_distances",
    "local_density",
    "distance_indicator",
    "density_scores",
    "select_centers",
    "assign_tokens",
    "merge_tokens",
    "cluster",
    "feature_distances",
]


@dataclass(frozen=True, eq=False)
class DensityScores:
    rho: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray

    @classmethod
    def from_parts(cls, rho: np.ndarray, delta: np.ndarray) -> "DensityScores":
        # rho * inf would be nan if rho underflowed to 0
        gamma = np.where(np.isinf(delta), np.inf, rho * np.where(np.isinf(delta), 0.0, delta))
        return cls(rho=rho, delta=delta, gamma=gamma)


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Centers (token indices, rank order), per-token cluster ids and sizes.

    ``fallbacks`` counts tokens that had no center inside their spatial
    neighborhood and were sent to the globally feature-nearest center.
    """

    centers: np.ndarray
    assignment: np.ndarray
    sizes: np.ndarray = field(default=None)
    fallbacks: int = 0

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.int64)
        assignment = np.asarray(self.assignment, dtype=np.int64)
        m, n = len(centers), len(assignment)
        if m == 0:
            raise ValueError("zero centers")
        if assignment.min(initial=0) < 0 or assignment.max(initial=0) >= m:
            raise ValueError("cluster id out of range")
        if len(np.unique(centers)) != m or centers.min() < 0 or centers.max() >= n:
            raise ValueError("centers must be distinct token indices")
        sizes = np.bincount(assignment, minlength=m)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "sizes", sizes)

    @property
    def num_clusters(self) -> int:
        return len(self.centers)

    @property
    def n_tokens(self) -> int:
        return len(self.assignment)

    def __eq__(self, other):
        if not isinstance(other, ClusterAssignment):
            return NotImplemented
        return np.array_equal(self.centers, other.centers) and np.array_equal(
            self.assignment, other.assignment
        )

    def to_text(self) -> str:
        return "\n".join(
            [
                f"{self.num_clusters} {self.n_tokens}",
                " ".join(map(str, self.centers.tolist())),
                " ".join(map(str, self.assignment.tolist())),
            ]
        ) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClusterAssignment":
        lines = text.strip().splitlines()
        if len(lines) != 3:
            raise ValueError("assignment file must have exactly 3 lines")
        m, n = map(int, lines[0].split())
        centers = np.array(lines[1].split(), dtype=np.int64)
        assignment = np.array(lines[2].split(), dtype=np.int64)
        if len(centers) != m or len(assignment) != n:
            raise ValueError(f"header says {m} centers / {n} tokens, found {len(centers)} / {len(assignment)}")
        return cls(centers, assignment)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "ClusterAssignment":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class ReducedSequence:
    reps: np.ndarray
    weights: np.ndarray
    assignment: ClusterAssignment

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights.astype(np.float64))

    def __eq__(self, other):
        if not isinstance(other, ReducedSequence):
            return NotImplemented
        return (
            np.array_equal(self.reps, other.reps)
            and np.array_equal(self.weights, other.weights)
            and self.assignment == other.assignment
        )


def spatial_weight(rank: int | None, lam: int, alpha: float) -> float:
    """Multiplier on feature distance for a neighbor at 1-based spatial ``rank``.

    Ranges over ``((1 - alpha) / lam + alpha, 1]`` inside the neighborhood;
    ``inf`` for tokens outside it (``rank`` is ``None`` or beyond ``lam``).
    """
    if rank is None or rank > lam:
        return math.inf
    return (1.0 - alpha) * rank / lam + alpha


@lru_cache(maxsize=32)
def _cached_neighbors(h: int, w: int, lam: int) -> NeighborIndex:
    return spatial_neighbors(h, w, lam)


def neighbors_for(grid: TokenGrid, cfg: DpcConfig) -> NeighborIndex:
    cfg.check(grid.n_tokens)
    return _cached_neighbors(grid.height, grid.width, cfg.effective_lam(grid.n_tokens))


def weighted_neighbor_distances(grid: TokenGrid, nbr: NeighborIndex, cfg: DpcConfig) -> np.ndarray:
    """``(N, lam)`` matrix of ``sigma(z_i, z_j) * s(i, j)`` over each token's neighbor list."""
    if nbr.size == 0:
        raise ValueError("grid too small")
    lam = cfg.effective_lam(grid.n_tokens)
    return kernels.neighbor_distances(grid.data, nbr.indices, nbr.ranks, lam, cfg.alpha)


def local_density(
    grid: TokenGrid, nbr: NeighborIndex, cfg: DpcConfig, *, wdist: np.ndarray | None = None
) -> np.ndarray:
    if wdist is None:
        wdist = weighted_neighbor_distances(grid, nbr, cfg)
    return kernels.knn_density(wdist, cfg.effective_knn(grid.n_tokens))


def distance_indicator(
    grid: TokenGrid,
    rho: np.ndarray,
    nbr: NeighborIndex,
    cfg: DpcConfig,
    *,
    wdist: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted distance to the nearest denser spatial neighbor (``inf`` if none).

    Among equal densities the lower token index ranks as denser, which makes
    the density order total and collapses runs of identical tokens onto one peak.
    """
    if wdist is None:
        wdist = weighted_neighbor_distances(grid, nbr, cfg)
    return kernels.denser_distance(wdist, nbr.indices, rho)


def density_scores(grid: TokenGrid, cfg: DpcConfig, nbr: NeighborIndex | None = None):
    """Return ``(scores, neighbor index, weighted distances)`` for ``grid``."""
    if nbr is None:
        nbr = neighbors_for(grid, cfg)
    wdist = weighted_neighbor_distances(grid, nbr, cfg)
    rho = local_density(grid, nbr, cfg, wdist=wdist)
    delta = distance_indicator(grid, rho, nbr, cfg, wdist=wdist)
    return DensityScores.from_parts(rho, delta), nbr, wdist


def select_centers(scores: DensityScores, m: int) -> np.ndarray:
    """Indices of the ``m`` highest-``gamma`` tokens, in rank order.

    Infinite gammas rank first (by descending rho, then index); finite ones
    follow by descending gamma, descending rho, ascending index.
    """
    n = len(scores.gamma)
    if m > n:
        raise ValueError(f"cannot select {m} centers from {n} tokens")
    if m < 1:
        raise ValueError("need at least one center")
    inf = np.isinf(scores.gamma)
    finite_key = np.where(inf, 0.0, -scores.gamma)
    order = np.lexsort((np.arange(n), -scores.rho, finite_key, (~inf).astype(np.int8)))
    return order[:m].astype(np.int64)


def feature_distances(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Plain Euclidean distances between tokens ``rows`` and ``cols`` (all pairs)."""
    x64 = np.asarray(x, dtype=np.float64)
    acc = np.zeros((len(rows), len(cols)), dtype=np.float64)
    for d in range(x64.shape[1]):
        diff = x64[rows, d][:, None] - x64[cols, d][None, :]
        acc += diff * diff
    return np.sqrt(acc)


def assign_tokens(
    grid: TokenGrid,
    centers: np.ndarray,
    nbr: NeighborIndex,
    cfg: DpcConfig,
    *,
    wdist: np.ndarray | None = None,
) -> ClusterAssignment:
    centers = np.asarray(centers, dtype=np.int64)
    if len(centers) == 0:
        raise ValueError("zero centers")
    n = grid.n_tokens
    if len(np.unique(centers)) != len(centers) or centers.min() < 0 or centers.max() >= n:
        raise ValueError("centers must be distinct in-range token indices")
    if wdist is None:
        wdist = weighted_neighbor_distances(grid, nbr, cfg)
    cluster_of = np.full(n, -1, dtype=np.int64)
    cluster_of[centers] = np.arange(len(centers))
    assignment = kernels.nearest_center(wdist, nbr.indices, cluster_of)

    orphans = np.flatnonzero(assignment < 0)
    if len(orphans):
        by_index = np.sort(centers)
        dist = feature_distances(grid.data, orphans, by_index)
        # argmin picks the first minimum, i.e. the lowest center token index
        assignment[orphans] = cluster_of[by_index[np.argmin(dist, axis=1)]]
    return ClusterAssignment(centers, assignment, fallbacks=len(orphans))


def merge_tokens(grid: TokenGrid, asg: ClusterAssignment) -> ReducedSequence:
    """Average the members of each cluster; weights are member counts."""
    if asg.n_tokens != grid.n_tokens:
        raise ValueError("assignment does not match grid")
    sums = np.zeros((asg.num_clusters, grid.dim), dtype=np.float64)
    np.add.at(sums, asg.assignment, grid.data.astype(np.float64))
    reps = (sums / asg.sizes[:, None]).astype(np.float32)
    return ReducedSequence(reps=reps, weights=asg.sizes.copy(), assignment=asg)


def cluster(grid: TokenGrid, cfg: DpcConfig, nbr: NeighborIndex | None = None) -> ReducedSequence:
    """Reduce ``grid`` to ``cfg.num_clusters`` representative tokens."""
    scores, nbr, wdist = density_scores(grid, cfg, nbr)
    centers = select_centers(scores, cfg.num_clusters)
    asg = assign_tokens(grid, centers, nbr, cfg, wdist=wdist)
    return merge_tokens(grid, asg)
