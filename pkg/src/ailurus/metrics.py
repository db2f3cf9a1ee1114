"""Reference oracles and reconstruction diagnostics.

``brute_force_dpc`` re-derives the clustering from full ``N x N`` matrices
without sharing code with :mod:`ailurus.dpc`; ``kmeans_baseline`` is the
feature-space K-means reducer used as the comparison method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .dpc import ClusterAssignment, ReducedSequence
from .grid import DpcConfig, TokenGrid

__all__ = [
    "BRUTE_FORCE_LIMIT",
    "SimilarityReport",
    "PreservationReport",
    "AssignmentStats",
    "brute_force_dpc",
    "brute_force_merge",
    "kmeans_baseline",
    "kmeans_objective",
    "reconstruction_similarity",
    "pairwise_similarity_preservation",
    "assignment_stats",
]

BRUTE_FORCE_LIMIT = 4096


def brute_force_dpc(grid: TokenGrid, cfg: DpcConfig) -> ClusterAssignment:
    """Direct O(N^2) evaluation of density, distance indicator, selection and assignment."""
    n = grid.n_tokens
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_LIMIT} tokens, got {n}")
    if n < 2:
        raise ValueError("grid too small")
    m = cfg.num_clusters
    if m > n:
        raise ValueError(f"cannot select {m} centers from {n} tokens")
    lam = min(cfg.lam, n - 1)
    k = min(cfg.knn, lam)
    alpha = cfg.alpha

    # spatial rank of every j as seen from i (0 on the diagonal)
    r, c = np.divmod(np.arange(n), grid.width)
    d2 = (r[:, None] - r[None, :]) ** 2 + (c[:, None] - c[None, :]) ** 2
    rank = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((np.arange(n), d2[i]))
        assert order[0] == i
        rank[i, order[1:]] = np.arange(1, n)

    x = grid.data.astype(np.float64)
    sq = np.zeros((n, n))
    for d in range(grid.dim):
        diff = x[:, d][:, None] - x[:, d][None, :]
        sq += diff * diff
    sigma = np.sqrt(sq)

    inside = (rank >= 1) & (rank <= lam)
    s = np.full((n, n), math.inf)
    s[inside] = (1.0 - alpha) * rank[inside].astype(np.float64) / lam + alpha
    weighted = np.full((n, n), math.inf)
    weighted[inside] = sigma[inside] * s[inside]

    mean_knn = np.empty(n)
    for i in range(n):
        nearest = sorted(weighted[i, j] for j in range(n) if j != i)[:k]
        total = 0.0
        for v in nearest:
            total += v
        mean_knn[i] = total / k
    rho = np.exp(-mean_knn)

    delta = np.full(n, math.inf)
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            if rho[j] > rho[i] or (rho[j] == rho[i] and j < i):
                delta[i] = min(delta[i], weighted[i, j])

    def rank_key(i):
        if math.isinf(delta[i]):
            return (0, 0.0, -rho[i], i)
        return (1, -(rho[i] * delta[i]), -rho[i], i)

    centers = sorted(range(n), key=rank_key)[:m]
    cid = {t: q for q, t in enumerate(centers)}

    assignment = np.empty(n, dtype=np.int64)
    fallbacks = 0
    for i in range(n):
        if i in cid:
            assignment[i] = cid[i]
            continue
        near = [(weighted[i, t], t) for t in centers if inside[i, t]]
        if near:
            assignment[i] = cid[min(near)[1]]
        else:
            fallbacks += 1
            assignment[i] = cid[min((sigma[i, t], t) for t in centers)[1]]
    return ClusterAssignment(np.array(centers), assignment, fallbacks=fallbacks)


def brute_force_merge(grid: TokenGrid, asg: ClusterAssignment) -> ReducedSequence:
    """Cluster means by an explicit per-cluster loop (float64 sums, float32 result)."""
    x = grid.data.astype(np.float64)
    reps = np.empty((asg.num_clusters, grid.dim), dtype=np.float32)
    for q in range(asg.num_clusters):
        acc = np.zeros(grid.dim)
        count = 0
        for t in np.flatnonzero(asg.assignment == q):
            acc = acc + x[t]
            count += 1
        reps[q] = (acc / count).astype(np.float32)
    return ReducedSequence(reps, asg.sizes.copy(), asg)


def _farthest_point_seeds(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    mind = cdist(x, x[chosen[-1:]], "sqeuclidean")[:, 0]
    mind[chosen[-1]] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, cdist(x, x[nxt : nxt + 1], "sqeuclidean")[:, 0])
        mind[chosen] = -1.0
    return np.array(chosen)


def kmeans_baseline(grid: TokenGrid, m: int, iters: int = 10, seed: int = 0) -> ReducedSequence:
    """Lloyd's K-means in feature space with farthest-point seeding.

    Empty clusters are refilled with the token farthest from its current
    centroid (taken from a cluster that keeps at least one member). The
    returned ``centers`` are the members closest to each centroid.
    """
    n = grid.n_tokens
    if not 1 <= m <= n:
        raise ValueError(f"cannot form {m} clusters from {n} tokens")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = grid.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = x[_farthest_point_seeds(x, m, rng)]

    for _ in range(iters):
        dist = cdist(x, centroids, "sqeuclidean")
        labels = np.argmin(dist, axis=1)
        counts = np.bincount(labels, minlength=m)
        for q in np.flatnonzero(counts == 0):
            own = dist[np.arange(n), labels]
            movable = counts[labels] > 1
            t = int(np.argmax(np.where(movable, own, -1.0)))
            counts[labels[t]] -= 1
            labels[t] = q
            counts[q] = 1
            dist[t] = 0.0  # never pick t twice
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        centroids = sums / counts[:, None]

    reps = centroids.astype(np.float32)
    own = cdist(x, centroids, "sqeuclidean")[np.arange(n), labels]
    centers = np.empty(m, dtype=np.int64)
    for q in range(m):
        members = np.flatnonzero(labels == q)
        centers[q] = members[np.argmin(own[members])]
    asg = ClusterAssignment(centers, labels)
    return ReducedSequence(reps, asg.sizes.copy(), asg)


def kmeans_objective(grid: TokenGrid, reduced: ReducedSequence) -> float:
    """Sum of squared distances from tokens to their representative."""
    x = grid.data.astype(np.float64)
    diff = x - reduced.reps.astype(np.float64)[reduced.assignment.assignment]
    return float((diff * diff).sum())


@dataclass
class SimilarityReport:
    mean: float
    per_token: np.ndarray = field(repr=False)
    per_layer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_cosine": self.mean, "per_layer": list(self.per_layer)}


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    out = np.zeros(len(a))
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def reconstruction_similarity(reference: TokenGrid, reconstructed: TokenGrid) -> SimilarityReport:
    """Mean per-token cosine similarity; a zero vector scores 0."""
    if (reference.height, reference.width, reference.dim) != (
        reconstructed.height, reconstructed.width, reconstructed.dim
    ):
        raise ValueError("grids differ in shape")
    cos = _cosine_rows(reference.data, reconstructed.data)
    return SimilarityReport(mean=float(cos.mean()), per_token=cos)


@dataclass
class PreservationReport:
    """Per-interval retention probability (NaN where an interval is empty)."""

    edges: np.ndarray
    probability: np.ndarray
    counts: np.ndarray
    kept: np.ndarray
    pairs: int

    def to_dict(self) -> dict:
        rows = []
        for b in range(len(self.counts)):
            p = self.probability[b]
            rows.append({
                "interval": [float(self.edges[b]), float(self.edges[b + 1])],
                "pairs": int(self.counts[b]),
                "probability": None if np.isnan(p) else float(p),
            })
        return {"pairs": self.pairs, "intervals": rows}


def _interval(cos: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor(np.clip(cos, -1.0, 1.0) * bins).astype(np.int64)
    idx = np.minimum(idx, bins - 1)
    idx[cos < 0] = -1
    return idx


def pairwise_similarity_preservation(
    inputs,
    outputs,
    *,
    bins: int = 10,
    seed: int = 0,
    exhaustive_limit: int = 1024,
    sample_pairs: int = 1_000_000,
) -> PreservationReport:
    """Chance that a token pair's cosine similarity stays in its interval.

    Pairs are binned by input-side similarity into ``bins`` equal intervals
    of ``[0, 1]`` (pairs with negative input similarity are skipped); a pair
    is retained when its output-side similarity lands in the same interval.
    All pairs are used up to ``exhaustive_limit`` tokens, otherwise
    ``sample_pairs`` seeded random pairs.
    """
    a = np.asarray(getattr(inputs, "data", inputs), dtype=np.float64)
    b = np.asarray(getattr(outputs, "data", outputs), dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValueError("input and output token counts differ")
    n = a.shape[0]
    if n < 2:
        raise ValueError("need at least 2 tokens")
    if n <= exhaustive_limit:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, sample_pairs)
        j = (i + rng.integers(1, n, sample_pairs)) % n
    bin_in = _interval(_cosine_rows(a[i], a[j]), bins)
    bin_out = _interval(_cosine_rows(b[i], b[j]), bins)
    valid = bin_in >= 0
    counts = np.bincount(bin_in[valid], minlength=bins)
    kept = np.bincount(bin_in[valid & (bin_in == bin_out)], minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = np.where(counts > 0, kept / np.maximum(counts, 1), np.nan)
    return PreservationReport(np.linspace(0.0, 1.0, bins + 1), prob, counts, kept, int(valid.sum()))


@dataclass
class AssignmentStats:
    """Cluster-size histogram: ``count[x]`` clusters hold exactly ``x`` tokens."""

    sizes: np.ndarray
    count: np.ndarray
    fraction: np.ndarray
    n_tokens: int

    @property
    def singleton_fraction(self) -> float:
        hit = self.sizes == 1
        return float(self.fraction[hit][0]) if hit.any() else 0.0

    @property
    def modal_size(self) -> int:
        return int(self.sizes[np.argmax(self.count)])

    def rows(self) -> list[tuple[int, float, int]]:
        return [(int(x), float(f), int(c)) for x, f, c in zip(self.sizes, self.fraction, self.count)]

    def to_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "num_clusters": int(self.count.sum()),
            "singleton_fraction": self.singleton_fraction,
            "histogram": [{"x": x, "y1": f, "y2": c} for x, f, c in self.rows()],
        }


def assignment_stats(asg: ClusterAssignment) -> AssignmentStats:
    sizes, count = np.unique(asg.sizes, return_counts=True)
    return AssignmentStats(sizes=sizes, count=count, fraction=count / count.sum(), n_tokens=asg.n_tokens)
