"""Hot per-token kernels for spatially constrained density peaks.

Each kernel has a numba implementation and a pure-numpy twin with the same
floating-point evaluation order (channel-sequential float64 accumulation),
so both backends return bit-identical results. The public wrappers dispatch
on :data:`ailurus._backend.USE_NUMBA`.
"""

import numpy as np

from . import _backend
from ._backend import njit, prange

__all__ = [
    "neighbor_distances",
    "knn_density",
    "denser_distance",
    "nearest_center",
]


# --------------------------------------------------------------------- numba


@njit(parallel=True, cache=True)
def _neighbor_distances_nb(x, nbr, ranks, lam, alpha):
    n, size = nbr.shape
    dim = x.shape[1]
    out = np.empty((n, size), dtype=np.float64)
    for i in prange(n):
        for r in range(size):
            j = nbr[i, r]
            acc = 0.0
            for d in range(dim):
                diff = np.float64(x[i, d]) - np.float64(x[j, d])
                acc += diff * diff
            weight = (1.0 - alpha) * np.float64(ranks[i, r]) / lam + alpha
            out[i, r] = np.sqrt(acc) * weight
    return out


@njit(parallel=True, cache=True)
def _knn_mean_nb(wdist, k):
    n = wdist.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        row = np.sort(wdist[i])
        acc = 0.0
        for r in range(k):
            acc += row[r]
        out[i] = acc / k
    return out


@njit(parallel=True, cache=True)
def _denser_distance_nb(wdist, nbr, rho):
    n, size = nbr.shape
    delta = np.empty(n, dtype=np.float64)
    for i in prange(n):
        best = np.inf
        for r in range(size):
            j = nbr[i, r]
            if rho[j] > rho[i] or (rho[j] == rho[i] and j < i):
                if wdist[i, r] < best:
                    best = wdist[i, r]
        delta[i] = best
    return delta


@njit(parallel=True, cache=True)
def _nearest_center_nb(wdist, nbr, cluster_of):
    n, size = nbr.shape
    out = np.empty(n, dtype=np.int64)
    for i in prange(n):
        if cluster_of[i] >= 0:
            out[i] = cluster_of[i]
            continue
        best = np.inf
        best_tok = -1
        for r in range(size):
            j = nbr[i, r]
            if cluster_of[j] < 0:
                continue
            d = wdist[i, r]
            if d < best or (d == best and j < best_tok):
                best = d
                best_tok = j
        out[i] = cluster_of[best_tok] if best_tok >= 0 else -1
    return out


# --------------------------------------------------------------------- numpy


def _neighbor_distances_np(x, nbr, ranks, lam, alpha):
    x64 = x.astype(np.float64)
    acc = np.zeros(nbr.shape, dtype=np.float64)
    for d in range(x64.shape[1]):
        col = x64[:, d]
        diff = col[:, None] - col[nbr]
        acc += diff * diff
    weight = (1.0 - alpha) * ranks.astype(np.float64) / lam + alpha
    return np.sqrt(acc) * weight


def _knn_mean_np(wdist, k):
    head = np.sort(wdist, axis=1)[:, :k]
    acc = np.zeros(wdist.shape[0], dtype=np.float64)
    for r in range(k):
        acc += head[:, r]
    return acc / k


def _denser_distance_np(wdist, nbr, rho):
    own = rho[:, None]
    other = rho[nbr]
    idx = np.arange(nbr.shape[0])[:, None]
    denser = (other > own) | ((other == own) & (nbr < idx))
    return np.where(denser, wdist, np.inf).min(axis=1, initial=np.inf)


def _nearest_center_np(wdist, nbr, cluster_of):
    n = nbr.shape[0]
    is_center = cluster_of[nbr] >= 0
    masked = np.where(is_center, wdist, np.inf)
    best = masked.min(axis=1, initial=np.inf)
    hit = is_center & (masked == best[:, None])
    tok = np.where(hit, nbr, np.iinfo(np.int64).max).min(axis=1)
    out = np.full(n, -1, dtype=np.int64)
    found = hit.any(axis=1)
    out[found] = cluster_of[tok[found]]
    own = cluster_of >= 0
    out[own] = cluster_of[own]
    return out


# ------------------------------------------------------------------ dispatch


def neighbor_distances(x, nbr, ranks, lam, alpha):
    """Weighted feature distance ``||x_i - x_j|| * s(rank)`` for every listed neighbor."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    ranks = np.ascontiguousarray(ranks, dtype=np.int64)
    fn = _neighbor_distances_nb if _backend.USE_NUMBA else _neighbor_distances_np
    return fn(x, nbr, ranks, float(lam), float(alpha))


def knn_density(wdist, k):
    """``exp(-mean of the k smallest entries)`` per row."""
    wdist = np.ascontiguousarray(wdist, dtype=np.float64)
    fn = _knn_mean_nb if _backend.USE_NUMBA else _knn_mean_np
    # exp stays outside the kernels: numpy and libm exp can differ in the last ulp
    return np.exp(-fn(wdist, int(k)))


def denser_distance(wdist, nbr, rho):
    """Smallest weighted distance to a denser listed neighbor, ``inf`` if none.

    Density ties are ordered by token index: a lower-index token of equal
    density counts as denser.
    """
    fn = _denser_distance_nb if _backend.USE_NUMBA else _denser_distance_np
    return fn(
        np.ascontiguousarray(wdist, dtype=np.float64),
        np.ascontiguousarray(nbr, dtype=np.int64),
        np.ascontiguousarray(rho, dtype=np.float64),
    )


def nearest_center(wdist, nbr, cluster_of):
    """Cluster id of the weighted-nearest listed center; ``-1`` when none is listed.

    ``cluster_of[t]`` is the cluster id of token ``t`` if it is a center, else
    ``-1``. Equal distances go to the lower center token index.
    """
    fn = _nearest_center_nb if _backend.USE_NUMBA else _nearest_center_np
    return fn(
        np.ascontiguousarray(wdist, dtype=np.float64),
        np.ascontiguousarray(nbr, dtype=np.int64),
        np.ascontiguousarray(cluster_of, dtype=np.int64),
    )
