"""Token grids: data model, file format, synthetic generators and spatial neighbors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

__all__ = [
    "GridFormatError",
    "TokenGrid",
    "NeighborIndex",
    "DpcConfig",
    "spatial_neighbors",
    "synth_grid",
    "load_grid",
    "save_grid",
]


class GridFormatError(ValueError):
    """Raised for malformed grid files or invalid grid contents."""


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """An ``height x width`` grid of ``dim``-dimensional float32 tokens.

    ``data`` is stored token-major with shape ``(height * width, dim)``; token
    ``i`` sits at row ``i // width``, column ``i % width``.
    """

    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GridFormatError(f"invalid dimensions: {self.height}x{self.width}")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data.reshape(-1, data.shape[-1])
        if data.ndim != 2 or data.shape[0] != self.height * self.width or data.shape[1] < 1:
            raise GridFormatError(
                f"invalid dimensions: data shape {self.data.shape} for {self.height}x{self.width} grid"
            )
        if not np.isfinite(data).all():
            raise GridFormatError("non-finite values in grid")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    def as_image(self) -> np.ndarray:
        """View as ``(height, width, dim)``."""
        return self.data.reshape(self.height, self.width, self.dim)

    def with_data(self, data: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.height, self.width, data)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """Per-token spatial neighbor lists.

    ``indices[i]`` lists the ``min(lam, N - 1)`` tokens closest to ``i`` in
    grid space, ordered by Euclidean distance and then row-major index.
    ``ranks`` holds the matching 1-based spatial ranks.
    """

    lam: int
    indices: np.ndarray
    ranks: np.ndarray

    @property
    def size(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class DpcConfig:
    """Clustering hyperparameters.

    Defaults follow the best ablation setting (alpha=0.9, lambda=50, k=1).
    """

    num_clusters: int
    alpha: float = 0.9
    lam: int = 50
    knn: int = 1
    merge_layer: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.lam < 1:
            raise ValueError(f"lambda must be >= 1, got {self.lam}")
        if self.knn < 1:
            raise ValueError(f"knn must be >= 1, got {self.knn}")
        if self.knn > self.lam:
            raise ValueError(f"knn ({self.knn}) must not exceed lambda ({self.lam})")
        if self.num_clusters < 1:
            raise ValueError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.merge_layer < 0:
            raise ValueError(f"merge_layer must be >= 0, got {self.merge_layer}")

    def effective_lam(self, n_tokens: int) -> int:
        """Neighborhood size actually usable on an ``n_tokens`` grid."""
        return min(self.lam, n_tokens - 1)

    def effective_knn(self, n_tokens: int) -> int:
        return min(self.knn, self.effective_lam(n_tokens))

    def check(self, n_tokens: int) -> None:
        if n_tokens < 2:
            raise ValueError("grid too small")
        if self.num_clusters > n_tokens:
            raise ValueError(f"num_clusters ({self.num_clusters}) exceeds token count ({n_tokens})")


def spatial_neighbors(h: int, w: int, lam: int, *, chunk: int = 512) -> NeighborIndex:
    """Rank every token's spatial neighbors on an ``h x w`` grid."""
    n = h * w
    if n < 2:
        raise ValueError("grid too small")
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    size = min(lam, n - 1)
    rows, cols = np.divmod(np.arange(n, dtype=np.int64), w)
    out = np.empty((n, size), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = (rows[start:stop, None] - rows[None, :]) ** 2 + (cols[start:stop, None] - cols[None, :]) ** 2
        # stable sort keeps ascending index among equal distances; self (d2 == 0) comes first
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, 1 : size + 1]
    ranks = np.broadcast_to(np.arange(1, size + 1, dtype=np.int64), (n, size)).copy()
    out.setflags(write=False)
    ranks.setflags(write=False)
    return NeighborIndex(lam=lam, indices=out, ranks=ranks)


def _tile_shape(h: int, w: int, blocks: int) -> tuple[int, int]:
    best = None
    for gr in range(1, blocks + 1):
        if blocks % gr:
            continue
        gc = blocks // gr
        if h % gr or w % gc:
            continue
        skew = abs(h / gr - w / gc)
        if best is None or skew < best[0]:
            best = (skew, gr, gc)
    if best is None:
        raise ValueError(f"{blocks} blocks do not tile a {h}x{w} grid")
    return best[1], best[2]


def synth_grid(
    kind: str,
    h: int,
    w: int,
    dim: int,
    *,
    seed: int = 0,
    blocks: int = 4,
    noise: float = 0.0,
    tiles: tuple[int, int] | None = None,
) -> TokenGrid:
    """Deterministic synthetic grid.

    Args:
        kind: ``"blocks"`` (``blocks`` rectangular tiles of one standard-normal
            prototype each, plus ``noise``-scaled Gaussian jitter per token),
            ``"gradient"`` (linear blend of two random vectors across columns)
            or ``"random"`` (i.i.d. standard normal).
        tiles: explicit ``(tile_rows, tile_cols)`` layout for ``blocks``;
            otherwise the most square factorisation of ``blocks`` is used.
    """
    if h < 1 or w < 1 or dim < 1:
        raise ValueError(f"invalid dimensions: {h}x{w}x{dim}")
    rng = np.random.default_rng(seed)
    if kind == "blocks":
        if tiles is None:
            gr, gc = _tile_shape(h, w, blocks)
        else:
            gr, gc = tiles
            if gr * gc != blocks or h % gr or w % gc:
                raise ValueError(f"tiles {tiles} do not tile a {h}x{w} grid into {blocks} blocks")
        protos = rng.standard_normal((blocks, dim))
        r, c = np.divmod(np.arange(h * w), w)
        block_id = (r // (h // gr)) * gc + c // (w // gc)
        data = protos[block_id]
        if noise:
            data = data + noise * rng.standard_normal(data.shape)
    elif kind == "gradient":
        a, b = rng.standard_normal((2, dim))
        t = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
        row = a[None, :] + t[:, None] * (b - a)[None, :]
        data = np.tile(row, (h, 1))
    elif kind == "random":
        data = rng.standard_normal((h * w, dim))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return TokenGrid(h, w, data.astype(np.float32))


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_grid(grid: TokenGrid, path) -> None:
    """Write ``NAME.json`` + ``NAME.bin`` (little-endian float32, token-major)."""
    header, payload = _paths(path)
    meta = {"height": grid.height, "width": grid.width, "dim": grid.dim, "dtype": "f32le"}
    atomic_write_bytes(payload, grid.data.astype("<f4").tobytes())
    atomic_write_text(header, json.dumps(meta) + "\n")


def load_grid(path) -> TokenGrid:
    header, payload = _paths(path)
    meta = json.loads(header.read_text())
    try:
        h, w, d = int(meta["height"]), int(meta["width"]), int(meta["dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"bad grid header {header}: {exc}") from None
    if meta.get("dtype", "f32le") != "f32le":
        raise GridFormatError(f"unsupported dtype {meta['dtype']!r}")
    if h < 1 or w < 1 or d < 1:
        raise GridFormatError(f"invalid dimensions: {h}x{w}x{d}")
    raw = payload.read_bytes()
    expected = h * w * d * 4
    if len(raw) < expected:
        raise GridFormatError(f"truncated payload: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise GridFormatError(f"payload size mismatch: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(h * w, d)
    return TokenGrid(h, w, data.astype(np.float32))
