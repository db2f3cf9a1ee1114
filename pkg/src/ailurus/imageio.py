"""Minimal binary PPM (P6) / PGM (P5) I/O and patch (un)folding."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .dpc import ClusterAssignment
from .grid import TokenGrid

__all__ = ["read_pnm", "write_pnm", "patchify", "unpatchify", "cluster_colors", "render_assignment"]


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(raw[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit P6/P5 file as ``uint8`` of shape ``(H, W, 3)`` or ``(H, W, 1)``."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(raw, 4)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"unsupported image format {magic!r}; expected P6 or P5")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255 or maxval < 1:
        raise ValueError(f"only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    body = raw[start : start + size]
    if len(body) < size:
        raise ValueError("truncated image payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels).copy()


def write_pnm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, header + image.tobytes())


def patchify(image: np.ndarray, patch: int) -> TokenGrid:
    """Non-overlapping ``patch x patch`` tiles flattened to ``channels * patch**2`` values in [0, 1]."""
    h, w, c = image.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"{h}x{w} image cannot be tiled by {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    tiles = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return TokenGrid(gh, gw, (tiles.reshape(gh * gw, -1) / 255.0).astype(np.float32))


def unpatchify(grid: TokenGrid, patch: int, channels: int) -> np.ndarray:
    if grid.dim != channels * patch * patch:
        raise ValueError(f"token dim {grid.dim} does not match {channels}x{patch}x{patch} patches")
    tiles = grid.data.astype(np.float64).reshape(grid.height, grid.width, patch, patch, channels)
    img = tiles.transpose(0, 2, 1, 3, 4).reshape(grid.height * patch, grid.width * patch, channels)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def cluster_colors(num_clusters: int, seed: int = 0) -> np.ndarray:
    """Reproducible RGB color per cluster id from a keyed hash."""
    colors = np.empty((num_clusters, 3), dtype=np.uint8)
    for q in range(num_clusters):
        digest = hashlib.blake2b(f"{seed}:{q}".encode(), digest_size=3).digest()
        colors[q] = np.frombuffer(digest, dtype=np.uint8)
    return colors


def render_assignment(asg: ClusterAssignment, height: int, width: int, cell: int, seed: int = 0) -> np.ndarray:
    """Assignment map: every grid cell painted ``cell x cell`` in its cluster's color."""
    colors = cluster_colors(asg.num_clusters, seed)
    img = colors[asg.assignment].reshape(height, width, 3)
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
