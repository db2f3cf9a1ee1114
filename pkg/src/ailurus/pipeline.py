"""Reduce / forward / unfold encoder and its analytic cost model."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import BlockWeights, WeightedSequence, block_forward
from .dpc import ClusterAssignment, ReducedSequence, cluster
from .grid import DpcConfig, TokenGrid

__all__ = [
    "MODES",
    "PipelineConfig",
    "RunTiming",
    "CostReport",
    "reduce_tokens",
    "encoder_forward",
    "time_forward",
    "unfold",
    "flops_estimate",
]

MODES = ("baseline", "ailurus", "kmeans")


@dataclass(frozen=True)
class PipelineConfig:
    """Encoder configuration.

    ``dpc.merge_layer`` is the number of blocks run at full resolution before
    the sequence is reduced; ``0`` reduces the input itself. ``mode="kmeans"``
    swaps density peaks for the K-means baseline reducer. ``pos_scale`` > 0
    adds seeded Gaussian positional vectors to the input.
    """

    depth: int
    dim: int
    heads: int
    dpc: DpcConfig
    mode: str = "ailurus"
    kmeans_iters: int = 10
    pos_scale: float = 0.0
    pos_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 0 <= self.dpc.merge_layer < self.depth:
            raise ValueError(f"merge_layer {self.dpc.merge_layer} outside [0, {self.depth})")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"{self.heads} heads do not divide dim {self.dim}")

    @property
    def merge_layer(self) -> int:
        return self.dpc.merge_layer


@dataclass
class RunTiming:
    blocks_ms: float = 0.0
    clustering_ms: float = 0.0
    recovering_ms: float = 0.0
    total_ms: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostReport:
    """Multiply-accumulate counts (MACs, not 2x FLOPs)."""

    attention_macs: int
    mlp_macs: int
    clustering_macs: int
    total_macs: int
    ratio: float
    block_ratio: float
    per_layer: list = field(default_factory=list)

    def to_dict(self, per_layer: bool = False) -> dict:
        out = asdict(self)
        if not per_layer:
            out.pop("per_layer")
        return out


def reduce_tokens(grid: TokenGrid, cfg: PipelineConfig) -> ReducedSequence:
    if cfg.mode == "ailurus":
        return cluster(grid, cfg.dpc)
    if cfg.mode == "kmeans":
        from .metrics import kmeans_baseline

        return kmeans_baseline(grid, cfg.dpc.num_clusters, cfg.kmeans_iters, cfg.dpc.seed)
    raise ValueError(f"mode {cfg.mode!r} does not reduce tokens")


def unfold(reps: np.ndarray, asg: ClusterAssignment, height: int, width: int) -> TokenGrid:
    """Copy each representative back onto every grid cell of its cluster."""
    reps = np.asarray(reps)
    if asg.n_tokens != height * width:
        raise ValueError(f"assignment covers {asg.n_tokens} tokens, grid has {height * width}")
    if asg.assignment.max() >= len(reps):
        raise ValueError("cluster id out of range")
    return TokenGrid(height, width, reps[asg.assignment])


def _positional(grid: TokenGrid, cfg: PipelineConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.pos_seed)
    return (cfg.pos_scale * rng.standard_normal(grid.data.shape)).astype(np.float32)


def encoder_forward(grid: TokenGrid, weights: list[BlockWeights], cfg: PipelineConfig):
    """Run the encoder; returns ``(output grid, RunTiming, assignment or None)``."""
    if grid.dim != cfg.dim:
        raise ValueError(f"grid dim {grid.dim} does not match config dim {cfg.dim}")
    if len(weights) != cfg.depth:
        raise ValueError(f"got {len(weights)} blocks for depth {cfg.depth}")
    timing = RunTiming()
    t_start = time.perf_counter()

    tokens = grid.data
    if cfg.pos_scale:
        tokens = tokens + _positional(grid, cfg)
    seq = WeightedSequence.unweighted(tokens)
    split = cfg.depth if cfg.mode == "baseline" else cfg.merge_layer

    t0 = time.perf_counter()
    for layer in weights[:split]:
        seq = block_forward(seq, layer)
    timing.blocks_ms += (time.perf_counter() - t0) * 1e3

    asg = None
    if cfg.mode != "baseline":
        t0 = time.perf_counter()
        reduced = reduce_tokens(grid.with_data(seq.tokens), cfg)
        asg = reduced.assignment
        seq = WeightedSequence(reduced.reps, reduced.log_weights)
        timing.clustering_ms = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        for layer in weights[split:]:
            seq = block_forward(seq, layer)
        timing.blocks_ms += (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        out = unfold(seq.tokens, asg, grid.height, grid.width)
        timing.recovering_ms = (time.perf_counter() - t0) * 1e3
    else:
        out = grid.with_data(seq.tokens)

    timing.total_ms = (time.perf_counter() - t_start) * 1e3
    return out, timing, asg


def time_forward(grid, weights, cfg, runs: int = 13, warmup: int = 3):
    """Median per-phase timing over ``runs - warmup`` measured runs."""
    if runs <= warmup:
        raise ValueError("runs must exceed warmup")
    samples = []
    for _ in range(runs):
        out, timing, asg = encoder_forward(grid, weights, cfg)
        samples.append(timing)
    kept = samples[warmup:]
    median = RunTiming(**{
        key: float(np.median([getattr(t, key) for t in kept]))
        for key in ("blocks_ms", "clustering_ms", "recovering_ms", "total_ms")
    })
    return out, median, asg


def _layer_macs(n: int, d: int) -> tuple[int, int]:
    return 4 * n * d * d + 2 * n * n * d, 8 * n * d * d


def flops_estimate(cfg: PipelineConfig, h: int, w: int) -> CostReport:
    """Closed-form MAC counts for the full and reduced phases of the encoder."""
    n, d, depth = h * w, cfg.dim, cfg.depth
    full_attn, full_mlp = _layer_macs(n, d)
    baseline = depth * (full_attn + full_mlp)
    if cfg.mode == "baseline":
        per_layer = [{"tokens": n, "attention_macs": full_attn, "mlp_macs": full_mlp}] * depth
        return CostReport(depth * full_attn, depth * full_mlp, 0, baseline, 1.0, 1.0, per_layer)

    m = cfg.dpc.num_clusters
    if m > n:
        raise ValueError(f"num_clusters {m} exceeds token count {n}")
    full, reduced = cfg.merge_layer, depth - cfg.merge_layer
    red_attn, red_mlp = _layer_macs(m, d)
    attention = full * full_attn + reduced * red_attn
    mlp = full * full_mlp + reduced * red_mlp
    clustering = n * cfg.dpc.effective_lam(n) * d + n * m * d
    total = attention + mlp + clustering
    per_layer = (
        [{"tokens": n, "attention_macs": full_attn, "mlp_macs": full_mlp}] * full
        + [{"tokens": m, "attention_macs": red_attn, "mlp_macs": red_mlp}] * reduced
    )
    return CostReport(
        attention_macs=attention,
        mlp_macs=mlp,
        clustering_macs=clustering,
        total_macs=total,
        ratio=total / baseline,
        block_ratio=(attention + mlp) / baseline,
        per_layer=per_layer,
    )
