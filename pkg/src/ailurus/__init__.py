"""Adaptive-resolution token reduction for vision transformers.

Tokens are clustered at an intermediate layer with spatially constrained
density peaks, the reduced sequence is forwarded with multiplicity-weighted
attention, and representatives are unfolded back onto the full grid.
"""

__version__ = "0.1.0"

from .attention import (
    BlockWeights,
    WeightedSequence,
    block_forward,
    init_block_weights,
    load_block_weights,
    save_block_weights,
    weighted_attention,
)
from .dpc import (
    ClusterAssignment,
    DensityScores,
    ReducedSequence,
    assign_tokens,
    cluster,
    distance_indicator,
    local_density,
    merge_tokens,
    select_centers,
    spatial_weight,
)
from .grid import DpcConfig, NeighborIndex, TokenGrid, load_grid, save_grid, spatial_neighbors, synth_grid
from .metrics import (
    assignment_stats,
    brute_force_dpc,
    kmeans_baseline,
    pairwise_similarity_preservation,
    reconstruction_similarity,
)
from .pipeline import CostReport, PipelineConfig, RunTiming, encoder_forward, flops_estimate, unfold
