import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ailurus import dpc
from ailurus.dpc import (
    ClusterAssignment,
    DensityScores,
    assign_tokens,
    cluster,
    density_scores,
    distance_indicator,
    local_density,
    merge_tokens,
    neighbors_for,
    select_centers,
    spatial_weight,
)
from ailurus.grid import DpcConfig, TokenGrid, spatial_neighbors, synth_grid
from ailurus.metrics import brute_force_dpc, brute_force_merge

# 3x3 grid with scalar features, laid out row-major
HAND = [0.0, 1.0, 3.0, 1.0, 2.0, 5.0, 4.0, 4.0, 9.0]


def hand_grid():
    return TokenGrid(3, 3, np.array(HAND, dtype=np.float32)[:, None])


def scalar_scores(values, h, w, lam, alpha, k):
    """One-off scalar transcription of density and distance indicator."""
    n = h * w
    lam = min(lam, n - 1)
    rank = {}
    for i in range(n):
        order = sorted((j for j in range(n) if j != i),
                       key=lambda j: ((j // w - i // w) ** 2 + (j % w - i % w) ** 2, j))
        rank[i] = {j: r + 1 for r, j in enumerate(order)}

    def wd(i, j):
        rk = rank[i][j]
        if rk > lam:
            return math.inf
        return abs(values[i] - values[j]) * ((1 - alpha) * rk / lam + alpha)

    rho = [math.exp(-sum(sorted(wd(i, j) for j in range(n) if j != i)[:k]) / k) for i in range(n)]
    delta = []
    for i in range(n):
        cands = [wd(i, j) for j in range(n)
                 if j != i and (rho[j] > rho[i] or (rho[j] == rho[i] and j < i))]
        delta.append(min(cands, default=math.inf))
    return rho, delta


class TestSpatialWeight:
    def test_boundary(self):
        assert spatial_weight(50, 50, 0.9) == pytest.approx(1.0, abs=1e-15)

    def test_midpoint(self):
        assert spatial_weight(25, 50, 0.9) == pytest.approx(0.95, abs=1e-15)

    def test_outside(self):
        assert spatial_weight(None, 50, 0.9) == math.inf
        assert spatial_weight(51, 50, 0.9) == math.inf

    def test_floor_is_one_based(self):
        assert spatial_weight(1, 50, 0.9) == pytest.approx(0.1 / 50 + 0.9)

    def test_alpha_one_disables_weighting(self):
        assert all(spatial_weight(r, 10, 1.0) == 1.0 for r in range(1, 11))


class TestDensity:
    def test_hand_value(self, backend):
        g = hand_grid()
        cfg = DpcConfig(num_clusters=3, lam=4, knn=1)
        rho = local_density(g, spatial_neighbors(3, 3, 4), cfg)
        # token 0: neighbors 1,3,4,2 at ranks 1..4; smallest weighted distance is 1 * 0.925
        assert rho[0] == pytest.approx(math.exp(-0.925), rel=1e-12)
        # token 4 (center): neighbors 1,3,5,7 -> |2-1| * 0.925 at rank 1
        assert rho[4] == pytest.approx(math.exp(-0.925), rel=1e-12)
        # token 8: neighbors 5,7,4,2 -> min(4*0.925, 5*0.95, 7*0.975, 6*1.0)
        assert rho[8] == pytest.approx(math.exp(-3.7), rel=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_matches_scalar_oracle(self, backend, k):
        g = hand_grid()
        cfg = DpcConfig(num_clusters=3, lam=4, knn=k, alpha=0.9)
        rho_ref, delta_ref = scalar_scores(HAND, 3, 3, 4, 0.9, k)
        nbr = spatial_neighbors(3, 3, 4)
        rho = local_density(g, nbr, cfg)
        np.testing.assert_allclose(rho, rho_ref, rtol=1e-12)
        delta = distance_indicator(g, rho, nbr, cfg)
        np.testing.assert_allclose(delta, delta_ref, rtol=1e-12)

    def test_duplicate_at_rank_one(self, backend):
        data = np.random.default_rng(0).standard_normal((9, 4)).astype(np.float32)
        data[1] = data[0]
        g = TokenGrid(3, 3, data)
        rho = local_density(g, spatial_neighbors(3, 3, 4), DpcConfig(num_clusters=2, lam=4))
        assert rho[0] == 1.0 and rho[1] == 1.0

    def test_all_identical(self, backend):
        g = TokenGrid(4, 4, np.ones((16, 3), dtype=np.float32))
        scores, _, _ = density_scores(g, DpcConfig(num_clusters=3))
        assert (scores.rho == 1.0).all()
        # equal densities are ordered by index: only token 0 has no denser neighbor
        assert math.isinf(scores.delta[0])
        assert (scores.delta[1:] == 0.0).all()

    def test_rho_in_unit_interval(self, backend):
        g = synth_grid("random", 10, 10, 8, seed=4)
        scores, _, _ = density_scores(g, DpcConfig(num_clusters=5))
        assert ((scores.rho > 0) & (scores.rho <= 1)).all()
        assert np.isinf(scores.delta).any()

    def test_global_max_has_infinite_delta(self, backend):
        g = synth_grid("random", 9, 9, 6, seed=8)
        scores, _, _ = density_scores(g, DpcConfig(num_clusters=5))
        assert math.isinf(scores.delta[np.argmax(scores.rho)])

    def test_empty_neighbor_list(self):
        with pytest.raises(ValueError, match="grid too small"):
            neighbors_for(TokenGrid(1, 1, np.zeros((1, 2))), DpcConfig(num_clusters=1))


class TestSelectCenters:
    def test_all_tokens(self):
        scores = DensityScores.from_parts(np.array([0.5, 0.9, 0.9, 0.2]),
                                          np.array([1.0, np.inf, np.inf, 4.0]))
        assert select_centers(scores, 4).tolist() == [1, 2, 3, 0]

    def test_infinite_class_by_rho(self):
        scores = DensityScores.from_parts(np.array([0.3, 0.8, 0.5]), np.full(3, np.inf))
        assert select_centers(scores, 3).tolist() == [1, 2, 0]

    def test_finite_ties(self):
        # gamma ties: 0.5*2 == 0.25*4; higher rho wins, then index
        scores = DensityScores.from_parts(np.array([0.25, 0.5, 0.5, 1.0]),
                                          np.array([4.0, 2.0, 2.0, np.inf]))
        assert select_centers(scores, 4).tolist() == [3, 1, 2, 0]

    def test_identical_tokens(self):
        g = TokenGrid(3, 4, np.full((12, 2), 7.0, dtype=np.float32))
        scores, _, _ = density_scores(g, DpcConfig(num_clusters=3))
        assert select_centers(scores, 3).tolist() == [0, 1, 2]

    def test_too_many(self):
        scores = DensityScores.from_parts(np.ones(3), np.ones(3))
        with pytest.raises(ValueError):
            select_centers(scores, 4)

    def test_matches_oracle_top16(self, backend):
        g = synth_grid("random", 8, 8, 16, seed=21)
        cfg = DpcConfig(num_clusters=16)
        scores, _, _ = density_scores(g, cfg)
        ref = brute_force_dpc(g, cfg)
        assert select_centers(scores, 16).tolist() == ref.centers.tolist()


class TestAssign:
    def test_identity(self, backend):
        g = synth_grid("random", 4, 4, 3, seed=1)
        cfg = DpcConfig(num_clusters=16)
        asg = assign_tokens(g, np.arange(16), neighbors_for(g, cfg), cfg)
        assert asg.assignment.tolist() == list(range(16))
        assert (asg.sizes == 1).all()

    def test_blocks_resolve_to_own_center(self, backend):
        g = synth_grid("blocks", 6, 6, 5, blocks=4, seed=2)
        cfg = DpcConfig(num_clusters=4)
        centers = np.array([0, 3, 18, 21])
        asg = assign_tokens(g, centers, neighbors_for(g, cfg), cfg)
        assert sorted(asg.sizes.tolist()) == [9, 9, 9, 9]
        block = (np.arange(36) // 6 // 3) * 2 + np.arange(36) % 6 // 3
        assert (asg.assignment == block).all()
        assert asg.fallbacks == 0

    def test_fallback_to_global_nearest(self, backend):
        # lambda=1: each token only sees its rank-1 neighbor
        g = TokenGrid(1, 5, np.array([[0.0], [10.0], [20.0], [30.0], [31.0]], dtype=np.float32))
        cfg = DpcConfig(num_clusters=2, lam=1)
        asg = assign_tokens(g, np.array([4, 0]), neighbors_for(g, cfg), cfg)
        # token 1 sees 0 (a center); token 2 sees only 1; token 3 sees only 2 -> fallbacks
        assert asg.assignment.tolist() == [1, 1, 0, 0, 0]
        assert asg.fallbacks == 2

    def test_tie_goes_to_lower_center_index(self, backend):
        g = TokenGrid(1, 3, np.array([[0.0], [1.0], [0.0]], dtype=np.float32))
        cfg = DpcConfig(num_clusters=2, lam=2, alpha=1.0)
        asg = assign_tokens(g, np.array([2, 0]), neighbors_for(g, cfg), cfg)
        assert asg.assignment[1] == 1  # center token 0 beats center token 2

    def test_zero_centers(self):
        g = synth_grid("random", 3, 3, 2)
        cfg = DpcConfig(num_clusters=1)
        with pytest.raises(ValueError, match="zero centers"):
            assign_tokens(g, np.array([], dtype=int), neighbors_for(g, cfg), cfg)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, backend, seed):
        g = synth_grid("random", 8, 8, 16, seed=seed)
        cfg = DpcConfig(num_clusters=12)
        ref = brute_force_dpc(g, cfg)
        asg = assign_tokens(g, ref.centers, neighbors_for(g, cfg), cfg)
        assert asg == ref
        assert asg.fallbacks == ref.fallbacks


class TestMerge:
    def test_singletons_exact(self):
        g = synth_grid("random", 3, 3, 4, seed=3)
        asg = ClusterAssignment(np.arange(9), np.arange(9))
        red = merge_tokens(g, asg)
        assert red.reps.tobytes() == g.data.tobytes()
        assert red.weights.tolist() == [1] * 9

    def test_pair_mean(self):
        u, v = np.array([1.0, 2.0]), np.array([4.0, -2.0])
        g = TokenGrid(1, 2, np.stack([u, v]).astype(np.float32))
        red = merge_tokens(g, ClusterAssignment(np.array([0]), np.array([0, 0])))
        np.testing.assert_array_equal(red.reps[0], (u + v) / 2)
        assert red.weights.tolist() == [2]

    def test_block_prototypes(self):
        g = synth_grid("blocks", 6, 6, 5, blocks=4, seed=6)
        red = cluster(g, DpcConfig(num_clusters=4))
        assert set(map(bytes, red.reps)) == set(map(bytes, np.unique(g.data, axis=0)))


class TestCluster:
    def test_paper_scale(self):
        g = synth_grid("random", 40, 40, 32, seed=0)
        red = cluster(g, DpcConfig(num_clusters=400))
        assert red.reps.shape == (400, 32)
        assert red.weights.sum() == 1600

    def test_m_equals_n(self, backend):
        g = synth_grid("random", 5, 5, 4, seed=2)
        red = cluster(g, DpcConfig(num_clusters=25))
        assert (red.weights == 1).all()
        np.testing.assert_array_equal(red.reps[red.assignment.assignment], g.data)

    @pytest.mark.parametrize("m", [4, 16, 32])
    def test_matches_brute_force(self, backend, m):
        for seed in range(3):
            g = synth_grid("random", 8, 8, 16, seed=seed)
            cfg = DpcConfig(num_clusters=m)
            ref = brute_force_dpc(g, cfg)
            assert cluster(g, cfg) == brute_force_merge(g, ref)

    def test_backends_bit_identical(self, monkeypatch):
        from ailurus import _backend

        g = synth_grid("blocks", 16, 16, 24, blocks=16, noise=0.1, seed=5)
        cfg = DpcConfig(num_clusters=64, knn=3)
        monkeypatch.setattr(_backend, "USE_NUMBA", True)
        a, _, wa = density_scores(g, cfg)
        ra = cluster(g, cfg)
        monkeypatch.setattr(_backend, "USE_NUMBA", False)
        b, _, wb = density_scores(g, cfg)
        rb = cluster(g, cfg)
        assert wa.tobytes() == wb.tobytes()
        assert a.rho.tobytes() == b.rho.tobytes() and a.delta.tobytes() == b.delta.tobytes()
        assert ra == rb

    def test_duplicate_collapse(self, backend):
        data = np.random.default_rng(7).standard_normal((36, 6)).astype(np.float32)
        data[1] = data[0]  # tokens 0 and 1 are mutual rank-1 neighbors on the top row
        g = TokenGrid(6, 6, data)
        for m in (4, 12, 35):
            asg = cluster(g, DpcConfig(num_clusters=m)).assignment
            assert not {0, 1} <= set(asg.centers.tolist())
            assert asg.assignment[0] == asg.assignment[1]

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 30))
    def test_channel_permutation(self, seed, m):
        g = synth_grid("random", 6, 6, 8, seed=seed)
        perm = np.random.default_rng(seed).permutation(8)
        a = cluster(g, DpcConfig(num_clusters=m)).assignment
        b = cluster(g.with_data(g.data[:, perm]), DpcConfig(num_clusters=m)).assignment
        assert a == b

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_scaling_preserves_density_order(self, c):
        # gamma = rho * delta is not scale-free, so center sets may change; what
        # is preserved is the rho order, the infinite-delta class, and the
        # assignment to a fixed set of centers.
        for seed in range(10):
            g = synth_grid("random", 10, 10, 8, seed=seed)
            cfg = DpcConfig(num_clusters=20)
            s1, nbr, _ = density_scores(g, cfg)
            g2 = g.with_data(g.data * c)
            s2, _, _ = density_scores(g2, cfg)
            assert np.array_equal(np.argsort(-s1.rho, kind="stable"), np.argsort(-s2.rho, kind="stable"))
            assert np.array_equal(np.isinf(s1.delta), np.isinf(s2.delta))
            np.testing.assert_allclose(s2.delta[np.isfinite(s2.delta)],
                                       c * s1.delta[np.isfinite(s1.delta)], rtol=1e-12)
            centers = select_centers(s1, 20)
            assert assign_tokens(g, centers, nbr, cfg) == assign_tokens(g2, centers, nbr, cfg)

    def test_deterministic(self):
        g = synth_grid("random", 12, 12, 8, seed=3)
        cfg = DpcConfig(num_clusters=30)
        a, b = cluster(g, cfg), cluster(g, cfg)
        assert a == b and a.reps.tobytes() == b.reps.tobytes()


class TestAssignmentText:
    def test_roundtrip(self, tmp_path):
        asg = cluster(synth_grid("random", 5, 5, 3, seed=1), DpcConfig(num_clusters=6)).assignment
        lines = asg.to_text().splitlines()
        assert lines[0] == "6 25"
        asg.save(tmp_path / "a.txt")
        assert ClusterAssignment.load(tmp_path / "a.txt") == asg

    def test_header_mismatch(self):
        with pytest.raises(ValueError):
            ClusterAssignment.from_text("2 3\n0 1\n0 1\n")

    def test_invariants(self):
        with pytest.raises(ValueError):
            ClusterAssignment(np.array([0, 0]), np.array([0, 1]))
        with pytest.raises(ValueError):
            ClusterAssignment(np.array([0]), np.array([0, 1]))
