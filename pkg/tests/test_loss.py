import numpy as np
import pytest

from helpers import inward_smooth_map, random_smooth_map, textured_volume

# enough fine-scale contrast that window variances dwarf the epsilon guard
SHARP = ((1.5, 1.0), (0.8, 0.6))
from iconforge.errors import ShapeMismatch
from iconforge.loss import (
    LossBreakdown,
    LossConfig,
    box_sum,
    gradicon_regularizer,
    lncc_similarity,
    loss_gradients,
    total_loss,
    window_counts,
)
from iconforge.transform import TransformMap, identity_map, identity_values, warp
from iconforge.volume import Volume


def naive_lncc(a, b, radius, eps):
    """O(N * w^3) sliding-window reference written independently."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dims = a.shape
    corr_sum = 0.0
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                sl = (slice(max(0, i - radius), min(dims[0], i + radius + 1)),
                      slice(max(0, j - radius), min(dims[1], j + radius + 1)),
                      slice(max(0, k - radius), min(dims[2], k + radius + 1)))
                wa = a[sl].ravel()
                wb = b[sl].ravel()
                va = wa.var()
                vb = wb.var()
                cov = ((wa - wa.mean()) * (wb - wb.mean())).mean()
                if va < eps and vb < eps:
                    corr = 0.0
                else:
                    corr = cov / np.sqrt((va + eps) * (vb + eps))
                corr_sum += corr
    return 1.0 - corr_sum / a.size


class TestBoxSum:
    def test_matches_direct_window_sums(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 5, 7))
        got = box_sum(x, 2)
        for idx in [(0, 0, 0), (3, 2, 4), (5, 4, 6), (2, 2, 2)]:
            sl = tuple(slice(max(0, idx[c] - 2), min(x.shape[c], idx[c] + 3)) for c in range(3))
            assert got[idx] == pytest.approx(x[sl].sum(), rel=1e-12)

    def test_window_counts(self):
        cnt = window_counts((6, 5, 7), 2)
        assert cnt[0, 0, 0] == 27  # 3*3*3 at the corner
        assert cnt[3, 2, 3] == 125  # full 5^3 in the interior


class TestLnccSimilarity:
    def test_matches_naive_sliding_window(self):
        rng = np.random.default_rng(1)
        cfg = LossConfig()
        a = rng.normal(size=(8, 9, 7))
        b = rng.normal(size=(8, 9, 7))
        got = lncc_similarity(a, b, cfg)
        want = naive_lncc(a, b, cfg.lncc_radius, cfg.variance_epsilon)
        assert got == pytest.approx(want, abs=1e-5)

    def test_self_similarity_near_zero(self):
        a = textured_volume(10, seed=2, scales=SHARP)
        assert lncc_similarity(a, a) <= 1e-3

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        a = Volume(rng.normal(0, 2, size=(10, 10, 10)).astype(np.float32))
        for alpha, beta in ((2.0, 3.0), (0.5, -1.0), (7.0, 0.0)):
            b = Volume((alpha * a.data + beta).astype(np.float32))
            assert abs(lncc_similarity(a, b) - lncc_similarity(a, a)) < 1e-5

    def test_anticorrelation_is_two(self):
        a = Volume((2.0 * textured_volume(10, seed=4, scales=SHARP).data).astype(np.float32))
        b = Volume((1.0 - a.data).astype(np.float32))
        assert lncc_similarity(a, b) == pytest.approx(2.0, abs=1e-3)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(7, 7, 7))
        b = rng.normal(size=(7, 7, 7))
        assert lncc_similarity(a, b) == lncc_similarity(b, a)

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            a = rng.normal(size=(6, 6, 6))
            b = rng.normal(size=(6, 6, 6))
            val = lncc_similarity(a, b)
            assert 0.0 <= val <= 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            lncc_similarity(np.zeros((4, 4, 4)), np.zeros((5, 4, 4)))


class TestRegularizer:
    def test_identity_pair_is_exactly_zero(self):
        idm = identity_map((8, 8, 8))
        assert gradicon_regularizer(idm, idm) == 0.0

    def test_exact_inverse_translations(self):
        # positive sub-voxel shifts keep the clamped layer outside the
        # forward-difference read set, so the penalty vanishes
        dims = (10, 10, 10)
        t = np.array([0.06, 0.05, 0.02], dtype=np.float32)
        fwd = TransformMap(identity_values(dims) + t)
        bwd = TransformMap(identity_values(dims) - t)
        assert gradicon_regularizer(fwd, bwd) < 1e-9

    def test_analytic_scaling_case(self):
        # x-axis stretch by 1.1 against the identity: ||J - I||_F^2 = 0.01
        dims = (9, 9, 9)
        vals = np.array(identity_values(dims))
        vals[..., 0] *= np.float32(1.1)
        phi_ab = TransformMap(vals)
        reg = gradicon_regularizer(phi_ab, identity_map(dims))
        assert reg == pytest.approx(0.01, abs=1e-6)

    def test_nonnegative_on_random_maps(self):
        for seed in range(4):
            p = random_smooth_map(8, seed=seed)
            q = random_smooth_map(8, seed=seed + 50)
            assert gradicon_regularizer(p, q) >= 0.0

    def test_grid_mismatch(self):
        with pytest.raises(ShapeMismatch):
            gradicon_regularizer(identity_map((6, 6, 6)), identity_map((7, 7, 7)))


class TestTotalLoss:
    def test_identical_images_identity_maps(self):
        a = textured_volume(12, seed=7, scales=SHARP)
        idm = identity_map(a.dims)
        bd = total_loss(a, a, idm, idm)
        assert bd.total <= 2e-3
        assert bd.reg == 0.0

    def test_translated_pair_with_inverse_maps(self):
        n = 20
        a = textured_volume(n, seed=8, scales=SHARP)
        t = np.array([1.0 / (n - 1), 0, 0], dtype=np.float32)
        fwd = TransformMap(identity_values((n,) * 3) + t)
        bwd = TransformMap(identity_values((n,) * 3) - t)
        b = warp(a, fwd)
        bd = total_loss(a, b, fwd, bwd)
        # sim_ab recomputes the very warp that produced b
        assert bd.sim_ab <= 2e-3
        # the reverse direction loses one boundary slice; interior dominates
        assert bd.total < 0.1

    def test_matches_independent_component_computation(self):
        rng = np.random.default_rng(9)
        cfg = LossConfig()
        a = Volume(rng.uniform(0, 1, size=(16, 16, 16)).astype(np.float32))
        b = Volume(rng.uniform(0, 1, size=(16, 16, 16)).astype(np.float32))
        idm = identity_map(a.dims)
        bd = total_loss(a, b, idm, idm, cfg)
        want_ab = naive_lncc(a.data, b.data, cfg.lncc_radius, cfg.variance_epsilon)
        want_ba = naive_lncc(b.data, a.data, cfg.lncc_radius, cfg.variance_epsilon)
        assert bd.sim_ab == pytest.approx(want_ab, abs=1e-5)
        assert bd.sim_ba == pytest.approx(want_ba, abs=1e-5)
        assert bd.reg == 0.0

    def test_swap_symmetry_exact(self):
        a = textured_volume(10, seed=10)
        b = textured_volume(10, seed=11)
        p = random_smooth_map(10, seed=12)
        q = random_smooth_map(10, seed=13)
        fwd = total_loss(a, b, p, q)
        swapped = total_loss(b, a, q, p)
        assert fwd.sim_ab == swapped.sim_ba
        assert fwd.sim_ba == swapped.sim_ab

    def test_breakdown_identity(self):
        bd = LossBreakdown.build(0.25, 0.5, 0.125, 1.5)
        assert bd.total == 0.25 + 0.5 + 1.5 * 0.125

    def test_shape_mismatch(self):
        a = textured_volume(8, seed=14)
        b = textured_volume(10, seed=15)
        with pytest.raises(ShapeMismatch):
            total_loss(a, b, identity_map(a.dims), identity_map(b.dims))


class TestLossGradients:
    def test_constant_images_zero_similarity_gradient(self):
        dims = (8, 8, 8)
        c = Volume(np.full(dims, 0.3, dtype=np.float32))
        cfg = LossConfig(lam=1e-9)  # isolate the similarity terms
        _, g_ab, g_ba = loss_gradients(c, c, identity_map(dims), identity_map(dims), cfg)
        assert np.abs(g_ab).max() < 1e-7
        assert np.abs(g_ba).max() < 1e-7

    def test_identity_setup_has_tiny_gradient(self):
        a = textured_volume(8, seed=16, scales=SHARP)
        idm = identity_map(a.dims)
        _, g_ab, g_ba = loss_gradients(a, a, idm, idm)
        # perfectly registered identical images: a stationary point up to
        # the epsilon guard's tilt
        assert np.abs(g_ab).max() < 1e-2
        assert np.abs(g_ba).max() < 1e-2

    def test_matches_central_finite_differences(self):
        n = 6
        rng = np.random.default_rng(17)
        a = textured_volume(n, seed=18, scales=SHARP)
        b = textured_volume(n, seed=19, scales=SHARP)
        p = inward_smooth_map(n, seed=20)
        q = inward_smooth_map(n, seed=21)
        cfg = LossConfig()
        bd, g_ab, g_ba = loss_gradients(a, b, p, q, cfg)
        assert bd.total == pytest.approx(total_loss(a, b, p, q, cfg).total, abs=1e-9)

        h = 1e-3
        face_margin = 2 * h * (n - 1)  # trilinear kernels kink at cell faces
        checked = 0
        for vals, grad, which in ((p.values, g_ab, "ab"), (q.values, g_ba, "ba")):
            flat_idx = rng.choice(vals.size, size=40, replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, vals.shape)
                s = float(vals[idx]) * (n - 1)
                frac = s - np.floor(s)
                if min(frac, 1 - frac) < face_margin:
                    continue
                plus = np.array(vals)
                plus[idx] += h
                minus = np.array(vals)
                minus[idx] -= h
                if which == "ab":
                    fp = total_loss(a, b, TransformMap(plus), q, cfg).total
                    fm = total_loss(a, b, TransformMap(minus), q, cfg).total
                else:
                    fp = total_loss(a, b, p, TransformMap(plus), cfg).total
                    fm = total_loss(a, b, p, TransformMap(minus), cfg).total
                fd = (fp - fm) / (2 * h)
                an = float(grad[idx])
                if abs(fd) + abs(an) < 1e-4:
                    continue
                assert abs(fd - an) / (abs(fd) + abs(an)) < 1e-2
                checked += 1
        assert checked >= 20
