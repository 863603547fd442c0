import numpy as np
import pytest

from helpers import random_smooth_map, textured_volume
from iconforge.errors import ShapeMismatch
from iconforge.transform import (
    TransformMap,
    compose,
    identity_map,
    identity_values,
    jacobian_field,
    neg_jacobian_fraction,
    resize_map,
    warp,
    warp_labels,
)
from iconforge.volume import LabelVolume, Volume, axis_coords


def translation_map(dims, t_norm):
    vals = identity_values(dims) + np.asarray(t_norm, dtype=np.float32)
    return TransformMap(vals)


class TestIdentityMap:
    def test_node_values(self):
        phi = identity_map((4, 5, 6))
        for axis, n in enumerate((4, 5, 6)):
            coords = axis_coords(n)
            sl = [0, 0, 0]
            for i in range(n):
                sl[axis] = i
                assert phi.values[tuple(sl) + (axis,)] == coords[i]

    def test_warp_with_identity_is_noop(self):
        v = textured_volume(9, seed=0)
        assert np.array_equal(warp(v, identity_map(v.dims)).data, v.data)

    def test_compose_identity_both_sides(self):
        idm = identity_map((7, 7, 7))
        assert np.array_equal(compose(idm, idm).values, idm.values)
        rng = np.random.default_rng(0)
        vals = np.clip(identity_values((7, 7, 7))
                       + rng.normal(0, 0.02, size=(7, 7, 7, 3)).astype(np.float32), 0, 1)
        phi = TransformMap(vals)
        assert np.array_equal(compose(phi, idm).values, phi.values)
        assert np.array_equal(compose(idm, phi).values, phi.values)

    def test_identity_jacobian_and_folding(self):
        idm = identity_map((6, 6, 6))
        jac = jacobian_field(idm)
        assert np.array_equal(jac, np.broadcast_to(np.eye(3), jac.shape))
        assert neg_jacobian_fraction(idm) == 0.0


class TestCompose:
    def test_translations_add_at_interior(self):
        dims = (10, 10, 10)
        t1, t2 = (0.1, 0.0, -0.05), (0.05, 0.1, 0.0)
        comp = compose(translation_map(dims, t1), translation_map(dims, t2))
        want = identity_values(dims) + np.asarray(t1, np.float32) + np.asarray(t2, np.float32)
        core = (slice(3, 7),) * 3
        assert np.abs(comp.values[core] - want[core]).max() < 1e-6

    def test_inverse_translation_gives_identity_interior(self):
        dims = (10, 10, 10)
        comp = compose(translation_map(dims, (-0.1, 0, 0)), translation_map(dims, (0.1, 0, 0)))
        core = (slice(2, 8),) * 3
        assert np.abs(comp.values[core] - identity_values(dims)[core]).max() < 1e-6

    def test_matches_brute_force_per_node(self):
        outer = random_smooth_map(8, seed=1, sigma=1.5, max_vox=1.0)
        inner = random_smooth_map(8, seed=2, sigma=1.5, max_vox=1.0)
        comp = compose(outer, inner)
        # independent re-evaluation: interpolate each outer component longhand
        from test_volume import brute_force_sample

        for idx in [(0, 0, 0), (3, 4, 2), (7, 7, 7), (2, 6, 5), (5, 1, 3)]:
            q = inner.values[idx]
            want = [brute_force_sample(outer.values[..., c], q) for c in range(3)]
            assert np.abs(comp.values[idx] - np.asarray(want)).max() < 1e-5


class TestWarp:
    def test_translation_by_one_voxel_shifts(self):
        n = 8
        v = textured_volume(n, seed=5)
        phi = translation_map((n, n, n), (1.0 / (n - 1), 0, 0))
        out = warp(v, phi)
        assert np.abs(out.data[:-1] - v.data[1:]).max() < 1e-6

    def test_random_map_matches_brute_force(self):
        from test_volume import brute_force_sample

        v = textured_volume(8, seed=6)
        phi = random_smooth_map(8, seed=7)
        out = warp(v, phi)
        for idx in [(0, 0, 0), (4, 4, 4), (7, 0, 3), (2, 5, 6)]:
            want = brute_force_sample(v.data, phi.values[idx])
            assert out.data[idx] == pytest.approx(want, abs=1e-5)

    def test_output_grid_and_reference(self):
        v = Volume(np.zeros((8, 8, 8), dtype=np.float32), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
        like = Volume(np.zeros((5, 6, 7), dtype=np.float32), (3.0, 1.0, 2.0), (0.0, 5.0, 0.0))
        phi = identity_map((5, 6, 7))
        out = warp(v, phi, like=like)
        assert out.dims == (5, 6, 7)
        assert out.spacing == like.spacing and out.origin == like.origin
        with pytest.raises(ShapeMismatch):
            warp(v, identity_map((4, 4, 4)), like=like)

    def test_warp_compose_commutes_with_sequential_warping(self):
        n = 20
        v = textured_volume(n, seed=8, scales=((6.0, 1.0), (3.0, 0.4)))
        p = random_smooth_map(n, seed=9, sigma=5.0, max_vox=1.0)
        q = random_smooth_map(n, seed=10, sigma=5.0, max_vox=1.0)
        once = warp(v, compose(p, q))
        twice = warp(warp(v, p), q)
        assert np.abs(once.data - twice.data).max() < 0.02


class TestWarpLabels:
    def test_identity_keeps_labels(self):
        rng = np.random.default_rng(1)
        lv = LabelVolume(rng.integers(0, 4, size=(6, 6, 6)))
        assert np.array_equal(warp_labels(lv, identity_map(lv.dims)).data, lv.data)

    def test_one_voxel_shift(self):
        n = 6
        rng = np.random.default_rng(2)
        lv = LabelVolume(rng.integers(0, 4, size=(n, n, n)))
        phi = translation_map((n, n, n), (1.0 / (n - 1), 0, 0))
        out = warp_labels(lv, phi)
        assert np.array_equal(out.data[:-1], lv.data[1:])

    def test_random_map_matches_nearest_lookup(self):
        rng = np.random.default_rng(3)
        lv = LabelVolume(rng.integers(0, 5, size=(8, 8, 8)))
        phi = random_smooth_map(8, seed=11)
        out = warp_labels(lv, phi)
        for idx in [(0, 0, 0), (3, 3, 3), (7, 2, 6), (1, 5, 4)]:
            q = np.clip(phi.values[idx].astype(np.float64), 0, 1)
            nearest = tuple(int(round(q[c] * 7)) for c in range(3))
            assert out.data[idx] == lv.data[nearest]


class TestJacobian:
    def test_linear_map_recovers_matrix(self):
        n = 9
        a = np.array([[1.05, 0.02, 0.0], [0.0, 0.95, 0.03], [0.01, 0.0, 1.0]])
        idv = identity_values((n, n, n)).astype(np.float64)
        vals = np.einsum("rc,xyzc->xyzr", a, idv)
        phi = TransformMap(vals.astype(np.float32))
        jac = jacobian_field(phi)
        assert np.abs(jac - a).max() < 1e-4

    def test_random_map_matches_difference_quotients(self):
        phi = random_smooth_map(5, seed=12, sigma=1.0, max_vox=0.8)
        jac = jacobian_field(phi)
        vals = phi.values.astype(np.float64)
        h = 1.0 / 4.0
        for i in range(1, 4):
            for j in range(1, 4):
                for k in range(1, 4):
                    want = np.empty((3, 3))
                    want[:, 0] = (vals[i + 1, j, k] - vals[i - 1, j, k]) / (2 * h)
                    want[:, 1] = (vals[i, j + 1, k] - vals[i, j - 1, k]) / (2 * h)
                    want[:, 2] = (vals[i, j, k + 1] - vals[i, j, k - 1]) / (2 * h)
                    assert np.abs(jac[i - 1, j - 1, k - 1] - want).max() < 1e-3

    def test_translation_has_no_folding(self):
        phi = translation_map((7, 7, 7), (0.08, -0.02, 0.01))
        assert neg_jacobian_fraction(phi) == 0.0

    def test_constructed_fold_fraction_matches_enumeration(self):
        n = 9
        vals = np.array(identity_values((n, n, n)))
        # reflect the x component inside a sub-block to create folds
        block = (slice(2, 7), slice(2, 7), slice(2, 7))
        vals[block + (0,)] = 1.0 - vals[block + (0,)]
        phi = TransformMap(vals)
        got = neg_jacobian_fraction(phi)
        # brute force: central-difference jacobian determinant at all
        # interior nodes, computed longhand
        v64 = vals.astype(np.float64)
        count = 0
        total = 0
        for i in range(1, n - 1):
            for j in range(1, n - 1):
                for k in range(1, n - 1):
                    jac = np.empty((3, 3))
                    jac[:, 0] = (v64[i + 1, j, k] - v64[i - 1, j, k]) * (n - 1) / 2
                    jac[:, 1] = (v64[i, j + 1, k] - v64[i, j - 1, k]) * (n - 1) / 2
                    jac[:, 2] = (v64[i, j, k + 1] - v64[i, j, k - 1]) * (n - 1) / 2
                    det = np.linalg.det(jac)
                    total += 1
                    count += det < 0
        assert total == 343
        assert got == pytest.approx(count / total, abs=1e-12)


class TestResizeMap:
    def test_identity_survives_resize_bit_exact(self):
        out = resize_map(identity_map((8, 8, 8)), (13, 9, 11))
        assert np.array_equal(out.values, identity_values((13, 9, 11)))

    def test_translation_survives_resize(self):
        phi = translation_map((8, 8, 8), (0.07, -0.03, 0.02))
        out = resize_map(phi, (15, 15, 15))
        want = identity_values((15, 15, 15)) + np.array([0.07, -0.03, 0.02], np.float32)
        assert np.abs(out.values - want).max() < 1e-6


class TestMapInvariants:
    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeMismatch):
            TransformMap(np.zeros((4, 4, 4, 2), dtype=np.float32))

    def test_rejects_nonfinite(self):
        vals = np.array(identity_values((4, 4, 4)))
        vals[0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            TransformMap(vals)

    def test_jacobian_requires_dims_three(self):
        with pytest.raises(ShapeMismatch):
            jacobian_field(identity_map((2, 4, 4)))
