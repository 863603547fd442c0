import numpy as np
import pytest

from helpers import textured_volume
from iconforge.autodiff import Tape
from iconforge.loss import LossConfig, lncc_similarity, total_loss
from iconforge.network import (
    LEAKY_ALPHA,
    LEVEL_PREFIXES,
    REFINE_PREFIX,
    RegistrationModel,
    UNetConfig,
    predict_full,
    predict_level,
    predict_multires,
    _conv_shapes,
)
from iconforge.transform import TransformMap, compose, identity_map, identity_values, resize_map, warp
from iconforge.volume import Volume


# ---------------------------------------------------------------------------
# independent naive UNet forward (plain loops, no tape machinery)
# ---------------------------------------------------------------------------

def naive_conv3d(x, w, b):
    c_out = w.shape[0]
    out = np.zeros((c_out,) + x.shape[1:], dtype=np.float64)
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1), (1, 1)))
    for o in range(c_out):
        acc = np.zeros(x.shape[1:], dtype=np.float64)
        for c in range(x.shape[0]):
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        acc += w[o, c, i, j, k] * xp[c, i:i + x.shape[1],
                                                     j:j + x.shape[2], k:k + x.shape[3]]
        out[o] = acc + b[o]
    return out


def naive_lrelu(x):
    return np.where(x >= 0, x, LEAKY_ALPHA * x)


def naive_pool(x):
    dims = [max(1, n // 2) for n in x.shape[1:]]
    crop = [d * (2 if n >= 2 else 1) for d, n in zip(dims, x.shape[1:])]
    v = x[:, :crop[0], :crop[1], :crop[2]]
    f = [2 if n >= 2 else 1 for n in x.shape[1:]]
    return v.reshape(x.shape[0], dims[0], f[0], dims[1], f[1], dims[2], f[2]).mean(axis=(2, 4, 6))


def naive_resize(x, new_dims):
    from iconforge.volume import resize_grid

    return np.stack([resize_grid(x[c], new_dims) for c in range(x.shape[0])])


def naive_unet(store, prefix, x, cfg):
    skips = []
    h = x.astype(np.float64)
    for l in range(cfg.depth):
        h = naive_lrelu(naive_conv3d(h, store.get(f"{prefix}.enc{l}.w"), store.get(f"{prefix}.enc{l}.b")))
        skips.append(h)
        h = naive_pool(h)
    h = naive_lrelu(naive_conv3d(h, store.get(f"{prefix}.bottleneck.w"), store.get(f"{prefix}.bottleneck.b")))
    for l in range(cfg.depth - 1, -1, -1):
        h = naive_resize(h, skips[l].shape[1:])
        h = np.concatenate([h, skips[l]], axis=0)
        h = naive_lrelu(naive_conv3d(h, store.get(f"{prefix}.dec{l}.w"), store.get(f"{prefix}.dec{l}.b")))
    return naive_conv3d(h, store.get(f"{prefix}.out.w"), store.get(f"{prefix}.out.b"))


def randomized_model(side, cfg, seed, scale=0.05, step2=True):
    model = RegistrationModel.create(side=side, config=cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name in model.store.names():
        model.store.set(name, rng.normal(0, scale, model.store.get(name).shape).astype(np.float32))
    if step2:
        model.set_phase(2, freeze_step1=False)
    return model


class TestIdentityInitialization:
    def test_fresh_model_is_exact_identity(self):
        model = RegistrationModel.create(side=12, config=UNetConfig(base_channels=2), seed=0)
        a = textured_volume(12, seed=1)
        b = textured_volume(12, seed=2)
        phi = model.predict(a, b)
        assert np.array_equal(phi.values, identity_values((12, 12, 12)))
        model.set_phase(2)
        phi2 = model.predict(a, b)
        assert np.array_equal(phi2.values, identity_values((12, 12, 12)))

    def test_zero_gain_is_identity_regardless_of_weights(self):
        model = randomized_model(10, UNetConfig(depth=2, base_channels=2), seed=3)
        model.gain_voxels = 0.0
        a = textured_volume(10, seed=4)
        b = textured_volume(10, seed=5)
        assert np.array_equal(model.predict(a, b).values, identity_values((10, 10, 10)))

    def test_identity_model_closed_form_loss(self):
        sharp = ((1.5, 1.0), (0.8, 0.6))
        a = textured_volume(10, seed=6, scales=sharp)
        b = textured_volume(10, seed=7, scales=sharp)
        model = RegistrationModel.create(side=10, config=UNetConfig(base_channels=2), seed=0)
        phi_ab = model.predict(a, b)
        phi_ba = model.predict(b, a)
        bd = total_loss(a, b, phi_ab, phi_ba)
        assert bd.sim_ab == pytest.approx(lncc_similarity(a, b), abs=1e-9)
        assert bd.sim_ba == pytest.approx(lncc_similarity(b, a), abs=1e-9)
        assert bd.reg == 0.0


class TestPredictLevel:
    def test_displacement_bounded_by_gain_times_activation(self):
        n = 8
        cfg = UNetConfig(depth=2, base_channels=2)
        model = randomized_model(n, cfg, seed=8)
        a = textured_volume(n, seed=9)
        b = textured_volume(n, seed=10)
        tape = Tape()
        va, vb = tape.input(a.data), tape.input(b.data)
        psi = predict_level(tape, model, "level1", va, vb)
        u_raw = naive_unet(model.store, "level1", np.stack([a.data, b.data]), cfg)
        disp = psi.value - identity_values((n, n, n))
        assert np.abs(disp).max() <= model.output_gain * np.abs(u_raw).max() + 1e-6

    def test_matches_naive_forward_evaluation(self):
        n = 8
        cfg = UNetConfig(depth=2, base_channels=2)
        model = randomized_model(n, cfg, seed=11)
        a = textured_volume(n, seed=12)
        b = textured_volume(n, seed=13)
        tape = Tape()
        psi = predict_level(tape, model, "level2", tape.input(a.data), tape.input(b.data))
        u = naive_unet(model.store, "level2", np.stack([a.data, b.data]), cfg)
        want = identity_values((n, n, n)) + model.output_gain * np.moveaxis(u, 0, 3)
        assert np.abs(psi.value - want).max() < 1e-4

    def test_shape_mismatch(self):
        model = RegistrationModel.create(side=8, config=UNetConfig(depth=1, base_channels=1), seed=0)
        tape = Tape()
        from iconforge.errors import ShapeMismatch

        with pytest.raises(ShapeMismatch):
            predict_level(tape, model, "level1",
                          tape.input(np.zeros((8, 8, 8), dtype=np.float32)),
                          tape.input(np.zeros((6, 6, 6), dtype=np.float32)))


class TestMultiResolution:
    def test_matches_manual_recursion(self):
        n = 16
        cfg = UNetConfig(depth=2, base_channels=2)
        model = randomized_model(n, cfg, seed=14, step2=False)
        a = textured_volume(n, seed=15)
        b = textured_volume(n, seed=16)
        tape = Tape()
        got = predict_multires(tape, model, tape.input(a.data), tape.input(b.data))

        # independent re-run with explicit intermediate dumps through the
        # public volume/transform operations
        def pool_vol(v):
            t = Tape()
            return Volume(t.avg_pool2x(t.input(v.data)).value)

        a_h, b_h = pool_vol(a), pool_vol(b)
        a_q, b_q = pool_vol(a_h), pool_vol(b_h)
        phi = identity_map((n, n, n))
        for prefix, (mov, tgt) in zip(LEVEL_PREFIXES, [(a_q, b_q), (a_h, b_h), (a, b)]):
            phi_level = resize_map(phi, mov.dims)
            warped = warp(mov, phi_level)
            u = naive_unet(model.store, prefix, np.stack([warped.data, tgt.data]), cfg)
            psi_vals = identity_values(mov.dims) + model.output_gain * np.moveaxis(u, 0, 3)
            psi = resize_map(TransformMap(psi_vals.astype(np.float32)), (n, n, n))
            phi = compose(phi, psi)
        assert np.abs(got.value - phi.values).max() < 2e-4

    def test_coarsest_constant_displacement_becomes_translation(self):
        n = 16
        cfg = UNetConfig(depth=1, base_channels=1)
        model = RegistrationModel.create(side=n, config=cfg, seed=0)
        # only the coarsest level emits a constant displacement (via bias)
        t_norm = 2.0 / (n - 1)  # two voxels, in-grid over most of the cube
        model.store.set("level1.out.b", np.array([t_norm, 0, 0], dtype=np.float32) / model.output_gain)
        a = textured_volume(n, seed=17)
        b = textured_volume(n, seed=18)
        phi = model.predict(a, b)
        want = identity_values((n, n, n)).copy()
        want[..., 0] += t_norm
        # translation survives upsampling/composition wherever it stays in-grid
        core = (slice(0, n - 3), slice(0, n), slice(0, n))
        assert np.abs(phi.values[core] - want[core]).max() < 1e-5


class TestPredictFull:
    def test_step2_composition_matches_manual(self):
        n = 12
        cfg = UNetConfig(depth=2, base_channels=2)
        model = randomized_model(n, cfg, seed=19)
        a = textured_volume(n, seed=20)
        b = textured_volume(n, seed=21)
        tape = Tape()
        got = predict_full(tape, model, tape.input(a.data), tape.input(b.data))

        t2 = Tape()
        phi1_var = predict_multires(t2, model, t2.input(a.data), t2.input(b.data))
        phi1 = TransformMap(np.ascontiguousarray(phi1_var.value))
        warped = warp(Volume(a.data), phi1)
        u = naive_unet(model.store, REFINE_PREFIX, np.stack([warped.data, b.data]), cfg)
        psi2 = TransformMap((identity_values((n, n, n))
                             + model.output_gain * np.moveaxis(u, 0, 3)).astype(np.float32))
        want = compose(phi1, psi2)
        assert np.abs(got.value - want.values).max() < 2e-4

    def test_step2_disabled_returns_step1(self):
        n = 12
        model = randomized_model(n, UNetConfig(depth=2, base_channels=2), seed=22, step2=False)
        a = textured_volume(n, seed=23)
        b = textured_volume(n, seed=24)
        t1 = Tape()
        full = predict_full(t1, model, t1.input(a.data), t1.input(b.data))
        t2 = Tape()
        step1 = predict_multires(t2, model, t2.input(a.data), t2.input(b.data))
        assert np.array_equal(full.value, step1.value)

    def test_weight_sharing_across_directions(self):
        n = 10
        model = randomized_model(n, UNetConfig(depth=1, base_channels=1), seed=25)
        a = textured_volume(n, seed=26)
        b = textured_volume(n, seed=27)
        tape = Tape()
        predict_full(tape, model, tape.input(a.data), tape.input(b.data))
        predict_full(tape, model, tape.input(b.data), tape.input(a.data))
        stores = {id(store) for store, _ in tape._param_leaves.values()}
        assert stores == {id(model.store)}

    def test_finite_outputs_for_finite_inputs(self):
        model = randomized_model(10, UNetConfig(depth=3, base_channels=2), seed=28, scale=0.5)
        a = textured_volume(10, seed=29)
        b = textured_volume(10, seed=30)
        phi = model.predict(a, b)
        assert np.isfinite(phi.values).all()

    def test_odd_canonical_side(self):
        # 15 pools to 7, 3, 1; resizes must still hit the exact grids
        model = randomized_model(15, UNetConfig(depth=3, base_channels=2), seed=31)
        a = textured_volume(15, seed=32)
        b = textured_volume(15, seed=33)
        phi = model.predict(a, b)
        assert phi.dims == (15, 15, 15)


class TestModelConfig:
    def test_conv_shapes_channel_plan(self):
        cfg = UNetConfig(depth=3, base_channels=8)
        shapes = dict((n, (i, o)) for n, i, o in _conv_shapes(cfg))
        assert shapes["enc0"] == (2, 8)
        assert shapes["enc2"] == (16, 32)
        assert shapes["bottleneck"] == (32, 64)
        assert shapes["dec2"] == (96, 32)
        assert shapes["dec0"] == (24, 8)
        assert shapes["out"] == (8, 3)

    def test_phase_semantics(self):
        model = RegistrationModel.create(side=8, config=UNetConfig(depth=1, base_channels=1), seed=0)
        model.set_phase(1)
        assert not model.step2_enabled
        assert model.store.trainable["level1.out.w"]
        assert not model.store.trainable["refine.out.w"]
        model.set_phase(2)
        assert model.step2_enabled
        assert not model.store.trainable["level1.out.w"]
        assert model.store.trainable["refine.out.w"]
        model.set_phase(2, freeze_step1=False)
        assert model.store.trainable["level1.out.w"]

    def test_out_layer_zero_initialized_everything_else_not(self):
        model = RegistrationModel.create(side=8, config=UNetConfig(depth=2, base_channels=2), seed=0)
        for prefix in LEVEL_PREFIXES + (REFINE_PREFIX,):
            assert np.all(model.store.get(f"{prefix}.out.w") == 0.0)
            assert np.all(model.store.get(f"{prefix}.out.b") == 0.0)
            assert np.abs(model.store.get(f"{prefix}.enc0.w")).max() > 0.0
