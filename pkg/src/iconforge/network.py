"""Two-step multi-resolution registration predictor.

Step one runs three identical UNets coarse-to-fine on inputs pooled to 1/4,
1/2 and full canonical resolution; each level sees the moving image warped
by the map so far plus the target image, and its displacement output is
composed onto the running map. Step two refines with a fourth UNet at full
resolution. All four UNets share one architecture.

Each UNet emits a displacement that is scaled by ``gain_voxels / (side-1)``
and added to the identity, so raw network outputs stay O(1) while allowing
multi-voxel motion. The final layer of every UNet is zero-initialized,
which makes a freshly created model the exact identity transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tape, Var
from .errors import ShapeMismatch
from .transform import TransformMap, identity_values
from .volume import Volume

LEAKY_ALPHA = 0.2
LEVEL_PREFIXES = ("level1", "level2", "level3")
REFINE_PREFIX = "refine"


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 2
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")


def _conv_shapes(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(name, c_in, c_out) for every convolution of one UNet, in order."""
    shapes = []
    ch = [cfg.base_channels * (2 ** l) for l in range(cfg.depth + 1)]
    c_prev = cfg.in_channels
    for l in range(cfg.depth):
        shapes.append((f"enc{l}", c_prev, ch[l]))
        c_prev = ch[l]
    shapes.append(("bottleneck", ch[cfg.depth - 1], ch[cfg.depth]))
    c_prev = ch[cfg.depth]
    for l in range(cfg.depth - 1, -1, -1):
        shapes.append((f"dec{l}", c_prev + ch[l], ch[l]))
        c_prev = ch[l]
    shapes.append(("out", c_prev, cfg.out_channels))
    return shapes


def init_unet_params(store: ParamStore, prefix: str, cfg: UNetConfig, rng: np.random.Generator) -> None:
    """He-style random weights; the output layer starts at exactly zero."""
    gain = np.sqrt(2.0 / (1.0 + LEAKY_ALPHA ** 2))
    for name, c_in, c_out in _conv_shapes(cfg):
        full = f"{prefix}.{name}"
        if name == "out":
            w = np.zeros((c_out, c_in, 3, 3, 3), dtype=np.float32)
        else:
            std = gain / np.sqrt(c_in * 27.0)
            w = rng.normal(0.0, std, size=(c_out, c_in, 3, 3, 3)).astype(np.float32)
        store.add(f"{full}.w", w)
        store.add(f"{full}.b", np.zeros(c_out, dtype=np.float32))


def unet_forward(tape: Tape, store: ParamStore, prefix: str, x: Var, cfg: UNetConfig) -> Var:
    """Encoder/decoder with concatenated skips; input (C,X,Y,Z), output (3,X,Y,Z)."""

    def conv(name: str, inp: Var) -> Var:
        w = tape.param(store, f"{prefix}.{name}.w")
        b = tape.param(store, f"{prefix}.{name}.b")
        return tape.conv3d(inp, w, b)

    skips = []
    h = x
    for l in range(cfg.depth):
        h = tape.leaky_relu(conv(f"enc{l}", h), LEAKY_ALPHA)
        skips.append(h)
        h = tape.avg_pool2x(h)
    h = tape.leaky_relu(conv("bottleneck", h), LEAKY_ALPHA)
    for l in range(cfg.depth - 1, -1, -1):
        skip = skips[l]
        h = tape.resize3(h, skip.value.shape[1:], channels_first=True)
        h = tape.concat_channels([h, skip])
        h = tape.leaky_relu(conv(f"dec{l}", h), LEAKY_ALPHA)
    return conv("out", h)


@dataclass
class RegistrationModel:
    """Four shared-architecture UNets plus prediction-time configuration."""

    store: ParamStore
    config: UNetConfig
    side: int
    gain_voxels: float = 10.0
    step2_enabled: bool = False
    phase: int = 1
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, side: int, config: UNetConfig = UNetConfig(), seed: int = 0,
               gain_voxels: float = 10.0) -> "RegistrationModel":
        store = ParamStore()
        rng = np.random.default_rng(seed)
        for prefix in LEVEL_PREFIXES + (REFINE_PREFIX,):
            init_unet_params(store, prefix, config, rng)
        model = cls(store=store, config=config, side=int(side), gain_voxels=float(gain_voxels))
        model.set_phase(1)
        return model

    @property
    def output_gain(self) -> float:
        return self.gain_voxels / (self.side - 1)

    def set_phase(self, phase: int, freeze_step1: bool = True) -> None:
        """Phase 1 trains the three level nets with step two disabled; phase 2
        enables the refinement net and by default freezes the level nets."""
        if phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {phase}")
        self.phase = phase
        if phase == 1:
            self.step2_enabled = False
            for p in LEVEL_PREFIXES:
                self.store.set_trainable(p, True)
            self.store.set_trainable(REFINE_PREFIX, False)
        else:
            self.step2_enabled = True
            for p in LEVEL_PREFIXES:
                self.store.set_trainable(p, not freeze_step1)
            self.store.set_trainable(REFINE_PREFIX, True)

    def set_all_trainable(self) -> None:
        for p in LEVEL_PREFIXES + (REFINE_PREFIX,):
            self.store.set_trainable(p, True)

    def clone(self) -> "RegistrationModel":
        return RegistrationModel(
            store=self.store.clone(), config=self.config, side=self.side,
            gain_voxels=self.gain_voxels, step2_enabled=self.step2_enabled,
            phase=self.phase, epoch=self.epoch, extra=dict(self.extra),
        )

    def predict(self, ia: Volume, ib: Volume) -> TransformMap:
        """Zero-shot map from A onto B's space (no gradients recorded)."""
        tape = Tape()
        va = tape.input(ia.data)
        vb = tape.input(ib.data)
        out = predict_full(tape, self, va, vb)
        return TransformMap(np.ascontiguousarray(out.value))


def _resize_map_var(tape: Tape, m: Var, new_dims) -> Var:
    """Map-field resize on the tape via its displacement (identity-exact)."""
    old_dims = m.value.shape[:3]
    new_dims = tuple(int(d) for d in new_dims)
    if old_dims == new_dims:
        return m
    disp = tape.add_const(m, -identity_values(old_dims))
    disp = tape.resize3(disp, new_dims, channels_first=False)
    return tape.add_const(disp, identity_values(new_dims))


def predict_level(tape: Tape, model: RegistrationModel, prefix: str,
                  moving_warped: Var, target: Var) -> Var:
    """One UNet application: displacement added to the identity map.

    Inputs are two scalar images on the same grid; output is the map value
    field (X,Y,Z,3) on that grid.
    """
    if moving_warped.value.shape != target.value.shape:
        raise ShapeMismatch(
            f"level inputs differ: {moving_warped.value.shape} vs {target.value.shape}")
    x = tape.stack_channels(moving_warped, target)
    u = unet_forward(tape, model.store, prefix, x, model.config)
    u = tape.scale(u, model.output_gain)
    disp = tape.to_channel_last(u)
    return tape.add_const(disp, identity_values(disp.value.shape[:3]))


def predict_multires(tape: Tape, model: RegistrationModel, ia: Var, ib: Var) -> Var:
    """Step one: coarse-to-fine composition over 1/4, 1/2, full resolution."""
    if ia.value.shape != ib.value.shape:
        raise ShapeMismatch(f"image shapes differ: {ia.value.shape} vs {ib.value.shape}")
    full_dims = ia.value.shape
    ia_half, ib_half = tape.avg_pool2x(ia), tape.avg_pool2x(ib)
    ia_quarter, ib_quarter = tape.avg_pool2x(ia_half), tape.avg_pool2x(ib_half)
    pyramid = [(ia_quarter, ib_quarter), (ia_half, ib_half), (ia, ib)]
    phi = tape.input(identity_values(full_dims))
    for prefix, (mov, tgt) in zip(LEVEL_PREFIXES, pyramid):
        phi_level = _resize_map_var(tape, phi, mov.value.shape)
        warped = tape.warp_image(mov, phi_level)
        psi_level = predict_level(tape, model, prefix, warped, tgt)
        psi = _resize_map_var(tape, psi_level, full_dims)
        phi = tape.compose_maps(phi, psi)
    return phi


def predict_full(tape: Tape, model: RegistrationModel, ia: Var, ib: Var) -> Var:
    """Both steps; returns the map value field on the canonical grid.

    The reverse-direction map is obtained by calling this with the images
    swapped; the same parameters serve both directions.
    """
    phi1 = predict_multires(tape, model, ia, ib)
    if not model.step2_enabled:
        return phi1
    warped = tape.warp_image(ia, phi1)
    psi2 = predict_level(tape, model, REFINE_PREFIX, warped, ib)
    return tape.compose_maps(phi1, psi2)
