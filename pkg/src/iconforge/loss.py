"""Bidirectional similarity plus gradient inverse-consistency regularization.

The training objective for an ordered pair ``(I_A, I_B)`` with predicted
maps ``phi_AB`` and ``phi_BA`` is::

    sim(I_A o phi_AB, I_B) + sim(I_B o phi_BA, I_A)
        + lam * mean_interior || J(phi_AB o phi_BA) - I ||_F^2

where ``sim`` is 1 minus windowed normalized cross correlation averaged
over voxels, and ``J`` is a forward-difference Jacobian of the composed map
in normalized coordinates.

The kernels in this module compute values in float64 and carry hand-derived
adjoints. The windowed moving sums use boundary-clipped box windows, whose
linear operator is symmetric, so the same box sum implements its own
transpose in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .transform import TransformMap, compose, identity_values, warp
from .volume import Volume


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters; ``lam`` weighs the inverse-consistency term."""

    lam: float = 1.5
    lncc_radius: int = 2
    variance_epsilon: float = 1e-5

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.lncc_radius < 1:
            raise ValueError("lncc_radius must be >= 1")
        if self.variance_epsilon <= 0:
            raise ValueError("variance_epsilon must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    sim_ab: float
    sim_ba: float
    reg: float
    total: float

    @classmethod
    def build(cls, sim_ab: float, sim_ba: float, reg: float, lam: float) -> "LossBreakdown":
        total = float(sim_ab) + float(sim_ba) + float(lam) * float(reg)
        return cls(float(sim_ab), float(sim_ba), float(reg), total)

    def as_dict(self) -> dict[str, float]:
        return {"sim_ab": self.sim_ab, "sim_ba": self.sim_ba, "reg": self.reg, "total": self.total}


# ---------------------------------------------------------------------------
# box sums (boundary-clipped, separable, self-adjoint)
# ---------------------------------------------------------------------------

def _box_sum_axis(x: np.ndarray, axis: int, r: int) -> np.ndarray:
    n = x.shape[axis]
    c = np.cumsum(x, axis=axis, dtype=np.float64)
    zero_shape = list(x.shape)
    zero_shape[axis] = 1
    c = np.concatenate([np.zeros(zero_shape, dtype=np.float64), c], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + r, n - 1) + 1
    lo = np.maximum(idx - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def box_sum(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over the clipped box window of radius ``r`` around each voxel."""
    out = np.asarray(x, dtype=np.float64)
    for axis in range(3):
        out = _box_sum_axis(out, axis, r)
    return out


def window_counts(dims, r: int) -> np.ndarray:
    axes = []
    for n in dims:
        idx = np.arange(n)
        axes.append(np.minimum(idx + r, n - 1) - np.maximum(idx - r, 0) + 1.0)
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


# ---------------------------------------------------------------------------
# LNCC kernel
# ---------------------------------------------------------------------------

def lncc_forward(a: np.ndarray, b: np.ndarray, radius: int, eps: float):
    """Returns ``(value, saved)``; value is 1 - mean windowed correlation.

    Per-window correlation is ``cov / sqrt((var_a + eps)(var_b + eps))``;
    windows where both variances fall below ``eps`` contribute 0.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    cnt = window_counts(a64.shape, radius)
    ma = box_sum(a64, radius) / cnt
    mb = box_sum(b64, radius) / cnt
    raw_va = box_sum(a64 * a64, radius) / cnt - ma * ma
    raw_vb = box_sum(b64 * b64, radius) / cnt - mb * mb
    va = np.maximum(raw_va, 0.0)
    vb = np.maximum(raw_vb, 0.0)
    cov = box_sum(a64 * b64, radius) / cnt - ma * mb
    denom = np.sqrt((va + eps) * (vb + eps))
    corr = cov / denom
    dead = (va < eps) & (vb < eps)  # near-constant windows carry no signal
    corr = np.where(dead, 0.0, corr)
    value = 1.0 - float(corr.mean())
    saved = (a64, b64, ma, mb, raw_va, raw_vb, va, vb, corr, denom, dead, cnt, radius, eps)
    return value, saved


def lncc_backward(saved, g: float) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of ``lncc_forward`` w.r.t. both images (float64 arrays)."""
    a64, b64, ma, mb, raw_va, raw_vb, va, vb, corr, denom, dead, cnt, radius, eps = saved
    n_vox = a64.size
    gcorr = np.where(dead, 0.0, -g / n_vox)
    gcov = gcorr / denom
    gva = -0.5 * gcorr * corr / (va + eps)
    gvb = -0.5 * gcorr * corr / (vb + eps)
    # the max(var, 0) clamp has zero slope where the raw variance was negative
    gva = np.where(raw_va < 0.0, 0.0, gva)
    gvb = np.where(raw_vb < 0.0, 0.0, gvb)
    g_ma = -gcov * mb - 2.0 * ma * gva
    g_mb = -gcov * ma - 2.0 * mb * gvb
    bs = lambda arr: box_sum(arr / cnt, radius)  # box sum is self-adjoint
    grad_a = bs(g_ma) + 2.0 * a64 * bs(gva) + b64 * bs(gcov)
    grad_b = bs(g_mb) + 2.0 * b64 * bs(gvb) + a64 * bs(gcov)
    return grad_a, grad_b


def lncc_similarity(a, b, cfg: LossConfig = LossConfig()) -> float:
    """1 minus the mean windowed normalized cross correlation, in [0, 2]."""
    a_arr = a.data if isinstance(a, Volume) else np.asarray(a)
    b_arr = b.data if isinstance(b, Volume) else np.asarray(b)
    value, _ = lncc_forward(a_arr, b_arr, cfg.lncc_radius, cfg.variance_epsilon)
    return value


# ---------------------------------------------------------------------------
# inverse-consistency penalty kernel
# ---------------------------------------------------------------------------

def _interior(dims) -> tuple[slice, slice, slice]:
    return tuple(slice(1, n - 1) for n in dims)


def jacobian_penalty_forward(values: np.ndarray):
    """Mean squared Frobenius deviation of the map's Jacobian from identity.

    ``values`` is a composed map's value field, shape (nx,ny,nz,3). The
    Jacobian uses forward differences of the displacement over one grid
    cell, evaluated at interior nodes; the identity contributes exactly the
    identity matrix, so ``J - I`` is the forward-difference matrix of the
    displacement alone.
    """
    dims = values.shape[:3]
    if any(n < 3 for n in dims):
        raise ShapeMismatch(f"penalty needs dims >= 3, got {dims}")
    disp = (values - identity_values(dims)).astype(np.float64)
    core = _interior(dims)
    dmat = np.empty(tuple(n - 2 for n in dims) + (3, 3), dtype=np.float64)
    inv_h = [float(n - 1) for n in dims]
    for c in range(3):
        nxt = list(core)
        nxt[c] = slice(2, dims[c])
        dmat[..., :, c] = (disp[tuple(nxt)] - disp[core]) * inv_h[c]
    n_interior = dmat.shape[0] * dmat.shape[1] * dmat.shape[2]
    value = float(np.sum(dmat * dmat) / n_interior)
    return value, (dmat, dims, n_interior, inv_h)


def jacobian_penalty_backward(saved, g: float) -> np.ndarray:
    """Adjoint w.r.t. the composed map values, shape (nx,ny,nz,3)."""
    dmat, dims, n_interior, inv_h = saved
    grad = np.zeros(dims + (3,), dtype=np.float64)
    core = _interior(dims)
    for c in range(3):
        gd = (2.0 * g / n_interior) * dmat[..., :, c] * inv_h[c]
        nxt = list(core)
        nxt[c] = slice(2, dims[c])
        grad[tuple(nxt)] += gd
        grad[core] -= gd
    return grad


def gradicon_regularizer(phi_ab: TransformMap, phi_ba: TransformMap) -> float:
    """Inverse-consistency penalty of the composed pair of maps."""
    if phi_ab.dims != phi_ba.dims:
        raise ShapeMismatch(f"map grids differ: {phi_ab.dims} vs {phi_ba.dims}")
    comp = compose(phi_ab, phi_ba)
    value, _ = jacobian_penalty_forward(comp.values)
    return value


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

def total_loss(
    ia: Volume,
    ib: Volume,
    phi_ab: TransformMap,
    phi_ba: TransformMap,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Eq-style objective: both warped similarities plus weighted penalty."""
    if ia.dims != ib.dims:
        raise ShapeMismatch(f"image shapes differ: {ia.dims} vs {ib.dims}")
    if phi_ab.dims != ib.dims or phi_ba.dims != ia.dims:
        raise ShapeMismatch("map grids must match the image grid")
    sim_ab = lncc_similarity(warp(ia, phi_ab, like=ib), ib, cfg)
    sim_ba = lncc_similarity(warp(ib, phi_ba, like=ia), ia, cfg)
    reg = gradicon_regularizer(phi_ab, phi_ba)
    return LossBreakdown.build(sim_ab, sim_ba, reg, cfg.lam)


def loss_gradients(
    ia: Volume,
    ib: Volume,
    phi_ab: TransformMap,
    phi_ba: TransformMap,
    cfg: LossConfig = LossConfig(),
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Objective value and its gradients w.r.t. both map value fields.

    Gradients are float32 arrays of shape (nx,ny,nz,3), produced by the
    reverse-mode tape over the same kernels the forward pass uses.
    """
    from .autodiff import Tape  # local import; autodiff builds on these kernels

    tape = Tape()
    va = tape.input(phi_ab.values, requires_grad=True)
    vb = tape.input(phi_ba.values, requires_grad=True)
    img_a = tape.input(ia.data)
    img_b = tape.input(ib.data)
    sim_ab = tape.lncc_loss(tape.warp_image(img_a, va), img_b, cfg)
    sim_ba = tape.lncc_loss(tape.warp_image(img_b, vb), img_a, cfg)
    reg = tape.jacobian_penalty(tape.compose_maps(va, vb))
    total = tape.add(tape.add(sim_ab, sim_ba), tape.scale(reg, cfg.lam))
    tape.backward(total)
    breakdown = LossBreakdown.build(
        float(sim_ab.value), float(sim_ba.value), float(reg.value), cfg.lam
    )
    return breakdown, tape.grad(va), tape.grad(vb)
