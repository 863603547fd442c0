"""Dense transformation maps: composition, warping, Jacobians.

A :class:`TransformMap` stores, at every node ``x`` of its grid, the
normalized coordinate ``phi(x)`` in the source space (pull-back convention:
the warped image is ``I o phi``, i.e. the output at ``x`` samples ``I`` at
``phi(x)``).

Maps are evaluated off-node by trilinear interpolation of the value field.
Internally this is done on the displacement ``phi - identity`` with the
identity added back analytically, and exact node hits copy stored values.
Consequences, all exact in float32: the identity map composes as a true
neutral element, a zero-displacement prediction is the identity, and the
Jacobian of the identity is the identity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ShapeMismatch
from .volume import (
    Dims,
    LabelVolume,
    Volume,
    axis_coords,
    index_coords,
    resize_grid,
    sample_grid,
)


@lru_cache(maxsize=32)
def _identity_values_cached(dims: Dims) -> np.ndarray:
    vals = np.empty(dims + (3,), dtype=np.float32)
    vals[..., 0] = axis_coords(dims[0])[:, None, None]
    vals[..., 1] = axis_coords(dims[1])[None, :, None]
    vals[..., 2] = axis_coords(dims[2])[None, None, :]
    vals.setflags(write=False)
    return vals


def identity_values(dims: Sequence[int]) -> np.ndarray:
    """Node coordinates of the identity map, shape ``dims + (3,)`` (read-only)."""
    return _identity_values_cached(tuple(int(n) for n in dims))


@dataclass(frozen=True)
class TransformMap:
    """A dense map on a node grid; ``values[i,j,k]`` is phi at that node."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeMismatch(f"map values must have shape (nx,ny,nz,3), got {arr.shape}")
        if any(n < 2 for n in arr.shape[:3]):
            raise ShapeMismatch(f"map dims must be >= 2, got {arr.shape[:3]}")
        if not np.isfinite(arr).all():
            raise ValueError("map values contain non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dims(self) -> Dims:
        return self.values.shape[:3]  # type: ignore[return-value]

    def displacement(self) -> np.ndarray:
        """``values - identity`` in float32 (exactly zero for the identity)."""
        return self.values - identity_values(self.dims)


def identity_map(dims: Sequence[int]) -> TransformMap:
    return TransformMap(identity_values(dims))


def evaluate_map(phi: TransformMap, q: np.ndarray) -> np.ndarray:
    """Evaluate the map at normalized coordinates ``q`` of shape (..., 3).

    Off-node evaluation interpolates the displacement field and adds the
    (clamped) query back, so identity maps return the query exactly; node
    hits return stored values exactly. Returns float64.
    """
    q64 = np.asarray(q, dtype=np.float64)
    disp = sample_grid(phi.displacement(), q64)
    out = np.clip(q64, 0.0, 1.0) + disp
    i0, w, _ = index_coords(q64, phi.dims)
    node = ((w == 0.0) | (w == 1.0)).all(axis=-1)
    if np.any(node):
        ii = i0 + (w == 1.0)
        exact = phi.values[ii[..., 0], ii[..., 1], ii[..., 2]]
        out = np.where(node[..., None], exact, out)
    return out


def compose(outer: TransformMap, inner: TransformMap) -> TransformMap:
    """``(outer o inner)(x) = outer(inner(x))``, on the inner map's grid."""
    vals = evaluate_map(outer, inner.values)
    return TransformMap(vals.astype(np.float32))


def warp(v: Volume, phi: TransformMap, like: Volume | None = None) -> Volume:
    """Pull-back warp: output node ``x`` holds ``v`` sampled at ``phi(x)``.

    The output adopts ``phi``'s grid. Spacing/origin come from ``like``
    (typically the target image); without one, spacing is rescaled so the
    physical extent of ``v`` is preserved.
    """
    data = sample_grid(v.data, phi.values).astype(np.float32)
    if like is not None:
        if like.dims != phi.dims:
            raise ShapeMismatch(f"reference dims {like.dims} != map dims {phi.dims}")
        return Volume(data, like.spacing, like.origin)
    spacing = tuple(
        s * (n_old - 1) / (n_new - 1) for s, n_old, n_new in zip(v.spacing, v.dims, phi.dims)
    )
    return Volume(data, spacing, v.origin)


def warp_labels(lv: LabelVolume, phi: TransformMap, like: Volume | LabelVolume | None = None) -> LabelVolume:
    """Nearest-neighbor pull-back of a label volume (no label mixing)."""
    i0, w, _ = index_coords(phi.values, lv.dims)
    nearest = i0 + (w >= 0.5)
    data = lv.data[nearest[..., 0], nearest[..., 1], nearest[..., 2]]
    if like is not None:
        if like.dims != phi.dims:
            raise ShapeMismatch(f"reference dims {like.dims} != map dims {phi.dims}")
        return LabelVolume(data, like.spacing, like.origin)
    spacing = tuple(
        s * (n_old - 1) / (n_new - 1) for s, n_old, n_new in zip(lv.spacing, lv.dims, phi.dims)
    )
    return LabelVolume(data, spacing, lv.origin)


def resize_map(phi: TransformMap, new_dims: Sequence[int]) -> TransformMap:
    """Resample the map onto another grid over the same normalized cube.

    The displacement field is trilinearly resized and the identity re-added,
    so identity maps stay identity bit-exactly at any resolution.
    """
    nd = tuple(int(n) for n in new_dims)
    if nd == phi.dims:
        return phi
    disp = resize_grid(phi.displacement(), nd)
    vals = identity_values(nd).astype(np.float64) + disp
    return TransformMap(vals.astype(np.float32))


def jacobian_field(phi: TransformMap) -> np.ndarray:
    """Jacobian matrices at interior nodes, shape ``(nx-2, ny-2, nz-2, 3, 3)``.

    Central differences of the map values in normalized coordinates;
    computed on the displacement with the identity added analytically, so
    the identity map yields exact identity matrices. The boundary layer is
    excluded.
    """
    if any(n < 3 for n in phi.dims):
        raise ShapeMismatch(f"jacobian needs dims >= 3, got {phi.dims}")
    disp = phi.displacement().astype(np.float64)
    jac = np.zeros(tuple(n - 2 for n in phi.dims) + (3, 3), dtype=np.float64)
    for c in range(3):
        h = 1.0 / (phi.dims[c] - 1)
        hi = [slice(1, n - 1) for n in phi.dims]
        lo = [slice(1, n - 1) for n in phi.dims]
        hi[c] = slice(2, phi.dims[c])
        lo[c] = slice(0, phi.dims[c] - 2)
        diff = (disp[tuple(hi)] - disp[tuple(lo)]) / (2.0 * h)
        jac[..., :, c] = diff
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    return jac


def neg_jacobian_fraction(phi: TransformMap) -> float:
    """Fraction of interior nodes whose Jacobian determinant is negative."""
    det = np.linalg.det(jacobian_field(phi))
    return float(np.count_nonzero(det < 0.0) / det.size)
