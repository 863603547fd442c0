"""3D scalar grids with physical metadata and trilinear sampling.

Conventions used across the whole package:

* A volume of shape ``(nx, ny, nz)`` is stored C-ordered, so the z index
  varies fastest in memory.  Element ``data[i, j, k]`` is the voxel value at
  integer grid position ``(i, j, k)``.
* Normalized coordinates: the center of voxel ``i`` along an axis with ``n``
  voxels sits at ``i / (n - 1)``, so the grid spans the unit cube ``[0, 1]^3``.
  Off-grid queries are legal and resolved by clamping to the boundary
  (border replicate) before interpolation.
* Physical coordinates: voxel ``(i, j, k)`` has position
  ``origin + spacing * (i, j, k)`` in mm.
* Voxel data is stored in float32; reductions and interpolation weights are
  accumulated in float64.

Queries whose coordinate is bit-identical to a stored node coordinate are
resolved as exact node hits (weight 0 or 1) even though the float32
round-trip ``i/(n-1) * (n-1)`` does not reproduce the integer index. This
makes no-op operations (identity warps, same-shape resampling, composition
with the identity either way) reproduce stored values bit-exactly without
perturbing any genuinely off-node query.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeMismatch

# Snap radius for node-grid resampling matrices, in voxels. Must exceed the
# float64 round-trip error of i/(n-1) * (n-1); far below any real offset.
SNAP_EPS = 1e-9

Dims = tuple[int, int, int]
Triple = tuple[float, float, float]


def _as_triple(x: Iterable[float]) -> Triple:
    t = tuple(float(v) for v in x)
    if len(t) != 3:
        raise ShapeMismatch(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


def axis_coords(n: int) -> np.ndarray:
    """Normalized node coordinates of an axis with ``n`` voxels (float32)."""
    return (np.arange(n, dtype=np.float64) / (n - 1)).astype(np.float32)


@dataclass(frozen=True)
class Volume:
    """An immutable 3D scalar grid with spacing (mm/voxel) and origin (mm)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"volume data must be 3D, got shape {arr.shape}")
        if any(n < 2 for n in arr.shape):
            raise ShapeMismatch(f"all dims must be >= 2, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains non-finite values")
        spacing = _as_triple(self.spacing)
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def extent_mm(self) -> Triple:
        """Physical size (n-1)*spacing per axis, i.e. node-to-node span."""
        return tuple(s * (n - 1) for s, n in zip(self.spacing, self.dims))  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid; label 0 is background."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.allclose(arr, np.rint(arr)):
                raise ValueError("label data must be integral")
            arr = np.rint(arr)
        arr = arr.astype(np.int32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"label data must be 3D, got shape {arr.shape}")
        if any(n < 2 for n in arr.shape):
            raise ShapeMismatch(f"all dims must be >= 2, got {arr.shape}")
        if arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def labels(self) -> np.ndarray:
        return np.unique(self.data)


# ---------------------------------------------------------------------------
# index-space machinery shared by sampling, warping and map composition
# ---------------------------------------------------------------------------

def index_coords(q: np.ndarray, dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert normalized coordinates to cell indices and weights.

    ``q`` has shape (..., 3). Returns ``(i0, w, ingrid)`` where ``i0`` is the
    lower cell corner per axis (int, clipped to ``n-2``), ``w`` the float64
    fractional offset in [0, 1], and ``ingrid`` a bool mask per axis that is
    False where the query was clamped from outside [0, 1].

    A query equal (as a float) to a stored node coordinate yields an exact
    weight of 0 or 1, so node hits pass stored values through unchanged.
    """
    q64 = np.asarray(q, dtype=np.float64)
    ingrid = (q64 >= 0.0) & (q64 <= 1.0)
    qc = np.clip(q64, 0.0, 1.0)
    i0 = np.empty(q64.shape, dtype=np.int64)
    w = np.empty(q64.shape, dtype=np.float64)
    for c in range(3):
        n = int(dims[c])
        coords = axis_coords(n).astype(np.float64)
        s = qc[..., c] * (n - 1)
        ic = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
        wc = s - ic
        wc = np.where(qc[..., c] == coords[ic], 0.0, wc)
        wc = np.where(qc[..., c] == coords[ic + 1], 1.0, wc)
        i0[..., c] = ic
        w[..., c] = wc
    return i0, w, ingrid


def _corner_weights(w: np.ndarray) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    out = []
    for dx in (0, 1):
        fx = wx if dx else 1.0 - wx
        for dy in (0, 1):
            fy = wy if dy else 1.0 - wy
            for dz in (0, 1):
                fz = wz if dz else 1.0 - wz
                out.append(((dx, dy, dz), fx * fy * fz))
    return out


def flat_index(i0: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Ravel (..., 3) integer grid indices into flat C-order offsets."""
    return (i0[..., 0] * dims[1] + i0[..., 1]) * dims[2] + i0[..., 2]


def sample_grid(field: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Trilinearly interpolate ``field`` at normalized coordinates ``q``.

    ``field`` has shape (nx, ny, nz) or (nx, ny, nz, C); ``q`` has shape
    (..., 3). Off-grid coordinates are clamped (border replicate). Exact
    node hits return the stored value without mixing.
    Returns float64 of shape (...) or (..., C).
    """
    field = np.ascontiguousarray(field)
    dims = field.shape[:3]
    i0, w, _ = index_coords(q, dims)
    scalar = field.ndim == 3
    flat = field.reshape(-1) if scalar else field.reshape(-1, field.shape[3])
    base = flat_index(i0, dims)
    acc = None
    for (dx, dy, dz), wt in _corner_weights(w):
        vals = np.take(flat, base + ((dx * dims[1] + dy) * dims[2] + dz), axis=0)
        term = wt[..., None] * vals if not scalar else wt * vals
        acc = term if acc is None else acc + term
    # bit-exact passthrough on node hits
    node = ((w == 0.0) | (w == 1.0)).all(axis=-1)
    if np.any(node):
        ii = flat_index(i0 + (w == 1.0), dims)
        exact = np.take(flat, ii, axis=0)
        acc = np.where(node[..., None] if not scalar else node, exact, acc)
    return acc


def trilinear_sample(v: Volume, p: Sequence[float]) -> float:
    """Sample one normalized coordinate from a volume (border replicate)."""
    return float(sample_grid(v.data, np.asarray(p, dtype=np.float64)))


def axis_interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) linear-interpolation matrix between node grids.

    Row ``i`` holds the weights that evaluate a 1D field at the normalized
    position ``i/(n_out-1)``; identical node layouts yield the identity
    matrix exactly (snap rule).
    """
    t = np.arange(n_out, dtype=np.float64) / (n_out - 1)
    s = t * (n_in - 1)
    r = np.rint(s)
    s = np.where(np.abs(s - r) <= SNAP_EPS, r, s)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, n_in - 2)
    w = s - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - w
    m[rows, i0 + 1] += w
    return m


def resize_grid(arr: np.ndarray, new_dims: Sequence[int]) -> np.ndarray:
    """Separable trilinear resize of (nx,ny,nz) or (nx,ny,nz,C) node data.

    Evaluates the source field at the normalized node coordinates of the
    target grid; equivalent to per-node ``sample_grid`` but exact-copying
    when an axis keeps its length. Returns float64.
    """
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        n_in = out.shape[axis]
        n_out = int(new_dims[axis])
        if n_out == n_in:
            continue
        m = axis_interp_matrix(n_in, n_out)
        out = np.moveaxis(np.tensordot(m, np.moveaxis(out, axis, 0), axes=([1], [0])), 0, axis)
    return out


def resample_to_shape(v: Volume, new_dims: Sequence[int]) -> Volume:
    """Resample a volume onto a new grid spanning the same physical extent.

    Output node values equal ``trilinear_sample`` of ``v`` at the same
    normalized coordinates; spacing is rescaled so ``(n-1) * spacing`` is
    preserved per axis and the origin is kept.
    """
    nd = tuple(int(n) for n in new_dims)
    if len(nd) != 3 or any(n < 2 for n in nd):
        raise ShapeMismatch(f"new dims must be 3 values >= 2, got {new_dims}")
    data = resize_grid(v.data, nd).astype(np.float32)
    spacing = tuple(
        s * (n_old - 1) / (n_new - 1) for s, n_old, n_new in zip(v.spacing, v.dims, nd)
    )
    return Volume(data, spacing, v.origin)


def gradient_central(v: Volume) -> tuple[Volume, Volume, Volume]:
    """Spatial gradient in normalized coordinates.

    Central differences at interior voxels, one-sided at boundary voxels.
    Requires dims >= 3 on every axis.
    """
    if any(n < 3 for n in v.dims):
        raise ShapeMismatch(f"gradient needs dims >= 3, got {v.dims}")
    data = v.data.astype(np.float64)
    grads = []
    for axis in range(3):
        h = 1.0 / (v.dims[axis] - 1)
        g = np.gradient(data, h, axis=axis)
        grads.append(Volume(g.astype(np.float32), v.spacing, v.origin))
    return tuple(grads)  # type: ignore[return-value]
