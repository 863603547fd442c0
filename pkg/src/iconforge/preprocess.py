"""Intensity and spacing normalization, shared by training and inference.

CT values are treated as Hounsfield units, clamped to [-1000, 1000] and
mapped linearly onto [0, 1]. MR magnitudes are clipped at their 99th
percentile and divided by it. Both run before resizing onto the canonical
grid; the exact same functions run at train and test time.
"""

from __future__ import annotations

import numpy as np

from .transform import TransformMap, resize_map
from .volume import Volume, resample_to_shape

CANONICAL_SIDE = 175

HU_MIN = -1000.0
HU_MAX = 1000.0
MRI_PERCENTILE = 99.0


def normalize_ct(v: Volume) -> Volume:
    """Clamp HU to [-1000, 1000], then map linearly to [0, 1]."""
    x = np.clip(v.data.astype(np.float64), HU_MIN, HU_MAX)
    out = (x - HU_MIN) / (HU_MAX - HU_MIN)
    return v.with_data(out.astype(np.float32))


def normalize_mri(v: Volume) -> Volume:
    """Clip at the 99th-percentile intensity, then divide by it.

    The percentile is the linearly interpolated order statistic at rank
    ``0.99 * (N - 1)``. An all-zero image maps to all zeros.
    """
    x = v.data.astype(np.float64)
    p99 = float(np.percentile(x, MRI_PERCENTILE, method="linear"))
    if p99 <= 0.0:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    out = np.clip(x, 0.0, p99) / p99
    return v.with_data(out.astype(np.float32))


def to_canonical(v: Volume, side: int = CANONICAL_SIDE) -> Volume:
    """Resample onto the cubic network-input grid (side^3 nodes)."""
    return resample_to_shape(v, (side, side, side))


def apply_modality(v: Volume, modality: str, side: int = CANONICAL_SIDE) -> Volume:
    """Full input pipeline: intensity normalization, then canonical resize.

    ``modality`` is one of ``ct``, ``mri``, ``none`` (no intensity change).
    This single function is the preprocessing entry point for both the
    trainer and the inference service.
    """
    if modality == "ct":
        v = normalize_ct(v)
    elif modality == "mri":
        v = normalize_mri(v)
    elif modality != "none":
        raise ValueError(f"unknown modality {modality!r} (expected ct, mri or none)")
    return to_canonical(v, side)


def map_to_original(phi: TransformMap, original: Volume) -> TransformMap:
    """Interpolate a canonical-grid transform onto the original image grid.

    Evaluation always happens at original resolution: the predicted map is
    trilinearly resampled in normalized coordinates, which agrees with the
    canonical-resolution prediction because canonical volumes span the same
    normalized cube as their originals.
    """
    return resize_map(phi, original.dims)
