"""Shared synthetic data generators for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from iconforge.transform import TransformMap, identity_values, warp, warp_labels
from iconforge.volume import LabelVolume, Volume


def textured_volume(n: int, seed: int, scales=((5.0, 1.0), (2.5, 0.5), (1.2, 0.25))) -> Volume:
    """Multi-scale smooth noise normalized to [0, 1]; nowhere constant."""
    r = np.random.default_rng(seed)
    t = sum(w * gaussian_filter(r.normal(size=(n, n, n)), s) for s, w in scales)
    t = (t - t.min()) / (t.max() - t.min())
    return Volume(t.astype(np.float32))


def smooth_displacement_vox(n: int, seed: int, sigma: float, max_vox: float) -> np.ndarray:
    """Gaussian-smoothed random displacement, rescaled to a max magnitude
    of ``max_vox`` voxels per component. Shape (n, n, n, 3), voxel units."""
    r = np.random.default_rng(seed)
    d = np.stack([gaussian_filter(r.normal(size=(n, n, n)), sigma) for _ in range(3)], axis=-1)
    return d * (max_vox / np.abs(d).max())


def map_from_displacement_vox(disp_vox: np.ndarray) -> TransformMap:
    n = disp_vox.shape[0]
    vals = identity_values(disp_vox.shape[:3]) + disp_vox / (n - 1)
    return TransformMap(vals.astype(np.float32))


def random_smooth_map(n: int, seed: int, sigma: float = 2.0, max_vox: float = 1.5) -> TransformMap:
    return map_from_displacement_vox(smooth_displacement_vox(n, seed, sigma, max_vox))


def inward_smooth_map(n: int, seed: int, sigma: float = 1.5, max_vox: float = 0.5,
                      margin: float = 0.05) -> TransformMap:
    """Random smooth map whose values stay strictly inside the unit cube,
    clear of the clamp's kink (useful for finite-difference checks)."""
    disp = smooth_displacement_vox(n, seed, sigma, max_vox) / (n - 1)
    vals = identity_values((n, n, n)) * (1.0 - 2 * margin) + margin + disp
    return TransformMap(np.clip(vals, margin / 2, 1 - margin / 2).astype(np.float32))


# ---------------------------------------------------------------------------
# blob-world datasets for training experiments
# ---------------------------------------------------------------------------

def blob_template(n: int, kind: str, seed: int):
    """Textured volume with a bright blob plus its label mask."""
    r = np.random.default_rng(seed)
    tex = (0.5 * gaussian_filter(r.normal(size=(n, n, n)), 2.0)
           + 0.25 * gaussian_filter(r.normal(size=(n, n, n)), 0.9))
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    xs = np.arange(n) - (n - 1) / 2
    x, y, z = np.meshgrid(xs, xs, xs, indexing="ij")
    if kind == "ball":
        rad, r2 = 4.5, x ** 2 + y ** 2 + z ** 2
    elif kind == "ellipsoid":
        rad, r2 = 4.2, 0.6 * x ** 2 + 1.5 * y ** 2 + z ** 2
    else:
        raise ValueError(kind)
    bump = np.exp(-r2 / (2 * (rad / 1.5) ** 2))
    img = (0.3 * tex + 0.7 * bump).astype(np.float32)
    lab = (r2 <= rad ** 2).astype(np.int32)
    return Volume(img), LabelVolume(lab)


def blob_samples(n: int, kind: str, template_seed: int, sample_seeds,
                 trans_vox: float, sigma: float, max_vox: float):
    """Warped copies of one template: images plus matching label volumes.

    Each sample applies a random translation (up to ``trans_vox`` voxels per
    axis) plus a smooth random deformation, so pairs within one dataset
    share the dataset's deformation statistics.
    """
    img, lab = blob_template(n, kind, template_seed)
    vols, labs = [], []
    for s in sample_seeds:
        r = np.random.default_rng(s)
        d = np.stack([gaussian_filter(r.normal(size=(n, n, n)), sigma) for _ in range(3)], axis=-1)
        d *= max_vox / np.abs(d).max()
        d += r.uniform(-trans_vox, trans_vox, size=3)
        phi = map_from_displacement_vox(d)
        vols.append(warp(img, phi))
        labs.append(warp_labels(lab, phi))
    return vols, labs


def two_blob_datasets(n: int = 16, train_count: int = 6, held_count: int = 6):
    """Two toy corpora with different deformation statistics plus held-out
    samples: (train_A, train_B, held_A, held_labels_A, held_B, held_labels_B).
    """
    vols_a, labs_a = blob_samples(n, "ball", 1, range(100, 100 + train_count), 2.5, 2.5, 1.5)
    vols_b, labs_b = blob_samples(n, "ellipsoid", 2, range(200, 200 + train_count), 2.0, 1.2, 2.0)
    held_a, hlab_a = blob_samples(n, "ball", 1, range(900, 900 + held_count), 2.5, 2.5, 1.5)
    held_b, hlab_b = blob_samples(n, "ellipsoid", 2, range(910, 910 + held_count), 2.0, 1.2, 2.0)
    return (vols_a, labs_a), (vols_b, labs_b), (held_a, hlab_a), (held_b, hlab_b)
