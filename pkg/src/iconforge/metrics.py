"""Registration quality metrics: mTRE, Dice overlap, folding fraction.

All metrics are computed on original-resolution grids; callers resample
canonical predictions with :func:`iconforge.preprocess.map_to_original`
first. The pipeline functions append to a ``trace`` list so tests can
assert the resample-back step precedes every metric.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import LandmarkCountMismatch, ShapeMismatch
from .loss import LossConfig
from .preprocess import apply_modality, map_to_original
from .transform import TransformMap, evaluate_map, neg_jacobian_fraction, warp_labels
from .volume import LabelVolume, Volume


@dataclass(frozen=True)
class LandmarkSet:
    """Physical (mm) points living in the frame of a specific volume."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class MetricsReport:
    neg_jac_fraction: float
    wall_time_s: float = 0.0
    mtre_mm: float | None = None
    dice_mean: float | None = None
    dice_per_label: dict[int, float] | None = None
    trace: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "neg_jac_fraction": self.neg_jac_fraction,
            "wall_time_s": self.wall_time_s,
            "mtre_mm": self.mtre_mm,
            "dice_mean": self.dice_mean,
            "dice_per_label": (
                {str(k): v for k, v in self.dice_per_label.items()}
                if self.dice_per_label is not None else None
            ),
            "trace": list(self.trace),
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = d.get("dice_per_label")
        return cls(
            neg_jac_fraction=d["neg_jac_fraction"],
            wall_time_s=d.get("wall_time_s", 0.0),
            mtre_mm=d.get("mtre_mm"),
            dice_mean=d.get("dice_mean"),
            dice_per_label={int(k): v for k, v in per.items()} if per else None,
            trace=list(d.get("trace", [])),
        )

    @classmethod
    def from_json(cls, s: str) -> "MetricsReport":
        return cls.from_dict(json.loads(s))


def physical_to_normalized(p: np.ndarray, v: Volume | LabelVolume) -> np.ndarray:
    """mm point(s) -> normalized [0,1]-cube coordinates of ``v``'s grid."""
    p = np.asarray(p, dtype=np.float64)
    span = np.array([s * (n - 1) for s, n in zip(v.spacing, v.dims)])
    return (p - np.asarray(v.origin)) / span


def normalized_to_physical(q: np.ndarray, v: Volume | LabelVolume) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    span = np.array([s * (n - 1) for s, n in zip(v.spacing, v.dims)])
    return q * span + np.asarray(v.origin)


def mtre(
    phi_ab: TransformMap,
    fixed_lm: LandmarkSet | np.ndarray,
    moving_lm: LandmarkSet | np.ndarray,
    fixed: Volume,
    moving: Volume,
) -> float:
    """Mean target registration error in mm.

    Fixed-frame landmarks are mapped through ``phi_ab`` (fixed grid ->
    moving normalized coordinates) and compared against their paired
    moving-frame landmarks.
    """
    f_pts = fixed_lm.points if isinstance(fixed_lm, LandmarkSet) else np.asarray(fixed_lm, dtype=np.float64)
    m_pts = moving_lm.points if isinstance(moving_lm, LandmarkSet) else np.asarray(moving_lm, dtype=np.float64)
    f_pts = f_pts.reshape(-1, 3)
    m_pts = m_pts.reshape(-1, 3)
    if f_pts.shape[0] != m_pts.shape[0]:
        raise LandmarkCountMismatch(
            f"landmark counts differ: {f_pts.shape[0]} fixed vs {m_pts.shape[0]} moving")
    if f_pts.shape[0] == 0:
        raise LandmarkCountMismatch("cannot compute mTRE of empty landmark sets")
    q = physical_to_normalized(f_pts, fixed)
    mapped = evaluate_map(phi_ab, q)
    mm = normalized_to_physical(mapped, moving)
    return float(np.linalg.norm(mm - m_pts, axis=1).mean())


def dice(warped: LabelVolume, target: LabelVolume) -> tuple[dict[int, float], float | None]:
    """Per-label and mean Dice over labels present in either volume.

    Label 0 (background) is excluded; labels absent from both volumes do
    not participate. Returns ``({}, None)`` when no foreground exists.
    """
    if warped.dims != target.dims:
        raise ShapeMismatch(f"label volume shapes differ: {warped.dims} vs {target.dims}")
    labels = np.union1d(np.unique(warped.data), np.unique(target.data))
    labels = labels[labels != 0]
    per: dict[int, float] = {}
    for lab in labels:
        a = warped.data == lab
        b = target.data == lab
        inter = np.count_nonzero(a & b)
        size = np.count_nonzero(a) + np.count_nonzero(b)
        per[int(lab)] = 2.0 * inter / size
    mean = float(np.mean(list(per.values()))) if per else None
    return per, mean


def evaluate_map_quality(
    phi_original: TransformMap,
    fixed: Volume,
    moving: Volume,
    fixed_landmarks: np.ndarray | LandmarkSet | None = None,
    moving_landmarks: np.ndarray | LandmarkSet | None = None,
    fixed_labels: LabelVolume | None = None,
    moving_labels: LabelVolume | None = None,
    trace: list[str] | None = None,
    started_at: float | None = None,
) -> MetricsReport:
    """All available metrics of an original-grid map.

    The folding fraction is always reported; mTRE and Dice only when their
    inputs are present.
    """
    t0 = started_at if started_at is not None else time.perf_counter()
    trace = list(trace) if trace is not None else []
    if phi_original.dims != fixed.dims:
        raise ShapeMismatch(
            f"map grid {phi_original.dims} is not the fixed image grid {fixed.dims}")
    trace.append("metric:neg_jacobian")
    report = MetricsReport(neg_jac_fraction=neg_jacobian_fraction(phi_original))
    if fixed_landmarks is not None and moving_landmarks is not None:
        trace.append("metric:mtre")
        report.mtre_mm = mtre(phi_original, fixed_landmarks, moving_landmarks, fixed, moving)
    if fixed_labels is not None and moving_labels is not None:
        trace.append("metric:dice")
        warped = warp_labels(moving_labels, phi_original, like=fixed_labels)
        report.dice_per_label, report.dice_mean = dice(warped, fixed_labels)
    report.trace = trace
    report.wall_time_s = time.perf_counter() - t0
    return report


def evaluate_pair(
    fixed: Volume,
    moving: Volume,
    model=None,
    phi_original: TransformMap | None = None,
    io_iterations: int = 0,
    io_lr: float = 1e-5,
    modality_fixed: str = "none",
    modality_moving: str = "none",
    canonical_side: int | None = None,
    loss_cfg: LossConfig = LossConfig(),
    fixed_landmarks=None,
    moving_landmarks=None,
    fixed_labels: LabelVolume | None = None,
    moving_labels: LabelVolume | None = None,
) -> tuple[MetricsReport, TransformMap]:
    """Full evaluation pipeline for one pair.

    Either a trained ``model`` (prediction happens here, optionally with
    instance optimization) or a precomputed original-grid map must be
    given. Prediction runs on the canonical grid; metrics always run on
    the original grid after the map is interpolated back.
    """
    t0 = time.perf_counter()
    trace: list[str] = []
    if phi_original is None:
        if model is None:
            raise ValueError("need a model or a precomputed map")
        side = canonical_side if canonical_side is not None else model.side
        ca = apply_modality(moving, modality_moving, side)
        cb = apply_modality(fixed, modality_fixed, side)
        trace += [f"preprocess:moving:{modality_moving}:{side}",
                  f"preprocess:fixed:{modality_fixed}:{side}"]
        if io_iterations > 0:
            from .trainer import instance_optimize

            result = instance_optimize(model, ca, cb, iterations=io_iterations,
                                       lr=io_lr, loss_cfg=loss_cfg)
            phi_canonical = result.phi_ab
            trace.append(f"instance_optimize:{io_iterations}")
        else:
            phi_canonical = model.predict(ca, cb)
            trace.append("predict")
        phi_original = map_to_original(phi_canonical, fixed)
        trace.append("map_to_original")
    report = evaluate_map_quality(
        phi_original, fixed, moving,
        fixed_landmarks, moving_landmarks, fixed_labels, moving_labels,
        trace=trace, started_at=t0,
    )
    return report, phi_original
