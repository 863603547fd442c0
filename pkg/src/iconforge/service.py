"""Service layer: one function per operator command.

The FastAPI app and the CLI are both thin clients of these functions, so a
request behaves identically over HTTP and in-process. File paths in
requests refer to the local filesystem.
"""

from __future__ import annotations

import os
import time

import numpy as np

from . import io as fio
from .loss import LossConfig
from .metrics import MetricsReport, evaluate_map_quality
from .network import RegistrationModel, UNetConfig
from .preprocess import CANONICAL_SIDE, apply_modality, map_to_original
from .schemas import (
    EvaluateRequest,
    EvaluateResponse,
    FinetuneRequest,
    MetricsReportModel,
    PreprocessRequest,
    PreprocessResponse,
    RegisterRequest,
    RegisterResponse,
    TrainRequest,
    TrainResponse,
    WarpRequest,
    WarpResponse,
)
from .transform import warp, warp_labels
from .trainer import config_from, finetune, instance_optimize, load_manifest, train
from .volume import LabelVolume, Volume


def model_for_request(checkpoint: str | None, canonical_side: int | None,
                      seed: int = 0) -> RegistrationModel:
    """Checkpointed model, or a fresh zero-initialized (identity) one."""
    if checkpoint is not None:
        model = fio.load_checkpoint(checkpoint)
        if canonical_side is not None and canonical_side != model.side:
            model.side = int(canonical_side)
        return model
    side = canonical_side if canonical_side is not None else CANONICAL_SIDE
    return RegistrationModel.create(side=side, config=UNetConfig(), seed=seed)


def _load_landmarks(path: str | None):
    if path is None:
        return None
    pts = fio.read_landmarks(path)
    return pts if len(pts) else None


def _load_labels(path: str | None) -> LabelVolume | None:
    if path is None:
        return None
    vol = fio.read_volume(path, labels=True)
    return vol


def run_register(req: RegisterRequest) -> RegisterResponse:
    """Predict (optionally instance-optimize), resample the map back to the
    fixed image grid, persist outputs, and report metrics."""
    t0 = time.perf_counter()
    trace: list[str] = []
    fixed = fio.read_volume(req.fixed)
    moving = fio.read_volume(req.moving)
    model = model_for_request(req.checkpoint, req.canonical_side, req.seed)
    side = model.side

    moving_c = apply_modality(moving, req.modality_moving, side)
    fixed_c = apply_modality(fixed, req.modality_fixed, side)
    trace += [f"preprocess:moving:{req.modality_moving}:{side}",
              f"preprocess:fixed:{req.modality_fixed}:{side}"]

    if req.io_iterations > 0:
        result = instance_optimize(model, moving_c, fixed_c,
                                   iterations=req.io_iterations, lr=req.io_lr)
        phi_canonical = result.phi_ab
        trace.append(f"instance_optimize:{req.io_iterations}")
    else:
        phi_canonical = model.predict(moving_c, fixed_c)
        trace.append("predict")

    phi_original = map_to_original(phi_canonical, fixed)
    trace.append("map_to_original")
    fio.write_transform(phi_original, req.out_map)

    warped = None
    if req.out_warped or req.snapshot:
        warped = warp(moving, phi_original, like=fixed)
    if req.out_warped:
        fio.write_volume(warped, req.out_warped)
    if req.snapshot:
        write_snapshots(fixed, warped, req.snapshot)

    report = evaluate_map_quality(
        phi_original, fixed, moving,
        fixed_landmarks=_load_landmarks(req.landmarks_fixed),
        moving_landmarks=_load_landmarks(req.landmarks_moving),
        fixed_labels=_load_labels(req.labels_fixed),
        moving_labels=_load_labels(req.labels_moving),
        trace=trace, started_at=t0,
    )
    return RegisterResponse(
        report=MetricsReportModel.from_report(report),
        out_map=req.out_map,
        out_warped=req.out_warped,
    )


def run_evaluate(req: EvaluateRequest) -> EvaluateResponse:
    """Metrics of a stored transform against fixed/moving references."""
    t0 = time.perf_counter()
    phi = fio.read_transform(req.map)
    fixed = fio.read_volume(req.fixed)
    moving = fio.read_volume(req.moving)
    report = evaluate_map_quality(
        phi, fixed, moving,
        fixed_landmarks=_load_landmarks(req.landmarks_fixed),
        moving_landmarks=_load_landmarks(req.landmarks_moving),
        fixed_labels=_load_labels(req.labels_fixed),
        moving_labels=_load_labels(req.labels_moving),
        trace=["load_map"], started_at=t0,
    )
    if req.out:
        with open(req.out, "w") as f:
            f.write(report.to_json() + "\n")
    return EvaluateResponse(report=MetricsReportModel.from_report(report), out=req.out)


def run_preprocess(req: PreprocessRequest) -> PreprocessResponse:
    vol = fio.read_volume(req.input)
    out = apply_modality(vol, req.modality, req.canonical_side)
    fio.write_volume(out, req.output)
    return PreprocessResponse(output=req.output)


def run_warp(req: WarpRequest) -> WarpResponse:
    phi = fio.read_transform(req.map)
    if req.labels:
        lv = fio.read_volume(req.input, labels=True)
        out = warp_labels(lv, phi)
    else:
        vol = fio.read_volume(req.input)
        out = warp(vol, phi)
    fio.write_volume(out, req.output)
    return WarpResponse(output=req.output)


def _train_response(result, epochs_run: int) -> TrainResponse:
    csv_path = None
    if result.final_checkpoint:
        csv_path = os.path.join(os.path.dirname(result.final_checkpoint), "metrics.csv")
    return TrainResponse(
        final_checkpoint=result.final_checkpoint,
        checkpoints=result.checkpoints,
        metrics_csv=csv_path,
        epochs_run=epochs_run,
        final_total_loss=result.metrics[-1]["total"] if result.metrics else None,
    )


def run_train(req: TrainRequest) -> TrainResponse:
    datasets, overrides = load_manifest(req.manifest)
    cfg = config_from(
        overrides,
        pairs_per_dataset=req.pairs_per_dataset,
        epochs_phase1=req.epochs_phase1,
        epochs_phase2=req.epochs_phase2,
        seed=req.seed,
        canonical_side=req.canonical_side,
    )
    model = RegistrationModel.create(
        side=cfg.canonical_side, config=cfg.unet_config(),
        seed=cfg.seed, gain_voxels=cfg.gain_voxels)
    result = train(model, datasets, cfg, out_dir=req.out_dir)
    return _train_response(result, cfg.epochs_phase1 + cfg.epochs_phase2)


def run_finetune(req: FinetuneRequest) -> TrainResponse:
    datasets, overrides = load_manifest(req.manifest)
    cfg = config_from(
        overrides,
        pairs_per_dataset=req.pairs_per_dataset,
        seed=req.seed,
    )
    result = finetune(req.checkpoint, datasets, cfg, epochs=req.epochs,
                      out_dir=req.out_dir)
    return _train_response(result, req.epochs)


# ---------------------------------------------------------------------------
# snapshots (mid-axial PGM slices of fixed / warped / difference)
# ---------------------------------------------------------------------------

def write_pgm(image: np.ndarray, path: str) -> None:
    """8-bit binary PGM of a 2D array scaled to its own [min, max]."""
    arr = np.asarray(image, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = np.clip((arr - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def write_snapshots(fixed: Volume, warped: Volume, prefix: str) -> list[str]:
    """Mid-axial slices of fixed, warped and |difference| as PGM files."""
    z = fixed.dims[2] // 2
    pieces = {
        "fixed": fixed.data[:, :, z],
        "warped": warped.data[:, :, z],
        "diff": np.abs(fixed.data[:, :, z] - warped.data[:, :, z]),
    }
    paths = []
    for tag, img in pieces.items():
        path = f"{prefix}_{tag}.pgm"
        write_pgm(img, path)
        paths.append(path)
    return paths
