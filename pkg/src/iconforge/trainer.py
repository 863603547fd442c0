"""Multi-dataset training loop, fine-tuning, and per-pair instance
optimization.

Every epoch draws the same number of ordered pairs from each dataset
(uniform with replacement over the dataset's pair space) so corpora of very
different sizes contribute equally. One pair per optimizer step; the loss
covers both directions, so ordered sampling is sufficient.

Determinism: given the same seed, configuration and data, the sampling
sequence, initialization and updates are reproducible, and checkpoints are
bit-identical across runs (single-threaded execution on one machine).
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import io as fio
from .autodiff import Tape
from .errors import Divergence, EmptyDataset, MissingFile, NonFiniteGradient
from .loss import LossBreakdown, LossConfig
from .network import RegistrationModel, UNetConfig, predict_full
from .preprocess import apply_modality
from .runtime import worker_count
from .transform import TransformMap, identity_map
from .volume import Volume

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "sim_ab", "sim_ba", "reg", "total")


@dataclass
class DatasetSpec:
    """One training corpus: its volumes, pairing mode and preprocessing.

    ``volumes`` holds in-memory :class:`Volume` objects or file paths.
    ``mode`` is ``inter`` (random ordered pairs of distinct volumes) or
    ``intra`` (explicit index pairs, e.g. inhale/exhale of one patient).
    """

    name: str
    mode: str
    volumes: list
    preprocessing: str = "none"
    pairs: list[tuple[int, int]] = field(default_factory=list)
    labels: list | None = None
    landmarks: list | None = None

    def __post_init__(self):
        if self.mode not in ("inter", "intra"):
            raise ValueError(f"dataset {self.name!r}: mode must be inter or intra")
        if self.preprocessing not in ("ct", "mri", "none"):
            raise ValueError(f"dataset {self.name!r}: bad preprocessing {self.preprocessing!r}")
        if self.mode == "inter" and len(self.volumes) < 2:
            raise EmptyDataset(f"dataset {self.name!r}: inter mode needs >= 2 volumes")
        if self.mode == "intra":
            if not self.pairs:
                raise EmptyDataset(f"dataset {self.name!r}: intra mode needs explicit pairs")
            for a, b in self.pairs:
                if not (0 <= a < len(self.volumes) and 0 <= b < len(self.volumes)):
                    raise ValueError(f"dataset {self.name!r}: pair ({a},{b}) out of range")


@dataclass
class TrainConfig:
    pairs_per_dataset: int = 25
    epochs_phase1: int = 800
    epochs_phase2: int = 200
    lr: float = 5e-5
    lam: float = 1.5
    seed: int = 0
    canonical_side: int = 175
    checkpoint_every: int = 10
    lncc_radius: int = 2
    variance_epsilon: float = 1e-5
    freeze_step1_in_phase2: bool = True
    base_channels: int = 8
    depth: int = 3
    gain_voxels: float = 10.0

    def __post_init__(self):
        if self.pairs_per_dataset < 1 or self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("counts must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, lncc_radius=self.lncc_radius,
                          variance_epsilon=self.variance_epsilon)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(depth=self.depth, base_channels=self.base_channels)


@dataclass(frozen=True)
class PairSample:
    dataset: str
    dataset_index: int
    a: int
    b: int


def sample_epoch(datasets: list[DatasetSpec], cfg: TrainConfig,
                 rng: np.random.Generator) -> list[PairSample]:
    """Exactly ``pairs_per_dataset`` ordered pairs per dataset, shuffled.

    Sampling is uniform with replacement: over explicit pairs in intra
    mode, over ordered pairs of distinct volumes in inter mode.
    """
    if not datasets:
        raise EmptyDataset("no datasets to sample from")
    out: list[PairSample] = []
    n = cfg.pairs_per_dataset
    for di, ds in enumerate(datasets):
        if not ds.volumes:
            raise EmptyDataset(f"dataset {ds.name!r} has no volumes")
        if ds.mode == "intra":
            idx = rng.integers(0, len(ds.pairs), size=n)
            out.extend(PairSample(ds.name, di, *ds.pairs[i]) for i in idx)
        else:
            m = len(ds.volumes)
            a = rng.integers(0, m, size=n)
            b = rng.integers(0, m - 1, size=n)
            b = b + (b >= a)
            out.extend(PairSample(ds.name, di, int(x), int(y)) for x, y in zip(a, b))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------

def pair_loss_tape(model: RegistrationModel, ia: np.ndarray, ib: np.ndarray,
                   loss_cfg: LossConfig):
    """Forward pass of the full objective for one ordered pair.

    Returns ``(tape, total_var, phi_ab_var, phi_ba_var, breakdown)``; the
    caller decides whether to run the backward pass.
    """
    tape = Tape()
    va = tape.input(ia)
    vb = tape.input(ib)
    phi_ab = predict_full(tape, model, va, vb)
    phi_ba = predict_full(tape, model, vb, va)
    sim_ab = tape.lncc_loss(tape.warp_image(va, phi_ab), vb, loss_cfg)
    sim_ba = tape.lncc_loss(tape.warp_image(vb, phi_ba), va, loss_cfg)
    reg = tape.jacobian_penalty(tape.compose_maps(phi_ab, phi_ba))
    total = tape.add(tape.add(sim_ab, sim_ba), tape.scale(reg, loss_cfg.lam))
    breakdown = LossBreakdown.build(
        float(sim_ab.value), float(sim_ba.value), float(reg.value), loss_cfg.lam)
    return tape, total, phi_ab, phi_ba, breakdown


def _train_step(model: RegistrationModel, ia: Volume, ib: Volume,
                loss_cfg: LossConfig, lr: float) -> LossBreakdown | None:
    """Forward, backward, Adam. Returns None when the step was skipped
    because the loss or a gradient was non-finite."""
    tape, total, _, _, breakdown = pair_loss_tape(model, ia.data, ib.data, loss_cfg)
    if not np.isfinite(breakdown.total):
        return None
    tape.backward(total)
    try:
        model.store.adam_step(lr)
    except NonFiniteGradient:
        model.store.zero_grads()
        return None
    return breakdown


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def _load_volume(entry) -> Volume:
    if isinstance(entry, Volume):
        return entry
    return fio.read_volume(str(entry))


def prepare_datasets(datasets: list[DatasetSpec], cfg: TrainConfig) -> list[list[Volume]]:
    """Load and preprocess every volume once (canonical grid, normalized).

    Read-only work; parallelized across volumes when ICONFORGE_THREADS > 1.
    """
    jobs = [(di, vi) for di, ds in enumerate(datasets) for vi in range(len(ds.volumes))]

    def prep(job):
        di, vi = job
        ds = datasets[di]
        vol = _load_volume(ds.volumes[vi])
        return apply_modality(vol, ds.preprocessing, cfg.canonical_side)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(prep, jobs))
    else:
        results = [prep(j) for j in jobs]
    out: list[list[Volume]] = [[None] * len(ds.volumes) for ds in datasets]
    for (di, vi), vol in zip(jobs, results):
        out[di][vi] = vol
    return out


# ---------------------------------------------------------------------------
# training / fine-tuning loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RegistrationModel
    metrics: list[dict]
    checkpoints: list[str]
    final_checkpoint: str | None


def _run_epochs(model, datasets, prepared, cfg: TrainConfig, schedule,
                out_dir: str | None, rng: np.random.Generator) -> TrainResult:
    """Shared epoch loop; ``schedule`` is a list of (n_epochs, setup_fn)."""
    loss_cfg = cfg.loss_config()
    rows: list[dict] = []
    checkpoints: list[str] = []
    writer = None
    csv_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_file = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=METRICS_FIELDS)
        writer.writeheader()

    def checkpoint(tag: str) -> str | None:
        if out_dir is None:
            return None
        path = os.path.join(out_dir, f"checkpoint_{tag}.ckpt")
        fio.save_checkpoint(model, path)
        return path

    try:
        epoch = model.epoch
        for n_epochs, setup in schedule:
            if n_epochs == 0:
                continue
            setup(model)
            for _ in range(n_epochs):
                pairs = sample_epoch(datasets, cfg, rng)
                sums = np.zeros(4, dtype=np.float64)
                done = 0
                skipped = 0
                for p in pairs:
                    ia = prepared[p.dataset_index][p.a]
                    ib = prepared[p.dataset_index][p.b]
                    bd = _train_step(model, ia, ib, loss_cfg, cfg.lr)
                    if bd is None:
                        skipped += 1
                        log.warning("skipped non-finite pair %s(%d,%d) in epoch %d",
                                    p.dataset, p.a, p.b, epoch)
                        continue
                    sums += (bd.sim_ab, bd.sim_ba, bd.reg, bd.total)
                    done += 1
                if skipped >= 0.10 * len(pairs):
                    raise Divergence(
                        f"{skipped}/{len(pairs)} pairs skipped in epoch {epoch}")
                mean = sums / max(done, 1)
                row = {"epoch": epoch, "sim_ab": mean[0], "sim_ba": mean[1],
                       "reg": mean[2], "total": mean[3]}
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    csv_file.flush()
                epoch += 1
                model.epoch = epoch
                if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
                    path = checkpoint(f"epoch{epoch:05d}")
                    if path:
                        checkpoints.append(path)
        final = checkpoint("final")
        if final:
            checkpoints.append(final)
    finally:
        if csv_file is not None:
            csv_file.close()
    return TrainResult(model=model, metrics=rows, checkpoints=checkpoints,
                       final_checkpoint=checkpoints[-1] if checkpoints else None)


def train(model: RegistrationModel, datasets: list[DatasetSpec], cfg: TrainConfig,
          out_dir: str | None = None) -> TrainResult:
    """Two-phase training: level nets first, then the refinement net.

    Per epoch: sample pairs, one Adam step per pair over the bidirectional
    objective; per-epoch mean loss terms go to ``metrics.csv``; checkpoints
    are written every ``checkpoint_every`` epochs plus a final one.
    Non-finite pairs are skipped; an epoch skipping 10% or more aborts
    with ``divergence``.
    """
    prepared = prepare_datasets(datasets, cfg)
    rng = np.random.default_rng(cfg.seed)
    schedule = [
        (cfg.epochs_phase1, lambda m: m.set_phase(1)),
        (cfg.epochs_phase2,
         lambda m: m.set_phase(2, freeze_step1=cfg.freeze_step1_in_phase2)),
    ]
    return _run_epochs(model, datasets, prepared, cfg, schedule, out_dir, rng)


def finetune(checkpoint: str | RegistrationModel, datasets: list[DatasetSpec],
             cfg: TrainConfig, epochs: int, out_dir: str | None = None) -> TrainResult:
    """Continue training from a checkpoint with both steps trainable."""
    model = checkpoint if isinstance(checkpoint, RegistrationModel) else fio.load_checkpoint(checkpoint)
    prepared = prepare_datasets(datasets, cfg)
    rng = np.random.default_rng(cfg.seed)

    def setup(m: RegistrationModel):
        m.step2_enabled = True
        m.phase = 2
        m.set_all_trainable()

    return _run_epochs(model, datasets, prepared, cfg, [(epochs, setup)], out_dir, rng)


# ---------------------------------------------------------------------------
# instance optimization
# ---------------------------------------------------------------------------

@dataclass
class InstanceOptResult:
    phi_ab: TransformMap
    phi_ba: TransformMap
    status: str  # "ok" or "nonfinite-aborted"
    final_loss: LossBreakdown
    loss_trace: list[float]
    iterations_run: int


def instance_optimize(model_or_checkpoint, ia: Volume, ib: Volume,
                      iterations: int = 50, lr: float = 1e-5,
                      loss_cfg: LossConfig = LossConfig()) -> InstanceOptResult:
    """Per-pair continuation of loss minimization at test time.

    Clones the model (the caller's weights are never touched) and runs
    ``iterations`` Adam steps of the bidirectional objective on this single
    preprocessed pair. Returns the final maps; if the loss turns
    non-finite, returns the best maps seen with a warning status.
    """
    base = (model_or_checkpoint if isinstance(model_or_checkpoint, RegistrationModel)
            else fio.load_checkpoint(model_or_checkpoint))
    work = base.clone()
    work.set_all_trainable()
    trace: list[float] = []
    best = None  # (total, breakdown, phi_ab values, phi_ba values)

    def forward():
        return pair_loss_tape(work, ia.data, ib.data, loss_cfg)

    def snapshot(bd, phi_ab, phi_ba):
        if np.isfinite(phi_ab.value).all() and np.isfinite(phi_ba.value).all():
            return (bd.total, bd, phi_ab.value.copy(), phi_ba.value.copy())
        return None

    clean = True
    for it in range(iterations):
        tape, total, phi_ab, phi_ba, bd = forward()
        trace.append(bd.total)
        if not np.isfinite(bd.total):
            clean = False
            if best is None:
                best = snapshot(bd, phi_ab, phi_ba)
            break
        if best is None or bd.total < best[0]:
            best = snapshot(bd, phi_ab, phi_ba)
        tape.backward(total)
        try:
            work.store.adam_step(lr)
        except NonFiniteGradient:
            clean = False
            break
    if clean:
        # finished every step (or zero iterations): report the final state
        _, _, phi_ab, phi_ba, bd = forward()
        trace.append(bd.total)
        if np.isfinite(bd.total):
            return InstanceOptResult(
                TransformMap(np.ascontiguousarray(phi_ab.value)),
                TransformMap(np.ascontiguousarray(phi_ba.value)),
                "ok", bd, trace, iterations)
        if best is None:
            best = snapshot(bd, phi_ab, phi_ba)
    if best is None:  # nothing usable was ever produced
        dims = ia.dims
        idm = identity_map(dims)
        bd = LossBreakdown.build(float("nan"), float("nan"), float("nan"), loss_cfg.lam)
        return InstanceOptResult(idm, identity_map(ib.dims), "nonfinite-aborted", bd, trace, 0)
    _, bd, vab, vba = best
    return InstanceOptResult(
        TransformMap(np.ascontiguousarray(vab)), TransformMap(np.ascontiguousarray(vba)),
        "nonfinite-aborted", bd, trace, max(len(trace) - 1, 0))


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def load_manifest(path: str) -> tuple[list[DatasetSpec], dict]:
    """JSON manifest -> dataset specs plus optional training overrides.

    Layout: ``{"datasets": [{name, mode, preprocessing, volumes, pairs?,
    labels?, landmarks?}, ...], "train": {...TrainConfig fields...}}``.
    Volume paths are resolved relative to the manifest file and must exist.
    """
    if not os.path.isfile(path):
        raise MissingFile(f"no such manifest: {path}")
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        full = p if os.path.isabs(p) else os.path.join(base, p)
        if not os.path.isfile(full):
            raise MissingFile(f"manifest references missing file: {p}")
        return full

    specs = []
    for entry in doc.get("datasets", []):
        specs.append(DatasetSpec(
            name=entry["name"],
            mode=entry["mode"],
            volumes=[resolve(p) for p in entry["volumes"]],
            preprocessing=entry.get("preprocessing", "none"),
            pairs=[tuple(p) for p in entry.get("pairs", [])],
            labels=[resolve(p) for p in entry["labels"]] if entry.get("labels") else None,
            landmarks=[resolve(p) for p in entry["landmarks"]] if entry.get("landmarks") else None,
        ))
    overrides = dict(doc.get("train", {}))
    if "lambda" in overrides:  # manifest-friendly alias
        overrides["lam"] = overrides.pop("lambda")
    return specs, overrides


def config_from(overrides: dict, **flag_values) -> TrainConfig:
    """Built-in defaults < manifest overrides < explicit flags."""
    cfg = TrainConfig()
    known = {f for f in cfg.__dataclass_fields__}
    merged = {k: v for k, v in overrides.items() if k in known}
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return replace(cfg, **merged)
