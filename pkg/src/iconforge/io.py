"""File formats: NIfTI-1 volumes, raw volumes, transforms, landmarks,
checkpoints.

Byte layouts are documented in ``docs/formats.md``. All stored arrays are
little-endian; every reader/writer pair here roundtrips its payload
bit-exactly.

The NIfTI support is deliberately minimal: single-file NIfTI-1 (magic
``n+1\\0``), datatypes uint8/int16/float32/float64, axis-aligned grids
only. Header bytes are kept verbatim so rewriting a file can preserve
fields this parser does not interpret.
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadFormat,
    MissingFile,
    NotNifti,
    NotThreeDimensional,
    ObliqueUnsupported,
    ShapeMismatch,
    UnsupportedDtype,
)
from .network import RegistrationModel, UNetConfig
from .autodiff import ParamStore
from .transform import TransformMap
from .volume import LabelVolume, Volume

NIFTI_HEADER_BYTES = 348
NIFTI_DATA_OFFSET = 352  # header + 4-byte extension flag

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}

_HEADER_FIELDS = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("pad0", "V36"),
    ("dim", "<i2", (8,)),
    ("intent", "V14"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("pad1", "V28"),
    ("descrip_aux", "V104"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "V16"),
    ("magic", "S4"),
])
assert _HEADER_FIELDS.itemsize == NIFTI_HEADER_BYTES


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise MissingFile(f"no such file: {path}")


def _read_bytes(path: str) -> bytes:
    _require_file(path)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_nifti(path: str, labels: bool = False):
    """Parse a single-file NIfTI-1 volume (optionally gzip-compressed).

    Returns a :class:`Volume`, or a :class:`LabelVolume` when ``labels`` is
    set. Endianness is auto-detected from ``sizeof_hdr``; ``scl_slope`` and
    ``scl_inter`` are applied when the slope is a nonzero finite number;
    the origin comes from the sform translation when ``sform_code > 0``,
    else the qoffset fields, else zeros.
    """
    vol, _ = read_nifti_with_header(path, labels=labels)
    return vol


def read_nifti_with_header(path: str, labels: bool = False):
    """Like :func:`read_nifti`, also returning the raw 348 header bytes
    (native byte order of the file) for verbatim pass-through on rewrite."""
    blob = _read_bytes(path)
    if len(blob) < NIFTI_HEADER_BYTES:
        raise NotNifti(f"{path}: shorter than a NIfTI-1 header")
    raw_header = blob[:NIFTI_HEADER_BYTES]
    hdr = np.frombuffer(raw_header, dtype=_HEADER_FIELDS)[0]
    swapped = False
    if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_BYTES:
        hdr = np.frombuffer(raw_header, dtype=_HEADER_FIELDS.newbyteorder())[0]
        swapped = True
        if int(hdr["sizeof_hdr"]) != NIFTI_HEADER_BYTES:
            raise NotNifti(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = raw_header[344:348]
    if magic == b"ni1\x00":
        raise NotNifti(f"{path}: two-file (hdr/img) NIfTI pair form is unsupported")
    if magic != b"n+1\x00":
        raise NotNifti(f"{path}: bad magic {magic!r}")

    dt_code = int(hdr["datatype"])
    if dt_code not in _NIFTI_DTYPES:
        raise UnsupportedDtype(f"{path}: unsupported NIfTI datatype code {dt_code}")
    dim = np.asarray(hdr["dim"], dtype=np.int64)
    ndim = int(dim[0])
    if ndim < 1 or ndim > 7:
        raise NotNifti(f"{path}: dim[0] = {ndim} out of range")
    dims = [int(d) for d in dim[1:1 + ndim]]
    while len(dims) > 3 and dims[-1] == 1:
        dims.pop()
    if len(dims) != 3:
        raise NotThreeDimensional(f"{path}: {ndim}D volume does not squeeze to 3D")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(p) for p in pixdim[1:4])
    origin = (0.0, 0.0, 0.0)
    if int(hdr["sform_code"]) > 0:
        srow = np.stack([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]]).astype(np.float64)
        rot = srow[:, :3]
        scale = np.abs(np.diag(rot)).max()
        off_diag = rot - np.diag(np.diag(rot))
        if np.abs(off_diag).max() > 1e-4 * max(scale, 1e-12) or np.any(np.diag(rot) <= 0):
            raise ObliqueUnsupported(f"{path}: sform is not an axis-aligned positive scaling")
        origin = tuple(float(x) for x in srow[:, 3])
    elif int(hdr["qform_code"]) > 0:
        quat = np.array([hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]], dtype=np.float64)
        if np.abs(quat).max() > 1e-6 or float(pixdim[0]) < 0:
            raise ObliqueUnsupported(f"{path}: qform rotation is not the identity")
        origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))

    offset = int(round(float(hdr["vox_offset"])))
    if offset < NIFTI_HEADER_BYTES:
        raise BadFormat(f"{path}: vox_offset {offset} inside the header")
    count = 1
    for d in dim[1:1 + ndim]:
        count *= int(d)
    dtype = np.dtype(_NIFTI_DTYPES[dt_code])
    if swapped:
        dtype = dtype.newbyteorder()
    payload = blob[offset:offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise BadFormat(f"{path}: truncated voxel payload")
    raw = np.frombuffer(payload, dtype=dtype)
    # NIfTI stores x fastest; squeeze trailing singletons down to 3D
    arr = raw.reshape(tuple(int(d) for d in dim[1:1 + ndim]), order="F")
    arr = arr.reshape(dims[0], dims[1], dims[2], order="F")
    values = np.ascontiguousarray(arr).astype(np.float64)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0:
        values = values * slope + inter
    if labels:
        vol = LabelVolume(np.rint(values).astype(np.int32), spacing, origin)
    else:
        vol = Volume(values.astype(np.float32), spacing, origin)
    return vol, raw_header


def write_nifti(v, path: str, passthrough: bytes | None = None) -> None:
    """Write a volume as single-file NIfTI-1, float32, axis-aligned sform.

    ``passthrough`` may hold the 348 header bytes of a previously read file;
    its uninterpreted fields are preserved verbatim while the geometry,
    datatype and scaling fields are rewritten.
    """
    data = v.data.astype(np.float32)
    if passthrough is not None and len(passthrough) == NIFTI_HEADER_BYTES:
        buf = bytearray(passthrough)
    else:
        buf = bytearray(NIFTI_HEADER_BYTES)
    hdr = np.frombuffer(buf, dtype=_HEADER_FIELDS)
    hdr["sizeof_hdr"] = NIFTI_HEADER_BYTES
    dim = np.zeros(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = data.shape
    dim[4:] = 1
    hdr["dim"] = dim
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = v.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = float(NIFTI_DATA_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["qform_code"] = 0
    hdr["sform_code"] = 1
    srow = np.zeros((3, 4), dtype=np.float32)
    for i in range(3):
        srow[i, i] = v.spacing[i]
        srow[i, 3] = v.origin[i]
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = srow[0], srow[1], srow[2]
    hdr["magic"] = b"n+1\x00"
    payload = bytes(buf) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


# ---------------------------------------------------------------------------
# raw volume (blob + JSON sidecar)
# ---------------------------------------------------------------------------

RAW_VOLUME_FORMAT = "iconforge-raw-volume-v1"
TRANSFORM_FORMAT = "iconforge-transform-v1"
TRANSFORM_CONVENTION = "pullback-normalized-v1"
CHECKPOINT_FORMAT = "iconforge-checkpoint-v1"


def _sidecar(path: str) -> str:
    return path + ".json"


def write_raw_volume(v, path: str) -> None:
    is_labels = isinstance(v, LabelVolume)
    data = v.data.astype("<i4" if is_labels else "<f4")
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(data).tobytes())
    meta = {
        "format": RAW_VOLUME_FORMAT,
        "kind": "labels" if is_labels else "image",
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": "<i4" if is_labels else "<f4",
    }
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f)


def read_raw_volume(path: str):
    _require_file(path)
    side = _sidecar(path)
    if not os.path.isfile(side):
        raise MissingFile(f"missing sidecar: {side}")
    with open(side) as f:
        meta = json.load(f)
    if meta.get("format") != RAW_VOLUME_FORMAT:
        raise BadFormat(f"{side}: not a {RAW_VOLUME_FORMAT} sidecar")
    dims = tuple(int(d) for d in meta["dims"])
    arr = np.fromfile(path, dtype=np.dtype(meta["dtype"])).reshape(dims)
    spacing = tuple(meta["spacing"])
    origin = tuple(meta["origin"])
    if meta["kind"] == "labels":
        return LabelVolume(arr.astype(np.int32), spacing, origin)
    return Volume(arr.astype(np.float32), spacing, origin)


def read_volume(path: str, labels: bool = False):
    """Dispatch by format: NIfTI for .nii/.nii.gz, raw sidecar otherwise."""
    _require_file(path)
    if path.endswith(".nii") or path.endswith(".nii.gz"):
        return read_nifti(path, labels=labels)
    if os.path.isfile(_sidecar(path)):
        vol = read_raw_volume(path)
        if labels and isinstance(vol, Volume):
            raise BadFormat(f"{path}: raw volume is not a label volume")
        return vol
    return read_nifti(path, labels=labels)


def write_volume(v, path: str) -> None:
    if path.endswith(".nii") or path.endswith(".nii.gz"):
        if isinstance(v, LabelVolume):
            write_nifti(Volume(v.data.astype(np.float32), v.spacing, v.origin), path)
        else:
            write_nifti(v, path)
    else:
        write_raw_volume(v, path)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def write_transform(phi: TransformMap, path: str) -> None:
    """Raw little-endian float32 array of shape dims + (3,) plus sidecar."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(phi.values.astype("<f4")).tobytes())
    meta = {
        "format": TRANSFORM_FORMAT,
        "dims": list(phi.dims),
        "convention": TRANSFORM_CONVENTION,
    }
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f)


def read_transform(path: str) -> TransformMap:
    _require_file(path)
    side = _sidecar(path)
    if not os.path.isfile(side):
        raise MissingFile(f"missing sidecar: {side}")
    with open(side) as f:
        meta = json.load(f)
    if meta.get("format") != TRANSFORM_FORMAT:
        raise BadFormat(f"{side}: not a {TRANSFORM_FORMAT} sidecar")
    if meta.get("convention") != TRANSFORM_CONVENTION:
        raise BadFormat(f"{side}: unknown convention {meta.get('convention')!r}")
    dims = tuple(int(d) for d in meta["dims"])
    values = np.fromfile(path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2] * 3
    if values.size != expected:
        raise BadFormat(f"{path}: expected {expected} floats, found {values.size}")
    return TransformMap(values.reshape(dims + (3,)))


# ---------------------------------------------------------------------------
# landmarks (CSV: x_mm,y_mm,z_mm; header line optional)
# ---------------------------------------------------------------------------

def read_landmarks(path: str) -> np.ndarray:
    _require_file(path)
    points = []
    with open(path) as f:
        for line_no, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                row = [float(p) for p in parts]
            except ValueError:
                if line_no == 0:
                    continue  # header
                raise BadFormat(f"{path}:{line_no + 1}: not a numeric row: {line!r}")
            if len(row) != 3:
                raise BadFormat(f"{path}:{line_no + 1}: expected 3 columns, got {len(row)}")
            points.append(row)
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def write_landmarks(points: np.ndarray, path: str) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("x_mm,y_mm,z_mm\n")
        for p in points:
            f.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")


# ---------------------------------------------------------------------------
# checkpoints (JSON manifest line + float32 parameter blob)
# ---------------------------------------------------------------------------

def save_checkpoint(model: RegistrationModel, path: str) -> None:
    store = model.store
    names = store.names()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "names": names,
        "shapes": {n: list(store.get(n).shape) for n in names},
        "dtype": "float32",
        "phase": model.phase,
        "epoch": model.epoch,
        "side": model.side,
        "gain_voxels": model.gain_voxels,
        "step2_enabled": model.step2_enabled,
        "unet": {
            "depth": model.config.depth,
            "base_channels": model.config.base_channels,
            "in_channels": model.config.in_channels,
            "out_channels": model.config.out_channels,
        },
    }
    blob = b"".join(np.ascontiguousarray(store.get(n).astype("<f4")).tobytes() for n in names)
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8") + b"\n")
        f.write(blob)


def load_checkpoint(path: str) -> RegistrationModel:
    _require_file(path)
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise BadFormat(f"{path}: missing checkpoint manifest line")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise BadFormat(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if manifest.get("dtype") != "float32":
        raise UnsupportedDtype(f"{path}: checkpoint dtype {manifest.get('dtype')!r}")
    cfg = UNetConfig(**manifest["unet"])
    store = ParamStore()
    offset = 0
    for name in manifest["names"]:
        shape = tuple(int(s) for s in manifest["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        store.add(name, arr.reshape(shape).copy())
    if offset != len(blob):
        raise BadFormat(f"{path}: parameter blob size mismatch")
    model = RegistrationModel(
        store=store,
        config=cfg,
        side=int(manifest["side"]),
        gain_voxels=float(manifest["gain_voxels"]),
        step2_enabled=bool(manifest["step2_enabled"]),
        phase=int(manifest["phase"]),
        epoch=int(manifest["epoch"]),
    )
    model.set_phase(model.phase)
    model.step2_enabled = bool(manifest["step2_enabled"])
    return model
