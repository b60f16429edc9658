"""Persistent formats: PNM rasters, the cohort manifest, checkpoints and key=value configs."""

import csv
import io
import json
import os
import struct
from dataclasses import fields

import numpy as np

from . import riskmodels as rm
from .errors import ConfigurationError, DataError
from .synthcohort import PatientRecord

# ---------------------------------------------------------------------------
# PNM


def write_ppm(path, image):
    """[3,H,W] uint8 (or float in [0,1]) -> binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"PPM needs a [3,H,W] image, got {img.shape}")
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def write_pgm(path, image):
    """[H,W] uint8, bool or float in [0,1] -> binary P5."""
    img = np.asarray(image)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def _read_pnm(path, magic):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic or tokens[3] != b"255":
        raise DataError(f"{path}: expected {magic.decode()} with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, offset=pos + 1), h, w, path


def read_ppm(path):
    buf, h, w, _ = _read_pnm(path, b"P6")
    if buf.size != 3 * h * w:
        raise DataError(f"{path}: truncated pixel data")
    return buf.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path):
    buf, h, w, _ = _read_pnm(path, b"P5")
    if buf.size != h * w:
        raise DataError(f"{path}: truncated pixel data")
    return buf.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# manifest

MANIFEST_COLUMNS = ("patient_id", "age", "gender_male", "current_smoker", "bmi", "sbp", "dbp",
                    "hba1c", "ethnicity", "total_cholesterol", "prior_event", "mace_5y",
                    "image_files")


def write_manifest(path, records, image_files):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r, files in zip(records, image_files):
            w.writerow([r.id, repr(r.age), int(r.gender_male), int(r.current_smoker), repr(r.bmi),
                        repr(r.sbp), repr(r.dbp), repr(r.hba1c), r.ethnicity,
                        repr(r.total_cholesterol), int(r.prior_cardiac_event),
                        int(r.mace_within_5_years), ";".join(files)])


def read_manifest(path):
    """(records, image file lists)."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: unexpected manifest header")
    records, files = [], []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_COLUMNS):
            raise DataError(f"{path}:{n}: expected {len(MANIFEST_COLUMNS)} columns")
        try:
            rec = PatientRecord(
                id=row[0], age=float(row[1]), gender_male=bool(int(row[2])),
                current_smoker=bool(int(row[3])), bmi=float(row[4]), sbp=float(row[5]),
                dbp=float(row[6]), hba1c=float(row[7]), ethnicity=row[8],
                total_cholesterol=float(row[9]), prior_cardiac_event=bool(int(row[10])),
                mace_within_5_years=bool(int(row[11])))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        records.append(rec)
        files.append(row[12].split(";") if row[12] else [])
    return records, files


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"RRCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def encode_checkpoint(spec, params, standardization, history=None, unavailable=()):
    meta = {
        "spec": rm.describe(spec),
        "standardization": {k: list(v) for k, v in sorted(standardization.stats.items())},
        "unavailable": list(unavailable),
        "history": history or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    names = sorted(params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        out.write(struct.pack("<I", len(key)))
        out.write(key)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def decode_checkpoint(data):
    """-> dict(spec, params, standardization, unavailable, history)."""
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    pos = 12
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (k,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + k].decode()
        pos += k
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from("<%dI" % ndim, data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        arr.flags.writeable = False
        params[name] = arr
        pos += 8 * size
    if pos != len(data):
        raise DataError("trailing bytes after checkpoint payload")
    spec = rm.spec_from_description(meta["spec"])
    std = rm.Standardization({k: tuple(v) for k, v in meta["standardization"].items()})
    return {"spec": spec, "params": params, "standardization": std,
            "unavailable": tuple(meta["unavailable"]), "history": meta["history"]}


def save_checkpoint(path, model, history_summary=None):
    data = encode_checkpoint(model.spec, model.params, model.standardization,
                             history_summary, model.unavailable)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            return decode_checkpoint(f.read())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# key = value config


def parse_config_text(text, known):
    """Parse ``key = value`` lines; ``known`` maps key -> type. Unknown keys are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"config line {n}: unknown key {key!r}")
        out[key] = coerce(key, value, known[key])
    return out


def coerce(key, value, typ):
    try:
        if typ is bool:
            v = value.lower()
            if v not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return v in ("true", "1")
        return typ(value)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def format_config(obj):
    """Echo a dataclass as ``key = value`` lines in field order."""
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc}") from exc
    return path
