"""Binary field and model-bundle formats, CSV tables, manifests and atomic writes.

Field file layout (little-endian throughout)::

    0   4s   magic "CMLF"
    4   u16  format version (1)
    6   u16  dtype tag (1 = float64)
    8   u32  nx
    12  u32  ny
    16  f64  lx
    24  f64  ly
    32  ...  nx*ny float64 values, row-major with x fastest

Model bundle layout::

    0   4s   magic "CMLM"
    4   u16  format version (1)
    6   u64  length of the JSON header
    14  ...  JSON header (UTF-8, sorted keys): spec block and array directory
    ..  ...  concatenated float64 array payloads
    -32 32s  SHA-256 of every preceding byte
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .grid import GridSpec, ScalarField

FIELD_MAGIC = b"CMLF"
MODEL_MAGIC = b"CMLM"
FIELD_VERSION = 1
MODEL_VERSION = 1
DTYPE_F64 = 1
_FIELD_HEADER = struct.Struct("<4sHHIIdd")
_MODEL_HEADER = struct.Struct("<4sHQ")

RESIDUAL_HEADER = ("iteration", "epsilon", "wall_ms")
RESULT_HEADER = ("experiment_id", "case", "metric", "value")


class FormatError(ValueError):
    """Malformed, truncated or tampered file."""


# -- atomic writes -------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# -- fields --------------------------------------------------------------------------


def field_to_bytes(field: ScalarField) -> bytes:
    g = field.grid
    head = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, DTYPE_F64, g.nx, g.ny, g.lx, g.ly)
    return head + np.ascontiguousarray(field.values, dtype="<f8").tobytes()


def field_from_bytes(data: bytes) -> ScalarField:
    if len(data) < _FIELD_HEADER.size:
        raise FormatError(f"field file too short ({len(data)} bytes)")
    magic, version, dtype, nx, ny, lx, ly = _FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FormatError(f"unsupported field version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype tag {dtype}")
    expected = _FIELD_HEADER.size + nx * ny * 8
    if len(data) != expected:
        raise FormatError(f"payload length {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", offset=_FIELD_HEADER.size).reshape(ny, nx)
    try:
        return ScalarField(GridSpec(nx, ny, lx, ly), values)
    except ValueError as e:
        raise FormatError(str(e)) from None


def write_field(path, field: ScalarField) -> Path:
    return atomic_write_bytes(path, field_to_bytes(field))


def read_field(path) -> ScalarField:
    return field_from_bytes(Path(path).read_bytes())


def export_field_image(field: ScalarField, path_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.pgm`` (8-bit grayscale, top row = largest y) and ``<prefix>.csv``."""
    v = field.values
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        img = np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        warnings.warn("constant field exported as mid-gray", RuntimeWarning, stacklevel=2)
        img = np.full(v.shape, 128, dtype=np.uint8)
    img = img[::-1]  # image rows run top to bottom
    ny, nx = v.shape
    pgm = f"P5\n{nx} {ny}\n255\n".encode("ascii") + img.tobytes()
    prefix = Path(path_prefix)
    p1 = atomic_write_bytes(prefix.with_suffix(".pgm"), pgm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in v:
        w.writerow([repr(float(x)) for x in row])
    p2 = atomic_write_text(prefix.with_suffix(".csv"), buf.getvalue())
    return p1, p2


def read_field_csv(path, lx: float = 1.0, ly: float = 1.0) -> ScalarField:
    rows = [[float(x) for x in r] for r in csv.reader(Path(path).read_text().splitlines())]
    a = np.array(rows)
    return ScalarField(GridSpec(a.shape[1], a.shape[0], lx, ly), a)


# -- model bundles -------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def bundle_to_bytes(spec: dict, arrays: dict) -> bytes:
    directory, payload, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        b = a.tobytes()
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        payload.append(b)
        offset += len(b)
    header = _canonical_json({"spec": spec, "arrays": directory})
    body = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(header)) + header + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def bundle_from_bytes(data: bytes) -> tuple[dict, dict]:
    if len(data) < _MODEL_HEADER.size + 32:
        raise FormatError("model bundle too short")
    body, digest = data[:-32], data[-32:]
    magic, version, hlen = _MODEL_HEADER.unpack_from(body)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("content hash mismatch; the bundle is corrupt or was modified")
    start = _MODEL_HEADER.size
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable bundle header: {e}") from None
    base = start + hlen
    arrays = {}
    for ent in header["arrays"]:
        lo = base + ent["offset"]
        hi = lo + ent["nbytes"]
        if hi > len(body):
            raise FormatError(f"array {ent['name']} runs past the end of the bundle")
        arrays[ent["name"]] = np.frombuffer(body[lo:hi], dtype="<f8").reshape(ent["shape"]).copy()
    return header["spec"], arrays


def bundle_hash(path) -> str:
    return Path(path).read_bytes()[-32:].hex()


def write_bundle(path, spec: dict, arrays: dict) -> Path:
    return atomic_write_bytes(path, bundle_to_bytes(spec, arrays))


def read_bundle(path) -> tuple[dict, dict]:
    return bundle_from_bytes(Path(path).read_bytes())


# -- tables and manifests -----------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def write_residual_csv(path, rows) -> Path:
    """Rows of ``(iteration, epsilon, wall_ms)``."""
    return atomic_write_text(path, _csv_text(RESIDUAL_HEADER, rows))


def write_result_csv(path, rows) -> Path:
    """Rows of ``(experiment_id, case, metric, value)``."""
    return atomic_write_text(path, _csv_text(RESULT_HEADER, rows))


def read_result_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
    return rows


def write_manifest(path, manifest: dict) -> Path:
    text = json.dumps(manifest, sort_keys=True, indent=2, allow_nan=True) + "\n"
    return atomic_write_text(path, text)


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
