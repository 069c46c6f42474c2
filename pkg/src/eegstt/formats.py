"""On-disk formats: SEGB feature files, EEGR raw recordings, STTC checkpoints,
CSV ingestion, and the CSV logs written by training.

All binary payloads are little-endian; header integers are u32 and numeric
payloads IEEE-754 float32.

SEGB layout::

    b"SEGB" | version u32 | T u32 | C u32 | B u32 | K u32 | count u32
    count x ( trial_id u32 | label u32 | intensity f32 | T*C*B f32 in (t, c, b) order )

EEGR layout::

    b"EEGR" | version u32 | count u32
    count x ( C u32 | samples u32 | sample_rate f32 | trial_id u32 | label u32 |
              intensity f32 | C*samples f32, channel-major )

STTC layout::

    b"STTC" | version u32 | 11 x u32 model config, in ModelConfig field order
    parameters as f32, each array row-major, in model.param_shapes order
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from dataclasses import fields

import numpy as np

from .errors import FormatError
from .model import ModelConfig, check_params, param_shapes
from .signal import FeatureSegment, RawRecording

SEGB_MAGIC = b"SEGB"
EEGR_MAGIC = b"EEGR"
STTC_MAGIC = b"STTC"
FORMAT_VERSION = 1

_SEGB_HEADER = struct.Struct("<4s6I")
_SEG_META = struct.Struct("<IIf")
_EEGR_HEADER = struct.Struct("<4s2I")
_REC_META = struct.Struct("<IIfIIf")
_F32 = np.dtype("<f4")


def atomic_write(path, data: bytes | str):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _check_magic(buf, magic, path):
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported {magic.decode()} version {version}")


def _u32(value, what):
    value = int(value)
    if not 0 <= value < 2 ** 32:
        raise FormatError(f"{what} {value} does not fit in u32")
    return value


# ---------------------------------------------------------------- SEGB

def segb_bytes(segments, classes):
    if not segments:
        raise FormatError("cannot write an empty segment file")
    t, c, b = segments[0].features.shape
    parts = [_SEGB_HEADER.pack(SEGB_MAGIC, FORMAT_VERSION, t, c, b, _u32(classes, "K"), len(segments))]
    for s in segments:
        if s.features.shape != (t, c, b):
            raise FormatError("segments have inconsistent shapes")
        if not 0 <= s.label < classes:
            raise FormatError(f"label {s.label} out of range for {classes} classes")
        parts.append(_SEG_META.pack(_u32(s.trial_id, "trial_id"), _u32(s.label, "label"), float(s.intensity)))
        parts.append(np.ascontiguousarray(s.features, dtype=_F32).tobytes())
    return b"".join(parts)


def write_segb(path, segments, classes):
    atomic_write(path, segb_bytes(segments, classes))


def read_segb_header(path):
    buf = _read(path)
    _check_magic(buf, SEGB_MAGIC, path)
    if len(buf) < _SEGB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, t, c, b, k, count = _SEGB_HEADER.unpack_from(buf, 0)
    return {"format": "SEGB", "version": version, "windows": t, "channels": c, "bands": b,
            "classes": k, "segments": count, "bytes": len(buf)}


def read_segb(path):
    """Returns ``(segments, header)``."""
    return parse_segb(_read(path), path)


def parse_segb(buf, path="<bytes>"):
    _check_magic(buf, SEGB_MAGIC, path)
    if len(buf) < _SEGB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, t, c, b, k, count = _SEGB_HEADER.unpack_from(buf, 0)
    per = _SEG_META.size + 4 * t * c * b
    expected = _SEGB_HEADER.size + count * per
    if len(buf) != expected:
        raise FormatError(f"{path}: header declares {expected} bytes, file has {len(buf)}")
    segments = []
    off = _SEGB_HEADER.size
    for _ in range(count):
        trial_id, label, intensity = _SEG_META.unpack_from(buf, off)
        off += _SEG_META.size
        feats = np.frombuffer(buf, dtype=_F32, count=t * c * b, offset=off).reshape(t, c, b).astype(np.float32)
        off += 4 * t * c * b
        if label >= k:
            raise FormatError(f"{path}: label {label} out of range for {k} classes")
        segments.append(FeatureSegment(feats, int(label), int(trial_id), float(intensity)))
    header = {"windows": t, "channels": c, "bands": b, "classes": k, "segments": count, "version": version}
    return segments, header


# ---------------------------------------------------------------- EEGR

def eegr_bytes(recordings):
    parts = [_EEGR_HEADER.pack(EEGR_MAGIC, FORMAT_VERSION, len(recordings))]
    for r in recordings:
        parts.append(_REC_META.pack(r.channels, r.samples, float(r.sample_rate), _u32(r.trial_id, "trial_id"),
                                    _u32(r.label, "label"), float(r.intensity)))
        parts.append(np.ascontiguousarray(r.data, dtype=_F32).tobytes())
    return b"".join(parts)


def write_eegr(path, recordings):
    atomic_write(path, eegr_bytes(recordings))


def read_eegr(path):
    buf = _read(path)
    _check_magic(buf, EEGR_MAGIC, path)
    if len(buf) < _EEGR_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, _, count = _EEGR_HEADER.unpack_from(buf, 0)
    off = _EEGR_HEADER.size
    out = []
    for i in range(count):
        if off + _REC_META.size > len(buf):
            raise FormatError(f"{path}: truncated at recording {i}")
        c, n, rate, trial_id, label, intensity = _REC_META.unpack_from(buf, off)
        off += _REC_META.size
        size = 4 * c * n
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated payload in recording {i}")
        data = np.frombuffer(buf, dtype=_F32, count=c * n, offset=off).reshape(c, n).astype(np.float32)
        off += size
        out.append(RawRecording(data, float(rate), int(trial_id), int(label), float(intensity)))
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after {count} recordings")
    return out


def read_eegr_header(path):
    recs = read_eegr(path)
    return {"format": "EEGR", "version": FORMAT_VERSION, "recordings": len(recs),
            "channels": sorted({r.channels for r in recs}),
            "sample_rates": sorted({r.sample_rate for r in recs}),
            "trials": len({r.trial_id for r in recs})}


# ---------------------------------------------------------------- STTC

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def checkpoint_bytes(params, cfg: ModelConfig):
    check_params(params, cfg)
    header = struct.pack("<4sI", STTC_MAGIC, FORMAT_VERSION)
    header += struct.pack(f"<{len(_CONFIG_FIELDS)}I", *(getattr(cfg, n) for n in _CONFIG_FIELDS))
    body = b"".join(np.ascontiguousarray(params[n], dtype=_F32).tobytes() for n, _ in param_shapes(cfg))
    return header + body


def write_checkpoint(path, params, cfg):
    atomic_write(path, checkpoint_bytes(params, cfg))


def read_checkpoint(path):
    """Returns ``(params, ModelConfig)``."""
    buf = _read(path)
    _check_magic(buf, STTC_MAGIC, path)
    n = len(_CONFIG_FIELDS)
    if len(buf) < 8 + 4 * n:
        raise FormatError(f"{path}: truncated checkpoint header")
    values = struct.unpack_from(f"<{n}I", buf, 8)
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, values)))
    shapes = param_shapes(cfg)
    off = 8 + 4 * n
    expected = off + 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for this config, found {len(buf)}")
    params = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype=_F32, count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    return params, cfg


def read_checkpoint_header(path):
    buf = _read(path)
    _check_magic(buf, STTC_MAGIC, path)
    n = len(_CONFIG_FIELDS)
    values = struct.unpack_from(f"<{n}I", buf, 8)
    return {"format": "STTC", "version": FORMAT_VERSION, **dict(zip(_CONFIG_FIELDS, values)), "bytes": len(buf)}


def inspect_file(path):
    """Header summary for any of the three binary formats."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    readers = {SEGB_MAGIC: read_segb_header, EEGR_MAGIC: read_eegr_header, STTC_MAGIC: read_checkpoint_header}
    if magic not in readers:
        raise FormatError(f"{path}: unknown file type (magic {magic!r})")
    return readers[magic](path)


# ---------------------------------------------------------------- CSV ingestion

def read_metadata(path):
    """Sidecar ``key=value`` metadata: sample_rate, trial_id, label (intensity optional)."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def convert_csv(path, metadata):
    """Parse a ``time,ch0,ch1,...`` CSV into a :class:`RawRecording`."""
    missing = [k for k in ("sample_rate", "trial_id", "label") if k not in metadata]
    if missing:
        raise FormatError(f"{path}: missing metadata {', '.join(missing)}")
    try:
        rate = float(metadata["sample_rate"])
        trial_id = int(metadata["trial_id"])
        label = int(metadata["label"])
        intensity = float(metadata.get("intensity", 1.0))
    except ValueError as exc:
        raise FormatError(f"{path}: bad metadata value ({exc})") from None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "time" or len(header) < 2:
            raise FormatError(f"{path}:1: header must be 'time,ch0,ch1,...'")
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                raise FormatError(f"{path}:{lineno}: row has {len(row)} fields, expected {width}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64).T
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite sample values")
    return RawRecording(data.astype(np.float32), rate, trial_id, label, intensity)


def recording_to_csv(rec: RawRecording):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time"] + [f"ch{i}" for i in range(rec.channels)])
    for j in range(rec.samples):
        w.writerow([f"{j / rec.sample_rate:.9g}"] + [f"{v:.9g}" for v in rec.data[:, j]])
    return buf.getvalue()


# ---------------------------------------------------------------- logs

def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def read_csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
