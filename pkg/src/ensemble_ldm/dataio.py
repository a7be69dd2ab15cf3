"""On-disk formats: CGF1 field/latent containers, CKP1 checkpoints, series CSV.

CGF1 layout::

    b"CGF1" | u32 LE header length | UTF-8 JSON header | f32 LE payload

The payload is row-major ``[time][chan][lat][lon]``. CKP1 uses the same
framing with magic ``b"CKP1"``; its header carries the tensor manifest
(name, shape, byte offset into the payload) and the config dictionary.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FormatError, GridSpec, ShapeError, SimSequence

CGF_MAGIC = b"CGF1"
CKP_MAGIC = b"CKP1"
_F32 = np.dtype("<f4")
_HEADER_KEYS = ("n_time", "n_chan", "n_lat", "n_lon", "start_year", "start_month",
                "units", "member_id", "kind")


@dataclass
class CgfHeader:
    n_time: int
    n_chan: int
    n_lat: int
    n_lon: int
    start_year: int = 1850
    start_month: int = 1
    units: str = "degC"
    member_id: int = 0
    kind: str = "field"

    def validate(self):
        for name in ("n_time", "n_chan", "n_lat", "n_lon"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise FormatError(f"CGF header field {name!r} must be a positive integer, got {v!r}")
        if self.kind not in ("field", "latent"):
            raise FormatError(f"CGF header field 'kind' must be 'field' or 'latent', got {self.kind!r}")
        if not 1 <= int(self.start_month) <= 12:
            raise FormatError(f"CGF header field 'start_month' out of range: {self.start_month}")

    @property
    def shape(self):
        return (self.n_time, self.n_chan, self.n_lat, self.n_lon)

    @property
    def payload_bytes(self):
        return int(np.prod(self.shape)) * 4


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _frame(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = _dump_json(header)
    return magic + struct.pack("<I", len(head)) + head + payload


def _unframe(raw: bytes, magic: bytes, what: str):
    if len(raw) < 8:
        raise FormatError(f"{what}: file truncated before header")
    if raw[:4] != magic:
        raise FormatError(f"{what}: bad magic {raw[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + n:
        raise FormatError(f"{what}: header_len {n} exceeds file size")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header_json unparsable: {exc}") from exc
    return header, raw[8 + n:]


def encode_cgf(array: np.ndarray, header: CgfHeader) -> bytes:
    arr = np.asarray(array)
    if arr.shape != header.shape:
        raise ShapeError(f"array shape {arr.shape} != header dims {header.shape}")
    header.validate()
    meta = {k: getattr(header, k) for k in _HEADER_KEYS}
    return _frame(CGF_MAGIC, meta, np.ascontiguousarray(arr, dtype=_F32).tobytes())


def decode_cgf(raw: bytes) -> tuple[CgfHeader, np.ndarray]:
    meta, payload = _unframe(raw, CGF_MAGIC, "CGF1")
    missing = [k for k in _HEADER_KEYS if k not in meta]
    if missing:
        raise FormatError(f"CGF1 header missing field(s): {', '.join(missing)}")
    header = CgfHeader(**{k: meta[k] for k in _HEADER_KEYS})
    header.validate()
    if len(payload) != header.payload_bytes:
        raise FormatError(
            f"CGF1 payload has {len(payload)} bytes, header dims "
            f"(n_time, n_chan, n_lat, n_lon)={header.shape} require {header.payload_bytes}")
    arr = np.frombuffer(payload, dtype=_F32).reshape(header.shape).astype(np.float32)
    return header, arr


def write_cgf(path, obj, kind: str | None = None):
    """Write a SimSequence, a LatentSeq, or a raw ``(array, CgfHeader)`` pair."""
    if isinstance(obj, tuple):
        array, header = obj
    elif isinstance(obj, SimSequence):
        array = obj.data[:, None]
        header = CgfHeader(len(obj), 1, *obj.grid.shape, obj.start_year, obj.start_month,
                           "degC", int(obj.member_id), kind or "field")
    else:  # LatentSeq-like
        array = obj.data
        header = CgfHeader(*array.shape, obj.start_year, obj.start_month, "latent",
                           int(obj.member_id), kind or "latent")
    Path(path).write_bytes(encode_cgf(array, header))


def read_cgf_raw(path) -> tuple[CgfHeader, np.ndarray]:
    return decode_cgf(Path(path).read_bytes())


def read_cgf(path):
    """Read a CGF1 file as SimSequence (kind=field) or LatentSeq (kind=latent)."""
    header, arr = read_cgf_raw(path)
    if header.kind == "field":
        if header.n_chan != 1:
            raise FormatError(f"field file must have n_chan=1, got {header.n_chan}")
        return SimSequence(GridSpec.regular(header.n_lat, header.n_lon), arr[:, 0],
                           header.start_year, header.start_month, header.member_id)
    from .vae import LatentSeq

    return LatentSeq(arr, header.start_year, header.start_month, header.member_id)


def save_checkpoint(path, named_tensors: dict, config: dict | None = None):
    """Write named float32 tensors plus a JSON config to a CKP1 file."""
    manifest, chunks, offset = [], [], 0
    for name, t in named_tensors.items():
        arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        buf = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {"tensors": manifest, "config": config or {}}
    Path(path).write_bytes(_frame(CKP_MAGIC, header, b"".join(chunks)))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, config)``; tensors are float32 numpy arrays in manifest order."""
    header, payload = _unframe(Path(path).read_bytes(), CKP_MAGIC, "CKP1")
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError("CKP1: header lacks tensor manifest")
    tensors, expected, seen = {}, 0, set()
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in seen:
            raise FormatError(f"CKP1: duplicate tensor name {name!r}")
        if off != expected:
            raise FormatError(f"CKP1: tensor {name!r} offset {off} != expected {expected}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if off + nbytes > len(payload):
            raise FormatError(f"CKP1: tensor {name!r} runs past end of payload")
        tensors[name] = np.frombuffer(payload[off:off + nbytes], dtype=_F32).reshape(shape).astype(np.float32)
        seen.add(name)
        expected = off + nbytes
    if expected != len(payload):
        raise FormatError(f"CKP1: payload has {len(payload)} bytes, manifest covers {expected}")
    return tensors, header.get("config", {})


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_series_csv(path, series: dict):
    """One column per named series, 9 significant digits, LF line endings."""
    names = list(series)
    lengths = {len(series[n]) for n in names}
    if len(lengths) > 1:
        raise ShapeError(f"series lengths differ: { {n: len(series[n]) for n in names} }")
    n = lengths.pop() if lengths else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for i in range(n):
        writer.writerow([_fmt(series[name][i]) for name in names])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def read_series_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    names = rows[0]
    return {name: np.array([float(r[i]) for r in rows[1:]]) for i, name in enumerate(names)}
