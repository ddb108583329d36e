"""Binary checkpoint format.

Layout (little-endian)::

    b"GACP" | u32 version | u32 json_len | json bytes
    | u32 n_tensors | n_tensors x tensor
    | u8 has_optimizer | [u64 step | u32 n | n x tensor (m/...), n x tensor (v/...)]

    tensor := u16 name_len | name utf-8 | u8 ndim | ndim x u32 dims | float32 data

The JSON blob carries encoder configs, vocabulary, training config and the
random-stream state; it is written with sorted keys so identical contents
always serialize to identical bytes.  Values are stored as float32 and
widened to float64 on load.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"GACP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict
    optimizer_step: int | None = None
    moments: dict = field(default_factory=dict)  # name -> (m, v)

    @property
    def has_optimizer(self) -> bool:
        return self.optimizer_step is not None


def to_storage(a) -> np.ndarray:
    """Round to float32 storage precision and widen back to float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _write_tensor(buf, name: str, arr) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr).tobytes())


def _read(buf, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_tensor(buf):
    (n,) = _read(buf, "<H")
    name = buf.read(n).decode("utf-8")
    (ndim,) = _read(buf, "<B")
    shape = tuple(_read(buf, "<I")[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = buf.read(4 * count)
    if len(raw) != 4 * count:
        raise CheckpointError(f"truncated data for tensor {name!r}")
    return name, np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    names = sorted(ckpt.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(buf, name, ckpt.tensors[name])
    if ckpt.has_optimizer:
        buf.write(struct.pack("<BQ", 1, ckpt.optimizer_step))
        mnames = sorted(ckpt.moments)
        buf.write(struct.pack("<I", len(mnames)))
        for name in mnames:
            _write_tensor(buf, "m/" + name, ckpt.moments[name][0])
        for name in mnames:
            _write_tensor(buf, "v/" + name, ckpt.moments[name][1])
    else:
        buf.write(struct.pack("<B", 0))
    return buf.getvalue()


def loads(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    if buf.read(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, blob_len = _read(buf, "<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(buf.read(blob_len).decode("utf-8"))
    (n,) = _read(buf, "<I")
    tensors = dict(_read_tensor(buf) for _ in range(n))
    (has_opt,) = _read(buf, "<B")
    step, moments = None, {}
    if has_opt:
        (step,) = _read(buf, "<Q")
        (m,) = _read(buf, "<I")
        ms = [_read_tensor(buf) for _ in range(m)]
        vs = [_read_tensor(buf) for _ in range(m)]
        for (mn, ma), (vn, va) in zip(ms, vs):
            moments[mn[2:]] = (ma, va)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(meta, tensors, step, moments)


def save(ckpt: Checkpoint, path) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
