"""Binary artifact formats: tensor records, checkpoints, PGM previews.

All multi-byte fields are little-endian. Files are written atomically
(temp file in the target directory, then rename) so interrupted runs
never leave truncated artifacts behind.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .params import ParamSet
from .tensor import Tensor

TENSOR_MAGIC = b"MSHT"
CHECKPOINT_MAGIC = b"MSHC"
MOMENTUM_SUFFIX = ".m"
_VERSION = 1


def write_tensor_record(buf, tensor: Tensor) -> None:
    """Append one tensor record: magic, version, rank, extents, f32 payload."""
    data = tensor.data
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<BB", _VERSION, data.ndim))
    buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_tensor_record(buf) -> Tensor:
    head = buf.read(6)
    if len(head) < 6 or head[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor record magic: {head[:4]!r}")
    version, rank = head[4], head[5]
    if version != _VERSION:
        raise FormatError(f"unsupported tensor record version {version}")
    if rank > 4:
        raise FormatError(f"tensor rank {rank} exceeds 4")
    ext = buf.read(4 * rank)
    if len(ext) < 4 * rank:
        raise FormatError("truncated tensor record header")
    shape = struct.unpack(f"<{rank}I", ext) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = buf.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError("truncated tensor record payload")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return Tensor(arr.astype(np.float32))


def _write_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_name(buf) -> str:
    head = buf.read(4)
    if len(head) < 4:
        raise FormatError("truncated name length field")
    n = struct.unpack("<I", head)[0]
    raw = buf.read(n)
    if len(raw) < n:
        raise FormatError("truncated name field")
    return raw.decode("utf-8")


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a sibling temp file + rename; no partial files on error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path: str | Path, tensor: Tensor) -> None:
    buf = io.BytesIO()
    write_tensor_record(buf, tensor)
    atomic_write_bytes(path, buf.getvalue())


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor_record(fh)


def save_checkpoint(path: str | Path, params: ParamSet) -> None:
    """Parameters plus momentum buffers (as "<name>.m" records)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", _VERSION))
    buf.write(struct.pack("<I", 2 * len(params)))
    for name, t in params.items():
        _write_name(buf, name)
        write_tensor_record(buf, t)
        _write_name(buf, name + MOMENTUM_SUFFIX)
        write_tensor_record(buf, Tensor(params.momentum(name)))
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> ParamSet:
    with open(path, "rb") as fh:
        head = fh.read(5)
        if len(head) < 5 or head[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic: {head[:4]!r}")
        if head[4] != _VERSION:
            raise FormatError(f"unsupported checkpoint version {head[4]}")
        count_raw = fh.read(4)
        if len(count_raw) < 4:
            raise FormatError("truncated checkpoint header")
        count = struct.unpack("<I", count_raw)[0]
        records: dict[str, Tensor] = {}
        for _ in range(count):
            name = _read_name(fh)
            records[name] = read_tensor_record(fh)
    params = ParamSet()
    for name, t in records.items():
        if name.endswith(MOMENTUM_SUFFIX):
            continue
        params.add(name, t)
        mom = records.get(name + MOMENTUM_SUFFIX)
        if mom is not None:
            if mom.shape != t.shape:
                raise FormatError(f"momentum shape mismatch for {name}")
            params.momentum(name)[...] = mom.data
    return params


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM preview with linear min-max scaling."""
    img = np.asarray(values, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise FormatError(f"PGM preview needs a single-channel map, got shape {values.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(img)
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.astype(np.uint8).tobytes())
