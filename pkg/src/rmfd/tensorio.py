"""Binary tensor container I/O.

Two file layouts share one payload convention (row-major, little-endian):

* Single tensor: magic ``RMFD1`` | dtype code (u8) | rank (u8) |
  shape (rank x u32) | payload.  Dtype codes: 0 = float32, 1 = int32.
* Named-tensor archive (checkpoints, reference caches): magic ``RMFDX`` |
  header length (u32) | JSON index mapping name -> {dtype, shape, offset} |
  concatenated payloads.  Offsets are relative to the end of the header.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ManifestError

MAGIC = b"RMFD1"
ARCHIVE_MAGIC = b"RMFDX"

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("int32"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def _coerce(array: np.ndarray) -> np.ndarray:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "iu":
        arr = arr.astype("<i4", copy=False)
    else:
        raise ManifestError(f"unsupported tensor dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    arr = _coerce(array)
    code = 0 if arr.dtype.kind == "f" else 1
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", code, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise ManifestError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    code, rank = struct.unpack("<BB", stream.read(2))
    if code not in _CODE_DTYPES:
        raise ManifestError(f"unknown tensor dtype code {code}")
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ManifestError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | Path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except FileNotFoundError:
        raise ManifestError(f"tensor file not found: {path}") from None


def save_archive(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a named-tensor archive; names are stored sorted for stable bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index: dict[str, dict] = {}
    payload = io.BytesIO()
    for name in sorted(tensors):
        arr = _coerce(tensors[name])
        index[name] = {
            "dtype": "float32" if arr.dtype.kind == "f" else "int32",
            "shape": list(arr.shape),
            "offset": payload.tell(),
        }
        payload.write(arr.tobytes(order="C"))
    header = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(ARCHIVE_MAGIC))
        if magic != ARCHIVE_MAGIC:
            raise ManifestError(f"bad archive magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        index = json.loads(fh.read(header_len).decode("utf-8"))
        blob = fh.read()
    out: dict[str, np.ndarray] = {}
    for name, entry in index.items():
        dtype = np.dtype("<f4") if entry["dtype"] == "float32" else np.dtype("<i4")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        out[name] = (
            np.frombuffer(blob, dtype=dtype, count=count, offset=start)
            .reshape(shape)
            .copy()
        )
    return out
