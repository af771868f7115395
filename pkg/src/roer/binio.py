"""Versioned little-endian binary envelope shared by buffer snapshots and
parameter checkpoints.

Layout (all little-endian):

    bytes 0..7    magic  b"ROERBIN\\0"
    bytes 8..9    u16 format version
    bytes 10..11  u16 payload kind (1 = replay buffer, 2 = checkpoint)
    bytes 12..15  u32 payload byte length
    bytes 16..    payload

Payloads are sequences of tagged numpy arrays written with write_array /
read_array: u32 name length, name bytes (utf-8), u8 dtype code, u8 ndim,
u64 per dimension, then the raw array bytes. dtype codes: 0 = float64,
1 = int64, 2 = uint8.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"ROERBIN\x00"
VERSION = 1
KIND_BUFFER = 1
KIND_CHECKPOINT = 2

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """Raised for bad magic, version mismatch, or a truncated stream."""


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(data)}")
    return data


def write_array(stream, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for field {name!r}")
    nb = name.encode("utf-8")
    stream.write(struct.pack("<I", len(nb)))
    stream.write(nb)
    stream.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        stream.write(struct.pack("<Q", d))
    stream.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_array(stream) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(stream, 4))
    name = _read_exact(stream, nlen).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(stream, 2))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code} for field {name!r}")
    shape = tuple(
        struct.unpack("<Q", _read_exact(stream, 8))[0] for _ in range(ndim)
    )
    dtype = _DTYPES[code]
    nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
    if ndim == 0:
        nbytes = dtype.itemsize
    raw = _read_exact(stream, nbytes)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return name, arr


def write_envelope(path_or_stream, kind: int, payload: bytes) -> None:
    header = MAGIC + struct.pack("<HHI", VERSION, kind, len(payload))
    if hasattr(path_or_stream, "write"):
        path_or_stream.write(header + payload)
    else:
        with open(path_or_stream, "wb") as fh:
            fh.write(header + payload)


def read_envelope(path_or_stream, expected_kind: int) -> io.BytesIO:
    if hasattr(path_or_stream, "read"):
        stream = path_or_stream
    else:
        stream = open(path_or_stream, "rb")
    try:
        magic = _read_exact(stream, 8)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        version, kind, length = struct.unpack("<HHI", _read_exact(stream, 8))
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}")
        if kind != expected_kind:
            raise FormatError(f"payload kind {kind} != expected {expected_kind}")
        payload = _read_exact(stream, length)
    finally:
        if stream is not path_or_stream:
            stream.close()
    return io.BytesIO(payload)


def arrays_to_payload(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        write_array(buf, name, arr)
    return buf.getvalue()


def payload_to_arrays(stream) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    return dict(read_array(stream) for _ in range(count))
