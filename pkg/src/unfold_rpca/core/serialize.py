"""
Binary tensor format ("UTNS") and a named-tensor container.

UTNS layout, little-endian::

    b"UTNS" | version u32 | rank u32 | dims u64 * rank | payload f64 * prod(dims)

Container layout, little-endian::

    b"UCKP" | version u32 | header_len u32 | header (UTF-8 JSON)
    | count u32 | count * (name_len u32 | name UTF-8 | blob_len u64 | UTNS blob)
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"UTNS"
CONTAINER_MAGIC = b"UCKP"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.array(array, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<II", VERSION, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + array.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    offset = 12
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise FormatError(f"tensor payload is {len(blob) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        name_bytes = name.encode("utf-8")
        blob = encode_tensor(tensors[name])
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<Q", len(blob)))
        buf.write(blob)
    Path(path).write_bytes(buf.getvalue())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container (magic {raw[:4]!r})")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    offset = 12
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (blob_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        tensors[name] = decode_tensor(raw[offset : offset + blob_len])
        offset += blob_len
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, tensors
