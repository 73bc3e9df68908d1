"""Binary checkpoint of named float64 arrays.

Layout (all integers little-endian)::

    b"HYEC" | u32 version | u32 count
    per array: u32 name_len | name (utf-8) | u8 dtype tag | u32 ndim | u64 dims[ndim] | f64 payload
    u32 CRC32 of every preceding byte
"""

import os
import struct
import zlib

import numpy as np

MAGIC = b"HYEC"
VERSION = 1
DTYPE_F64 = 1


class CheckpointError(ValueError):
    pass


def encode(arrays):
    """Serialize an ordered mapping ``{name: array}`` to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data):
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode()
            pos += n
            tag, ndim = struct.unpack_from("<BI", body, pos)
            pos += 5
            if tag != DTYPE_F64:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(body):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last array")
    return out


def checkpoint_save(path, arrays):
    """Write atomically via a temporary file and rename."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(encode(arrays))
    os.replace(tmp, path)


def checkpoint_load(path):
    with open(path, "rb") as f:
        return decode(f.read())
