"""NGT1 binary tensor format.

Layout: ``b"NGT1"``, one ``u8`` rank, ``rank`` little-endian ``u32`` extents,
then the row-major payload as little-endian float32.
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"NGT1"


class TensorFileError(ValueError):
    """Malformed or truncated NGT1 data."""


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to encode non-finite values")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf, source="<bytes>"):
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise TensorFileError(f"{source}: bad magic, expected NGT1")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise TensorFileError(f"{source}: truncated header")
    shape = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise TensorFileError(
            f"{source}: payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr):
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), source=os.fspath(path))
