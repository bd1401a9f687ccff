"""Flat binary serialization for named float64 parameter tensors.

Layout: magic ``CATN``, u32 format version, then one record per parameter
in ascending name order: u64 byte-length of the UTF-8 name, the name,
u64 rank, rank u64 dims, then the raw little-endian float64 values in C
order. The reader consumes records until EOF. Round-trips are bit-exact,
which makes checkpoint comparison a plain file compare.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"CATN"
VERSION = 1


def save_params(path, params):
    """Write ``{name: ndarray}`` to ``path``; names are sorted."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(params):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(params[name], dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise DataError(f"truncated checkpoint: expected {what} at byte {pos}")
    return buf[pos:pos + n], pos + n


def load_params(path):
    """Read a checkpoint back into ``{name: ndarray}`` (float64)."""
    with open(path, "rb") as f:
        buf = f.read()
    raw, pos = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise DataError(f"bad checkpoint magic {raw!r}")
    raw, pos = _take(buf, pos, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    params = {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 8, "name length")
        name_len = struct.unpack("<Q", raw)[0]
        raw, pos = _take(buf, pos, name_len, "name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 8, "rank")
        rank = struct.unpack("<Q", raw)[0]
        raw, pos = _take(buf, pos, 8 * rank, "dims")
        dims = struct.unpack(f"<{rank}Q", raw) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, pos = _take(buf, pos, 8 * count, f"values of {name}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        if name in params:
            raise DataError(f"duplicate parameter {name!r} in checkpoint")
        params[name] = arr
    return params


def same_file_bytes(path_a, path_b):
    with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
        return fa.read() == fb.read()
