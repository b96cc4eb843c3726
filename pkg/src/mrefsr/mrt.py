"""MRT1 binary tensor records and the checkpoint container built on them.

Record layout (little endian)::

    b"MRT1" | u32 rank | rank x u64 extents | u8 dtype (0=f64, 1=f32) | payload

A checkpoint is ``b"MRCK" | u32 version | u64 manifest length | manifest
JSON | one MRT1 record per tensor``, with records in manifest order.
"""

import io
import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import ContractViolation

MAGIC = b"MRT1"
CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1
DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def write_tensor(fh, array):
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise ContractViolation(f"unsupported dtype {array.dtype} (only float64/float32)")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(struct.pack("<B", DTYPE_CODES[dt]))
    fh.write(np.ascontiguousarray(array, dtype=dt).tobytes(order="C"))


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractViolation(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh):
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise ContractViolation(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (code,) = struct.unpack("<B", _read_exact(fh, 1))
    if code not in CODE_DTYPES:
        raise ContractViolation(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_tensor(path, array):
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)


def dumps_tensor(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def loads_tensor(data):
    return read_tensor(io.BytesIO(data))


def save_checkpoint(path, tensors, meta=None):
    """Write named arrays plus a JSON-serializable ``meta`` dict."""
    manifest = {"meta": meta or {}, "tensors": list(tensors)}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in manifest["tensors"]:
            write_tensor(fh, tensors[name])


def load_checkpoint(path):
    """Return ``(OrderedDict name -> array, meta)``."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CKPT_MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint (magic {magic!r})")
        version, n = struct.unpack("<IQ", _read_exact(fh, 12))
        if version != CKPT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(_read_exact(fh, n).decode("utf-8"))
        tensors = OrderedDict((name, read_tensor(fh)) for name in manifest["tensors"])
    return tensors, manifest.get("meta", {})
