"""Minimal `.npy` (format version 1.0) reader and writer.

Only the two dtypes the kit stores are supported: little-endian 8-byte
floats ("<f8") for tensors and 1-byte unsigned integers ("|u1") for
label volumes. Layout is always C order (fortran_order False) and the
header is padded with spaces to a 64-byte boundary ending in a newline,
so a write/read round-trip is bit-exact and files interoperate with any
conforming reader.
"""

from __future__ import annotations

import ast
import struct
from pathlib import Path

import numpy as np

MAGIC = b"\x93NUMPY"
SUPPORTED_DESCRS = {"<f8": np.dtype("<f8"), "|u1": np.dtype("|u1")}


def _descr_for(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.uint8:
        return "|u1"
    raise ValueError(f"unsupported dtype for .npy output: {arr.dtype} (use float64 or uint8)")


def write_npy(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    descr = _descr_for(arr)
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(arr.shape),
    )
    # magic(6) + version(2) + hlen(2) + header must be a multiple of 64
    unpadded = len(MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - unpadded % 64) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(arr.tobytes(order="C"))


def read_npy(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a .npy file (bad magic {magic!r})")
        major, minor = fh.read(2)
        if (major, minor) != (1, 0):
            raise ValueError(f"{path}: unsupported .npy version {major}.{minor}")
        (hlen,) = struct.unpack("<H", fh.read(2))
        header = fh.read(hlen).decode("latin1")
        meta = ast.literal_eval(header)
        descr = meta["descr"]
        if descr not in SUPPORTED_DESCRS:
            raise ValueError(f"{path}: unsupported descr {descr!r} (need <f8 or |u1)")
        if meta["fortran_order"]:
            raise ValueError(f"{path}: fortran_order arrays are not supported")
        shape = tuple(int(s) for s in meta["shape"])
        dtype = SUPPORTED_DESCRS[descr]
        count = int(np.prod(shape)) if shape else 1
        data = fh.read(count * dtype.itemsize)
        if len(data) != count * dtype.itemsize:
            raise ValueError(f"{path}: truncated data section")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()
