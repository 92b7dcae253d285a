"""IDX container format (as used by MNIST).

Header: two zero bytes, a dtype code, the number of dimensions, then each
dimension as a big-endian u32. Data follows in big-endian row-major order.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

_CODES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
          0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
_BY_KIND = {("u", 1): 0x08, ("i", 1): 0x09, ("i", 2): 0x0B, ("i", 4): 0x0C, ("f", 4): 0x0D, ("f", 8): 0x0E}


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise ValueError("not an IDX file")
    code, ndim = buf[2], buf[3]
    if code not in _CODES:
        raise ValueError(f"unknown IDX dtype code 0x{code:02x}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    offset = 4 + 4 * ndim
    if len(buf) - offset < count * dtype.itemsize:
        raise ValueError("IDX payload shorter than its header declares")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with _open(path, "rb") as fh:
        return parse_idx(fh.read())


def format_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _BY_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    header = struct.pack(">BBBB", 0, 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_CODES[code]).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    with _open(path, "wb") as fh:
        fh.write(format_idx(arr))


def load_images(path, mean=None, std=None) -> np.ndarray:
    """Images as float64 (N, C, H, W) scaled to [0, 1] for uint8 input, then
    standardized per channel with externally supplied statistics."""
    raw = read_idx(path)
    x = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        x /= 255.0
    if x.ndim == 3:
        x = x[:, None]
    if mean is not None:
        mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
        std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
        x = (x - mean) / np.where(std > 0, std, 1.0)
    return x
