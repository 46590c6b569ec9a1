"""DMT4: a minimal little-endian tensor container.

Layout::

    magic    b"DMT4"          4 bytes
    version  u8 = 1
    dtype    u8               0 float32, 1 complex64 (interleaved re/im), 2 uint8
    ndim     u8
    reserved u8 = 0
    dims     ndim x u64 LE
    payload  row-major, last axis fastest, little-endian
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DMT4"
VERSION = 1
HEADER_SIZE = 8

DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<c8"),
    2: np.dtype("u1"),
}
CODES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


def dtype_code(dtype):
    dt = np.dtype(dtype).newbyteorder("=")
    if dt == np.bool_:
        return 2
    try:
        return CODES[dt]
    except KeyError:
        raise TypeError(f"dtype {dtype} has no DMT4 code; expected float32, complex64 or uint8") from None


def encode(array):
    arr = np.asarray(array)
    code = dtype_code(arr.dtype)
    if arr.ndim > 255:
        raise ValueError("DMT4 supports at most 255 dimensions")
    arr = arr.astype(DTYPES[code], order="C", copy=False)
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def decode(buf):
    buf = memoryview(bytes(buf))
    if len(buf) < 4:
        raise FormatError("truncated magic", len(buf))
    if bytes(buf[:4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    version, code, ndim, reserved = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", 5)
    if reserved != 0:
        raise FormatError(f"reserved byte is {reserved}, expected 0", 7)
    dims_end = HEADER_SIZE + 8 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"truncated dims: need {ndim} u64 values", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, HEADER_SIZE)
    dtype = DTYPES[code]
    # python ints: no overflow for absurd dims
    expected = dtype.itemsize
    for d in dims:
        expected *= d
    have = len(buf) - dims_end
    if have < expected:
        raise FormatError(f"truncated payload: {have} of {expected} bytes", len(buf))
    if have > expected:
        raise FormatError(f"{have - expected} trailing bytes after payload", dims_end + expected)
    out = np.frombuffer(buf, dtype=dtype, offset=dims_end, count=expected // dtype.itemsize)
    return out.reshape(dims).astype(dtype.newbyteorder("="))


def write(path, array):
    Path(path).write_bytes(encode(array))


def read(path):
    return decode(Path(path).read_bytes())
