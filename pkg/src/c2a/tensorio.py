"""Binary tensor files.

Layout (little-endian)::

    magic   4 bytes  b"C2AT"
    version u32      1
    dtype   u32      0 = float64, 1 = uint16
    ndim    u32
    dims    ndim x u64
    payload raw row-major data
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"C2AT"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u2")}


class TensorFileError(Exception):
    code = "tensor_file_error"


class BadMagicError(TensorFileError):
    code = "bad_magic"


class VersionMismatchError(TensorFileError):
    code = "version_mismatch"


class TruncatedPayloadError(TensorFileError):
    code = "truncated_payload"


class BadDtypeError(TensorFileError):
    code = "bad_dtype"


class EmptyDimsError(TensorFileError):
    code = "empty_dims"


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim == 0:
        raise EmptyDimsError("tensor must have at least one dimension")
    if any(d <= 0 for d in t.shape):
        raise EmptyDimsError(f"all dims must be positive, got {t.shape}")
    if t.dtype == np.float64:
        code = 0
    elif t.dtype == np.uint16:
        code = 1
    else:
        raise BadDtypeError(f"unsupported dtype {t.dtype}")
    header = MAGIC + struct.pack("<III", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("header truncated")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"version {version} != {VERSION}")
    if code not in DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    if ndim == 0:
        raise EmptyDimsError("tensor file declares zero dims")
    off = 16
    if len(buf) < off + 8 * ndim:
        raise TruncatedPayloadError("dims truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    if any(d == 0 for d in dims):
        raise EmptyDimsError(f"zero-length dim in {dims}")
    dtype = DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - off < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, need {need}")
    data = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=off)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor_file(path: str | os.PathLike, t: np.ndarray) -> None:
    blob = encode_tensor(t)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_tensor_file(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
