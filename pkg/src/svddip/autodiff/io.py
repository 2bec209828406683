"""Binary tensor files.

Layout (all little-endian)::

    b"SVDDIPT1"        8-byte magic
    uint8  precision   4 -> float32, 8 -> float64
    uint8  rank
    uint32 dims[rank]
    raw float data, row-major
"""

from __future__ import annotations

import os
import struct
from typing import Union

import numpy as np

from ..errors import InvalidArgumentError
from .tensor import Tensor

MAGIC = b"SVDDIPT1"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

PathLike = Union[str, os.PathLike]


def save_tensor(path: PathLike, value) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype == np.float32:
        flag = 4
    elif arr.dtype == np.float64:
        flag = 8
    else:
        raise InvalidArgumentError(f"tensor files hold float32/float64, got {arr.dtype}")
    if arr.ndim > 255:
        raise InvalidArgumentError("rank too large for tensor file")
    header = MAGIC + struct.pack("<BB", flag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[flag]).tobytes())


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise InvalidArgumentError(f"{path}: not a tensor file (bad magic)")
    if len(blob) < 10:
        raise InvalidArgumentError(f"{path}: truncated header")
    flag, rank = struct.unpack_from("<BB", blob, 8)
    if flag not in _DTYPES:
        raise InvalidArgumentError(f"{path}: unknown precision flag {flag}")
    offset = 10 + 4 * rank
    if len(blob) < offset:
        raise InvalidArgumentError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 10)
    dtype = _DTYPES[flag]
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != count * dtype.itemsize:
        raise InvalidArgumentError(f"{path}: payload size does not match shape {dims}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))
