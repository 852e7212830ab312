"""Minimal dense tensor: immutable float64 arrays with fixed-order reductions.

All summations run left to right over the reduced (or contracted) axis, so
results are reproducible bit for bit and match a naive loop exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from . import _kernels

MAGIC = b"QBT1"


class Tensor:
    """Immutable row-major array of finite float64 values."""

    __slots__ = ("_data",)

    def __init__(self, data, shape: Iterable[int] | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"data has {arr.size} elements, shape {shape} needs {int(np.prod(shape))}")
            arr = arr.reshape(shape)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # Trusted internal constructor: arr is freshly computed and owned.
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains NaN or Inf")
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        arr.flags.writeable = False
        t._data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values, shaped."""
        return self._data

    @property
    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and np.dtype(dtype) != np.float64:
            return self._data.astype(dtype)
        if copy:
            return self._data.copy()
        return self._data

    def __len__(self) -> int:
        return self._data.shape[0]

    def __getitem__(self, idx) -> Tensor:
        return Tensor._wrap(np.array(self._data[idx]))

    def tolist(self):
        return self._data.tolist()

    def equal(self, other: Tensor) -> bool:
        """Exact elementwise equality including shape."""
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=20)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"transpose needs rank >= 2, got shape {x.shape}")
    return Tensor._wrap(np.swapaxes(x.data, -1, -2).copy())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    batch = a.shape[:-2]
    n, k = a.shape[-2:]
    m = b.shape[-1]
    out = _kernels.matmul_batched(a.data.reshape(-1, n, k), b.data.reshape(-1, k, m))
    return Tensor._wrap(out.reshape(batch + (n, m)))


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax along the last axis."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ValueError("softmax needs at least one axis")
    out = _kernels.softmax_rows(x.data.reshape(-1, x.shape[-1]))
    return Tensor._wrap(out.reshape(x.shape))


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    norm = []
    for ax in axes:
        ax = int(ax)
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(norm))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    """Sum over ``axes`` (all axes when None), keeping the rest in order.

    Reduced elements are visited in row-major order of the reduced axes.
    """
    x = as_tensor(x)
    red = _normalize_axes(axes, x.ndim)
    keep = tuple(a for a in range(x.ndim) if a not in red)
    moved = np.transpose(x.data, keep + red)
    out_shape = tuple(x.shape[a] for a in keep)
    r = int(np.prod([x.shape[a] for a in red], dtype=np.int64))
    sums = _kernels.rowsum(np.ascontiguousarray(moved).reshape(-1, r))
    return Tensor._wrap(sums.reshape(out_shape))


# -- serialization -----------------------------------------------------------

def to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.data.astype("<f8").tobytes(order="C")


def from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise ValueError(f"payload is {len(buf) - offset} bytes, shape {dims} needs {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return Tensor(data, shape=dims)


def save(t: Tensor, path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path) -> Tensor:
    return from_bytes(Path(path).read_bytes())


def to_json(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.flat.tolist()}


def from_json(obj) -> Tensor:
    if isinstance(obj, (str, bytes)):
        obj = json.loads(obj)
    return Tensor(obj["data"], shape=obj["shape"])
