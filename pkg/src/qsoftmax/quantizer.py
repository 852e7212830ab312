"""Uniform affine quantization grids, min-max calibration and fake quantization.

A grid is ``s * (k - z)`` for integer ``k`` in ``[0, 2**b - 1]``. The
dequantized value is computed as ``s * k - c`` with offset ``c = s * z``;
bias correction later swaps ``c`` for a corrected offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor

ASYMMETRIC = "asymmetric"
SYMMETRIC = "symmetric"
SCHEMES = (ASYMMETRIC, SYMMETRIC)

MIN_BITS, MAX_BITS = 2, 16


def _check_bits(b: int) -> int:
    if isinstance(b, bool) or int(b) != b or not MIN_BITS <= b <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {b!r}")
    return int(b)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bitwidth: int
    scheme: str = ASYMMETRIC

    def __post_init__(self):
        b = _check_bits(self.bitwidth)
        object.__setattr__(self, "bitwidth", b)
        s = float(self.scale)
        if not (math.isfinite(s) and s > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        object.__setattr__(self, "scale", s)
        if int(self.zero_point) != self.zero_point:
            raise ValueError(f"zero_point must be an integer, got {self.zero_point!r}")
        z = int(self.zero_point)
        object.__setattr__(self, "zero_point", z)
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 <= z <= self.qmax:
            raise ValueError(f"zero_point {z} outside [0, {self.qmax}]")
        if self.scheme == SYMMETRIC and z != 2 ** (b - 1):
            raise ValueError(f"symmetric grids use zero_point {2 ** (b - 1)}, got {z}")

    @property
    def qmax(self) -> int:
        return 2**self.bitwidth - 1

    @property
    def offset(self) -> float:
        """Floating-point grid offset c = s * z."""
        return self.scale * self.zero_point

    @property
    def grid_min(self) -> float:
        return self.scale * 0 - self.offset

    @property
    def grid_max(self) -> float:
        return self.scale * self.qmax - self.offset

    def to_json(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point,
                "bitwidth": self.bitwidth, "scheme": self.scheme}

    @classmethod
    def from_json(cls, obj: dict) -> QuantParams:
        return cls(scale=obj["scale"], zero_point=obj["zero_point"],
                   bitwidth=obj["bitwidth"], scheme=obj["scheme"])


@dataclass(frozen=True)
class IntTensor:
    """Integer grid indices paired with the bitwidth that bounds them."""

    data: np.ndarray
    bitwidth: int

    def __post_init__(self):
        b = _check_bits(self.bitwidth)
        arr = np.array(self.data, copy=True)
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.array_equal(arr, np.round(arr)):
                raise ValueError("IntTensor data must be integral")
        arr = arr.astype(np.int32)
        if arr.size and (arr.min() < 0 or arr.max() > 2**b - 1):
            raise ValueError(f"integer values outside [0, {2**b - 1}]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray, bitwidth: int) -> IntTensor:
        # trusted: arr is int32 and already clamped to the grid
        arr.flags.writeable = False
        t = cls.__new__(cls)
        object.__setattr__(t, "data", arr)
        object.__setattr__(t, "bitwidth", bitwidth)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    whole = np.trunc(v)
    frac = v - whole  # exact in binary floating point
    return whole + np.sign(v) * (np.abs(frac) >= 0.5)


def quantize_int(x: Tensor, p: QuantParams) -> IntTensor:
    """clamp(round(x / s) + z, 0, 2**b - 1)."""
    x = as_tensor(x)
    q = _kernels.quantize_flat(x.flat, p.scale, float(p.zero_point), float(p.qmax))
    return IntTensor._wrap(q.reshape(x.shape), p.bitwidth)


def quantize_int_reference(x: Tensor, p: QuantParams) -> IntTensor:
    """Vectorized numpy twin of :func:`quantize_int`, kept as a cross-check."""
    x = as_tensor(x)
    v = x.data / p.scale
    # pre-clip keeps huge ratios finite; the final clamp result is unchanged
    v = np.clip(v, -p.zero_point - 1.0, p.qmax - p.zero_point + 1.0)
    q = np.clip(round_half_away(v) + p.zero_point, 0, p.qmax)
    return IntTensor(q.astype(np.int32), p.bitwidth)


def dequantize_with_offset(q: IntTensor, s: float, c) -> Tensor:
    """s * q - c.

    ``c`` is either a scalar or one offset per index of the leading axis
    (one quantizer instance per attention head).
    """
    shape = q.shape
    s = float(s)
    if np.ndim(c) == 0:
        rows = q.data.reshape(1, -1)
        offsets = np.array([float(c)])
    else:
        offsets = np.asarray(c, dtype=np.float64)
        if offsets.ndim != 1 or len(shape) == 0 or offsets.shape[0] != shape[0]:
            raise ValueError(f"offset shape {offsets.shape} does not match leading axis of {shape}")
        rows = q.data.reshape(shape[0], -1)
    return Tensor._wrap(_kernels.dequantize_rows(rows, s, offsets).reshape(shape))


def fake_quant(x: Tensor, p: QuantParams) -> Tensor:
    return dequantize_with_offset(quantize_int(x, p), p.scale, p.offset)


class MinMaxObserver:
    """Running min/max over calibration tensors; mergeable across shards."""

    def __init__(self):
        self.min = math.inf
        self.max = -math.inf
        self.count = 0

    def update(self, x) -> MinMaxObserver:
        arr = np.asarray(x, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("calibration samples must be finite")
        self.min = min(self.min, float(arr.min()))
        self.max = max(self.max, float(arr.max()))
        self.count += 1
        return self

    def merge(self, other: MinMaxObserver) -> MinMaxObserver:
        out = MinMaxObserver()
        out.min = min(self.min, other.min)
        out.max = max(self.max, other.max)
        out.count = self.count + other.count
        return out

    def params(self, b: int, scheme: str = ASYMMETRIC) -> QuantParams:
        if self.count == 0:
            raise ValueError("no calibration samples observed")
        b = _check_bits(b)
        lo, hi = min(self.min, 0.0), max(self.max, 0.0)
        if scheme == ASYMMETRIC:
            if hi == lo:
                return QuantParams(1.0, 0, b, ASYMMETRIC)
            s = (hi - lo) / (2**b - 1)
            z = int(np.clip(round_half_away(-lo / s), 0, 2**b - 1))
            return QuantParams(s, z, b, ASYMMETRIC)
        if scheme == SYMMETRIC:
            amax = max(abs(lo), abs(hi))
            s = amax / (2 ** (b - 1) - 1) if amax > 0 else 1.0
            return QuantParams(s, 2 ** (b - 1), b, SYMMETRIC)
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def calibrate_minmax(samples: Iterable, b: int, scheme: str = ASYMMETRIC) -> QuantParams:
    obs = MinMaxObserver()
    for x in samples:
        obs.update(x)
    if obs.count == 0:
        raise ValueError("calibrate_minmax needs at least one sample")
    return obs.params(b, scheme)


def softmax_grid(b: int) -> QuantParams:
    """Grid covering exactly [0, 1]."""
    b = _check_bits(b)
    return QuantParams(1.0 / (2**b - 1), 0, b, ASYMMETRIC)


def on_grid(values: Sequence[float] | np.ndarray, p: QuantParams) -> np.ndarray:
    """Mask of values that equal some grid point s*k - c exactly."""
    v = np.asarray(values, dtype=np.float64)
    k = np.clip(round_half_away((v + p.offset) / p.scale), 0, p.qmax)
    return p.scale * k - p.offset == v
