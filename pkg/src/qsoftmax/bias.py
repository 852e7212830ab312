"""Quantization bias estimation and correction.

The bias of an activation under a linear reduction T is
``E[T y] - E[T q(y)]``. For softmax outputs the reduction is a sum along the
normalized axis whose expectation is known in advance, so the bias is
estimated against the analytic per-element mean ``1 / n_seq``.

A correction can be added to the dequantized tensor, or folded into the
quantizer offset (``c' = s * z - beta``) so it costs nothing at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quantizer import QuantParams
from .tensor import Tensor, as_tensor, reduce_sum

PER_TENSOR = "per-tensor"
PER_HEAD = "per-head"
TS_PER_TENSOR = "timestep-per-tensor"
TS_PER_HEAD = "timestep-per-head"
GRANULARITIES = (PER_TENSOR, PER_HEAD, TS_PER_TENSOR, TS_PER_HEAD)

TRANSFORMS = ("identity", "sum-last-axis", "mean-all", "mean-per-head")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in TRANSFORMS:
            raise ValueError(f"transform kind must be one of {TRANSFORMS}, got {self.kind!r}")

    def apply(self, y: Tensor) -> np.ndarray:
        y = as_tensor(y)
        if self.kind == "identity":
            return y.data
        if self.kind == "sum-last-axis":
            return reduce_sum(y, -1).data
        if self.kind == "mean-all":
            return reduce_sum(y).data / y.size
        per_head = y.size // y.shape[0]
        return reduce_sum(y, tuple(range(1, y.ndim))).data / per_head


def estimate_bias_general(fp_acts: Sequence[Tensor], q_acts: Sequence[Tensor],
                          transform: TransformSpec = TransformSpec()):
    """Empirical ``E[T y] - E[T q(y)]`` over paired samples.

    Returns a float when the transform reduces to a scalar, else a Tensor.
    """
    if len(fp_acts) != len(q_acts):
        raise ValueError(f"got {len(fp_acts)} float samples but {len(q_acts)} quantized")
    if not fp_acts:
        raise ValueError("need at least one sample")
    acc = None
    for fp, q in zip(fp_acts, q_acts):
        fp, q = as_tensor(fp), as_tensor(q)
        if fp.shape != q.shape:
            raise ValueError(f"paired shapes differ: {fp.shape} vs {q.shape}")
        d = transform.apply(fp) - transform.apply(q)
        acc = d if acc is None else acc + d
    mean = acc / len(fp_acts)
    if np.ndim(mean) == 0:
        return float(mean)
    return Tensor._wrap(mean)


@dataclass(frozen=True)
class Granularity:
    """Sharing scheme for the correction.

    ``n_time_bins`` only matters for the timestep variants; None means one
    bin per timestep.
    """

    tag: str = PER_TENSOR
    n_time_bins: int | None = None

    def __post_init__(self):
        if self.tag not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {self.tag!r}")
        if self.n_time_bins is not None and self.n_time_bins < 1:
            raise ValueError(f"n_time_bins must be >= 1, got {self.n_time_bins}")

    @property
    def timestep_aware(self) -> bool:
        return self.tag in (TS_PER_TENSOR, TS_PER_HEAD)

    @property
    def per_head(self) -> bool:
        return self.tag in (PER_HEAD, TS_PER_HEAD)


def time_bin(t: int, n_bins: int, n_timesteps: int) -> int:
    """Equal-width bin of timestep ``t`` over ``[0, n_timesteps)``."""
    if not 0 <= t < n_timesteps:
        raise ValueError(f"timestep {t} outside [0, {n_timesteps})")
    return t * n_bins // n_timesteps


@dataclass(frozen=True)
class BiasCorrection:
    """Correction values indexed by [time bin, head] (both axes may be length 1)."""

    granularity: Granularity
    beta: np.ndarray
    n_seq: int
    n_timesteps: int | None = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64, copy=True)
        if beta.ndim == 0:
            beta = beta.reshape(1, 1)
        elif beta.ndim == 1:
            beta = beta.reshape(1, -1) if not self.granularity.timestep_aware else beta.reshape(-1, 1)
        if beta.ndim != 2:
            raise ValueError(f"beta must be at most 2-D, got shape {beta.shape}")
        if not np.isfinite(beta).all():
            raise ValueError("beta must be finite")
        if not self.granularity.per_head and beta.shape[1] != 1:
            raise ValueError(f"{self.granularity.tag} takes one value per bin, got {beta.shape[1]}")
        if not self.granularity.timestep_aware and beta.shape[0] != 1:
            raise ValueError(f"{self.granularity.tag} has no time axis, got {beta.shape[0]} bins")
        if self.granularity.timestep_aware and self.n_timesteps is None:
            raise ValueError("timestep-aware corrections need n_timesteps")
        if self.n_seq < 1:
            raise ValueError(f"n_seq must be positive, got {self.n_seq}")
        if np.abs(beta).max() > 1.0 / self.n_seq + 1.0:
            raise ValueError("beta exceeds the sanity bound 1/n_seq + 1")
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)

    @property
    def n_time_bins(self) -> int:
        return self.beta.shape[0]

    def values(self, t: int | None = None) -> np.ndarray:
        """Betas applicable at timestep ``t``: shape (1,) or (n_heads,)."""
        if self.granularity.timestep_aware:
            if t is None:
                raise ValueError(f"{self.granularity.tag} correction needs a timestep")
            return self.beta[time_bin(int(t), self.n_time_bins, self.n_timesteps)]
        if t is not None:
            raise ValueError(f"{self.granularity.tag} correction takes no timestep")
        return self.beta[0]

    def to_json(self) -> dict:
        return {"granularity": self.granularity.tag, "n_time_bins": self.n_time_bins,
                "n_seq": self.n_seq, "n_timesteps": self.n_timesteps,
                "beta": self.beta.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> BiasCorrection:
        g = Granularity(obj["granularity"], obj["n_time_bins"] if obj["granularity"].startswith("timestep") else None)
        beta = np.asarray(obj["beta"], dtype=np.float64).reshape(obj["n_time_bins"], -1)
        return cls(g, beta, obj["n_seq"], obj.get("n_timesteps"))


@dataclass
class SoftmaxBiasAccumulator:
    """Streaming estimator for softmax bias.

    Per-sample head sums are combined in arrival order, so estimates from the
    accumulator and from :func:`estimate_softmax_bias` are identical.
    """

    granularity: Granularity
    n_timesteps: int | None = None
    _sums: dict = field(default_factory=dict)
    _counts: dict = field(default_factory=dict)
    _shape: tuple | None = None

    def add(self, y: Tensor, t: int | None = None) -> None:
        y = as_tensor(y)
        if y.ndim != 3 or y.shape[1] != y.shape[2]:
            raise ValueError(f"expected [n_heads, n_seq, n_seq], got {y.shape}")
        if self._shape is None:
            self._shape = y.shape
        elif y.shape != self._shape:
            raise ValueError(f"sample shape {y.shape} differs from {self._shape}")
        if y.data.min() < 0.0 or y.data.max() > 1.0:
            raise ValueError("softmax outputs must lie in [0, 1]")
        if self.granularity.timestep_aware:
            if t is None:
                raise ValueError(f"{self.granularity.tag} needs a timestep for every sample")
            key = int(t)
        else:
            key = 0
        head_sums = reduce_sum(y, (1, 2)).data
        prev = self._sums.get(key)
        self._sums[key] = head_sums.copy() if prev is None else prev + head_sums
        self._counts[key] = self._counts.get(key, 0) + 1

    def result(self) -> BiasCorrection:
        if not self._counts:
            raise ValueError("empty calibration set")
        n_heads, n_seq, _ = self._shape
        g = self.granularity
        if g.timestep_aware:
            n_ts = self.n_timesteps if self.n_timesteps is not None else max(self._sums) + 1
            n_bins = g.n_time_bins if g.n_time_bins is not None else n_ts
            groups: list[list[int]] = [[] for _ in range(n_bins)]
            for t in sorted(self._sums):
                groups[time_bin(t, n_bins, n_ts)].append(t)
        else:
            n_ts = None
            groups = [[0]]
        rows = []
        for b, keys in enumerate(groups):
            if not keys:
                raise ValueError(f"time bin {b} has no calibration samples; use fewer time bins or more samples")
            total = None
            count = 0
            for k in keys:
                total = self._sums[k].copy() if total is None else total + self._sums[k]
                count += self._counts[k]
            mean_head = total / count  # E_x[sum_jk Y_ijk] per head
            if g.per_head:
                rows.append(1.0 / n_seq - mean_head / n_seq**2)
            else:
                acc = 0.0
                for v in mean_head:
                    acc += v
                rows.append(np.array([1.0 / n_seq - acc / (n_heads * n_seq**2)]))
        return BiasCorrection(g, np.stack(rows), n_seq, n_ts)


def estimate_softmax_bias(q_softmax: Sequence[Tensor], granularity: Granularity,
                          timesteps: Sequence[int] | None = None,
                          n_timesteps: int | None = None) -> BiasCorrection:
    """Estimate the softmax sum deficit from quantized outputs [n_heads, n_seq, n_seq]."""
    if len(q_softmax) == 0:
        raise ValueError("empty calibration set")
    if timesteps is not None and len(timesteps) != len(q_softmax):
        raise ValueError(f"{len(timesteps)} timesteps for {len(q_softmax)} samples")
    if granularity.timestep_aware and timesteps is None:
        raise ValueError(f"{granularity.tag} needs timesteps")
    acc = SoftmaxBiasAccumulator(granularity, n_timesteps)
    for i, y in enumerate(q_softmax):
        acc.add(y, None if not granularity.timestep_aware else timesteps[i])
    return acc.result()


def _broadcast_heads(beta: np.ndarray, n_heads: int) -> np.ndarray:
    if beta.shape[0] == 1:
        return beta[0]
    if beta.shape[0] != n_heads:
        raise ValueError(f"correction has {beta.shape[0]} heads, tensor has {n_heads}")
    return beta.reshape(-1, 1, 1)


def apply_elementwise(q_softmax: Tensor, corr: BiasCorrection, t: int | None = None) -> Tensor:
    """Add the correction to every element. No clamping."""
    y = as_tensor(q_softmax)
    if y.ndim != 3:
        raise ValueError(f"expected [n_heads, n_seq, n_seq], got {y.shape}")
    return Tensor._wrap(y.data + _broadcast_heads(corr.values(t), y.shape[0]))


def absorb_into_offset(p: QuantParams, beta):
    """Corrected offset c' = s * z - beta (scalar, or one per head)."""
    if np.ndim(beta) == 0:
        return p.scale * p.zero_point - float(beta)
    return p.scale * p.zero_point - np.asarray(beta, dtype=np.float64)


def corrected_offsets(p: QuantParams, corr: BiasCorrection, n_heads: int, t: int | None = None):
    """Offset(s) to pair with ``dequantize_with_offset`` for one tensor."""
    beta = corr.values(t)
    if beta.shape[0] == 1:
        return absorb_into_offset(p, beta[0])
    if beta.shape[0] != n_heads:
        raise ValueError(f"correction has {beta.shape[0]} heads, tensor has {n_heads}")
    return absorb_into_offset(p, beta)
