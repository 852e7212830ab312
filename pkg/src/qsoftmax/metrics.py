"""SQNR and softmax-bias statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, reduce_sum

RATIO_MEAN = "ratio"  # 10*log10(mean of ratios): expectation inside the log
DB_MEAN = "db"  # mean of per-sample dB values


@dataclass(frozen=True)
class SqnrReport:
    mean_db: float
    per_sample_db: tuple[float, ...]
    n_samples: int
    average: str = RATIO_MEAN

    @property
    def n_pos_inf(self) -> int:
        """Samples with zero quantization noise."""
        return sum(1 for v in self.per_sample_db if v == math.inf)

    @property
    def n_neg_inf(self) -> int:
        """Samples with an all-zero reference but nonzero noise."""
        return sum(1 for v in self.per_sample_db if v == -math.inf)

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.mean_db)

    def to_json(self) -> dict:
        # JSON has no inf; keep it readable as strings
        enc = lambda v: v if math.isfinite(v) else ("inf" if v > 0 else "-inf")  # noqa: E731
        return {"mean_db": enc(self.mean_db), "per_sample_db": [enc(v) for v in self.per_sample_db],
                "n_samples": self.n_samples, "average": self.average,
                "n_pos_inf": self.n_pos_inf, "n_neg_inf": self.n_neg_inf}


def _ratio(signal: float, noise: float) -> float:
    if noise == 0.0:
        return math.inf
    return signal / noise


def _db(ratio: float) -> float:
    if ratio == 0.0:
        return -math.inf
    return 10.0 * math.log10(ratio)


def energy_pair(reference: Tensor, quantized: Tensor) -> tuple[float, float]:
    """(||ref||^2, ||quantized - ref||^2) for one sample."""
    ref, q = as_tensor(reference), as_tensor(quantized)
    if ref.shape != q.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape} vs quantized {q.shape}")
    diff = q.data - ref.data
    signal = float(reduce_sum(Tensor._wrap(ref.data * ref.data)).data)
    noise = float(reduce_sum(Tensor._wrap(diff * diff)).data)
    return signal, noise


def sqnr_from_energies(energies: Sequence[tuple[float, float]], average: str = RATIO_MEAN) -> SqnrReport:
    if not energies:
        raise ValueError("need at least one sample")
    ratios = [_ratio(s, n) for s, n in energies]
    per_db = tuple(_db(r) for r in ratios)
    if average == RATIO_MEAN:
        acc = 0.0
        for r in ratios:
            acc += r
        mean_db = _db(acc / len(ratios))
    elif average == DB_MEAN:
        acc = 0.0
        for v in per_db:
            acc += v
        mean_db = acc / len(per_db)
    else:
        raise ValueError(f"average must be {RATIO_MEAN!r} or {DB_MEAN!r}, got {average!r}")
    return SqnrReport(mean_db, per_db, len(ratios), average)


def sqnr_db(reference: Sequence[Tensor], quantized: Sequence[Tensor], average: str = RATIO_MEAN) -> SqnrReport:
    """Signal-to-quantization-noise ratio in dB over paired samples.

    With the default ``average="ratio"`` the per-sample energy ratios are
    averaged before taking ``10 * log10``. Zero-noise samples give an
    infinite ratio and are counted in ``n_pos_inf``.
    """
    if len(reference) != len(quantized):
        raise ValueError(f"got {len(reference)} reference and {len(quantized)} quantized samples")
    return sqnr_from_energies([energy_pair(r, q) for r, q in zip(reference, quantized)], average)


def mean_row_sum(y: Tensor) -> float:
    """Mean over all rows of the sum along the last axis."""
    y = as_tensor(y)
    rows = reduce_sum(y, -1).data.reshape(-1)
    acc = 0.0
    for v in rows:
        acc += v
    return acc / rows.size


def expected_softmax_sum(q_outputs: Sequence[Tensor]) -> float:
    """Mean per-row sum across samples, heads and rows; 1.0 when unbiased."""
    if len(q_outputs) == 0:
        raise ValueError("expected_softmax_sum needs at least one tensor")
    acc = 0.0
    for y in q_outputs:
        y = as_tensor(y)
        if y.ndim != 3:
            raise ValueError(f"expected [n_heads, n_seq, n_seq], got {y.shape}")
        acc += mean_row_sum(y)
    return acc / len(q_outputs)


def zero_fraction(q_outputs: Sequence[Tensor], zero_value: float = 0.0) -> float:
    """Share of elements exactly equal to ``zero_value`` (the grid's zero)."""
    if len(q_outputs) == 0:
        raise ValueError("zero_fraction needs at least one tensor")
    zeros = total = 0
    for y in q_outputs:
        arr = np.asarray(y)
        zeros += int(np.count_nonzero(arr == zero_value))
        total += arr.size
    return zeros / total
