"""Synthetic multi-head attention workloads with fake-quantization insertion points.

A workload is a set of (Q, K, V) triples, each ``[n_heads, n_seq, d_head]``,
tagged with a timestep. The pipeline stacks ``n_layers`` attention blocks
with residual connections: block 0 consumes the generated Q, K, V and uses V
as the residual stream; later blocks derive Q, K, V from the layer-normed
stream through fixed random orthogonal projections. Per-head and per-timestep
logit scales let a workload have heterogeneous heads or drift over time.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .bias import BiasCorrection, Granularity, SoftmaxBiasAccumulator, corrected_offsets
from .metrics import SqnrReport, energy_pair, sqnr_from_energies
from .quantizer import (ASYMMETRIC, MinMaxObserver, QuantParams, dequantize_with_offset, fake_quant,
                        quantize_int, softmax_grid)
from .tensor import Tensor, matmul, reduce_sum, softmax, transpose

LN_EPS = 1e-6


class QuantPoint(str, Enum):
    QUERY = "Query"
    KEY = "Key"
    VALUE = "Value"
    SCORES = "AttnScores"
    SOFTMAX = "SoftmaxOut"


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit sub-seed from a master seed and a label path."""
    h = hashlib.blake2b(repr((int(seed),) + labels).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int = 4
    n_seq: int = 512
    d_head: int = 16
    n_layers: int = 2
    logit_std: float = 1.0
    n_samples: int = 40
    seed: int = 0
    n_timesteps: int = 20
    value_mean: float = 1.0
    # log2 range of per-head logit multipliers: heads span 2**(-s/2) .. 2**(s/2)
    head_spread: float = 0.0
    # same, across timesteps 0 .. n_timesteps-1
    timestep_spread: float = 0.0

    def __post_init__(self):
        for name in ("n_heads", "n_seq", "d_head", "n_layers", "n_samples", "n_timesteps"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not (math.isfinite(self.logit_std) and self.logit_std > 0):
            raise ValueError(f"logit_std must be positive, got {self.logit_std!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        for name in ("value_mean", "head_spread", "timestep_spread"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def head_scales(self) -> np.ndarray:
        if self.n_heads == 1:
            return np.ones(1)
        pos = np.arange(self.n_heads) / (self.n_heads - 1) - 0.5
        return 2.0 ** (self.head_spread * pos)

    def timestep_scale(self, t: int) -> float:
        if self.n_timesteps == 1:
            return 1.0
        return 2.0 ** (self.timestep_spread * (t / (self.n_timesteps - 1) - 0.5))

    def query_scales(self, t: int) -> np.ndarray:
        """Per-head multiplier on Q giving the target score std at timestep t."""
        return self.logit_std * self.timestep_scale(t) * self.head_scales()

    def replace(self, **changes) -> AttentionConfig:
        return AttentionConfig(**{**asdict(self), **changes})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> AttentionConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown attention config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple[tuple[Tensor, Tensor, Tensor], ...]
    timesteps: tuple[int, ...]

    def __post_init__(self):
        if len(self.samples) != len(self.timesteps):
            raise ValueError(f"{len(self.samples)} samples but {len(self.timesteps)} timesteps")
        if not self.samples:
            raise ValueError("calibration set is empty")
        shape = self.samples[0][0].shape
        for q, k, v in self.samples:
            if not (q.shape == k.shape == v.shape == shape) or len(shape) != 3:
                raise ValueError(f"inconsistent sample shapes {q.shape}, {k.shape}, {v.shape}")

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> CalibrationSet:
        return CalibrationSet(tuple(self.samples[i] for i in indices), tuple(self.timesteps[i] for i in indices))

    def split_half(self) -> tuple[CalibrationSet, CalibrationSet]:
        """First half, second half."""
        n = len(self)
        if n < 2:
            raise ValueError("need at least two samples to split")
        return self.subset(range(n // 2)), self.subset(range(n // 2, n))


def gen_inputs(cfg: AttentionConfig) -> CalibrationSet:
    """Gaussian Q, K, V; Q scaled so QK^T/sqrt(d) has std ~= the target logit scale.

    Sample i gets timestep ``i % n_timesteps`` and its own RNG stream, so any
    subset of samples can be regenerated independently.
    """
    shape = (cfg.n_heads, cfg.n_seq, cfg.d_head)
    base = derive_seed(cfg.seed, "inputs")
    samples, ts = [], []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([base, i])
        t = i % cfg.n_timesteps
        q = rng.standard_normal(shape) * cfg.query_scales(t)[:, None, None]
        k = rng.standard_normal(shape)
        v = rng.standard_normal(shape) + cfg.value_mean
        samples.append((Tensor._wrap(q), Tensor._wrap(k), Tensor._wrap(v)))
        ts.append(t)
    return CalibrationSet(tuple(samples), tuple(ts))


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def layer_weights(cfg: AttentionConfig) -> list[tuple[Tensor, Tensor, Tensor]]:
    """(W_q, W_k, W_v) per block after the first, each [n_heads, d_head, d_head]."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "weights"))
    out = []
    for _ in range(1, cfg.n_layers):
        mats = [np.stack([_orthogonal(rng, cfg.d_head) for _ in range(cfg.n_heads)]) for _ in range(3)]
        out.append(tuple(Tensor._wrap(m) for m in mats))
    return out


def layer_norm(x: Tensor) -> Tensor:
    d = x.shape[-1]
    mean = reduce_sum(x, -1).data[..., None] / d
    c = x.data - mean
    var = reduce_sum(Tensor._wrap(c * c), -1).data[..., None] / d
    return Tensor._wrap(c / np.sqrt(var + LN_EPS))


# hook(point, value_before_quantizer, value_after_quantizer)
Hook = Callable[[QuantPoint, Tensor, Tensor], None]
QuantMap = Mapping[QuantPoint, "QuantParams | None"]


def attention_forward(q: Tensor, k: Tensor, v: Tensor, quant: QuantMap | None = None,
                      corr: BiasCorrection | None = None, t: int | None = None,
                      hook: Hook | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with fake quantization at the enabled points.

    A bias correction is applied through the corrected quantizer offset, so it
    requires the softmax output to be quantized. ``t`` selects the time bin of
    timestep-aware corrections.
    """
    quant = {QuantPoint(p): qp for p, qp in (quant or {}).items()}
    sm_params = quant.get(QuantPoint.SOFTMAX)
    if corr is not None and sm_params is None:
        raise ValueError("bias correction needs the softmax output to be quantized")
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise ValueError(f"expected matching [n_heads, n_seq, d_head] inputs, got {q.shape}, {k.shape}, {v.shape}")

    def point(tag: QuantPoint, x: Tensor) -> Tensor:
        p = quant.get(tag)
        y = fake_quant(x, p) if p is not None else x
        if hook is not None:
            hook(tag, x, y)
        return y

    q = point(QuantPoint.QUERY, q)
    k = point(QuantPoint.KEY, k)
    v = point(QuantPoint.VALUE, v)
    raw = matmul(q, transpose(k))
    scores = point(QuantPoint.SCORES, Tensor._wrap(raw.data / math.sqrt(q.shape[-1])))
    probs = softmax(scores)
    if sm_params is None:
        y = probs
        if hook is not None:
            hook(QuantPoint.SOFTMAX, probs, probs)
    else:
        ints = quantize_int(probs, sm_params)
        y = dequantize_with_offset(ints, sm_params.scale, sm_params.offset)
        if hook is not None:
            hook(QuantPoint.SOFTMAX, probs, y)
        if corr is not None:
            offsets = corrected_offsets(sm_params, corr, q.shape[0], t if corr.granularity.timestep_aware else None)
            y = dequantize_with_offset(ints, sm_params.scale, offsets)
    return matmul(y, v)


def _per_layer(value, n_layers: int, name: str) -> list:
    if value is None or isinstance(value, (Mapping, BiasCorrection)):
        return [value] * n_layers
    value = list(value)
    if len(value) != n_layers:
        raise ValueError(f"{name} has {len(value)} entries for {n_layers} layers")
    return value


class Pipeline:
    """Stacked residual attention blocks sharing one set of seeded weights."""

    def __init__(self, cfg: AttentionConfig):
        self.cfg = cfg
        self.weights = layer_weights(cfg)

    def block_inputs(self, layer: int, x: Tensor, t: int) -> tuple[Tensor, Tensor, Tensor]:
        wq, wk, wv = self.weights[layer - 1]
        z = layer_norm(x)
        q = matmul(z, wq).data * self.cfg.query_scales(t)[:, None, None]
        k = matmul(z, wk)
        v = matmul(z, wv).data + self.cfg.value_mean
        return Tensor._wrap(q), k, Tensor._wrap(v)

    def block(self, layer: int, x: Tensor, sample: tuple[Tensor, Tensor, Tensor], t: int,
              quant: QuantMap | None, corr: BiasCorrection | None, hook: Hook | None = None) -> Tensor:
        q, k, v = sample if layer == 0 else self.block_inputs(layer, x, t)
        out = attention_forward(q, k, v, quant, corr, t, hook)
        return Tensor._wrap(x.data + out.data)

    def run(self, cset: CalibrationSet, quant=None, corr=None, hook=None) -> list[Tensor]:
        """Final residual-stream outputs per sample.

        ``quant``/``corr`` are either shared by all layers or given per layer.
        ``hook(layer, sample_index, point, before, after)`` sees every
        quantization point.
        """
        n_layers = self.cfg.n_layers
        quants = _per_layer(quant, n_layers, "quant")
        corrs = _per_layer(corr, n_layers, "corr")
        self._check(cset)
        xs = [s[2] for s in cset.samples]
        for layer in range(n_layers):
            for i, (sample, t) in enumerate(zip(cset.samples, cset.timesteps)):
                h = None if hook is None else (lambda p, a, b, _l=layer, _i=i: hook(_l, _i, p, a, b))
                xs[i] = self.block(layer, xs[i], sample, t, quants[layer], corrs[layer], h)
        return xs

    def _check(self, cset: CalibrationSet) -> None:
        want = (self.cfg.n_heads, self.cfg.n_seq, self.cfg.d_head)
        got = cset.samples[0][0].shape
        if got != want:
            raise ValueError(f"calibration samples have shape {got}, config expects {want}")


def pipeline_forward(cset: CalibrationSet, cfg: AttentionConfig, quant=None, corr=None, hook=None) -> list[Tensor]:
    return Pipeline(cfg).run(cset, quant, corr, hook)


def float_calibration(cset: CalibrationSet, cfg: AttentionConfig, pipeline: Pipeline | None = None):
    """Run the float pipeline, recording min/max of every quantization point per layer.

    Returns (outputs, observers) with ``observers[layer][point]``.
    """
    pipeline = pipeline or Pipeline(cfg)
    observers = [{p: MinMaxObserver() for p in QuantPoint} for _ in range(cfg.n_layers)]

    def hook(layer, _i, point, before, _after):
        observers[layer][point].update(before.data)

    return pipeline.run(cset, hook=hook), observers


def quant_plan(observers, point: QuantPoint, b: int, softmax_minmax: bool = False) -> list[dict]:
    """Per-layer quant maps enabling only ``point`` at ``b`` bits."""
    plan = []
    for obs in observers:
        if point is QuantPoint.SOFTMAX and not softmax_minmax:
            params = softmax_grid(b)
        else:
            params = obs[point].params(b, ASYMMETRIC)
        plan.append({point: params})
    return plan


def calibrate_softmax_bias(cset: CalibrationSet, cfg: AttentionConfig, quant, granularity: Granularity,
                           pipeline: Pipeline | None = None) -> list[BiasCorrection]:
    """Estimate one correction per layer, in depth order.

    Layer l is calibrated on inputs produced with layers < l already
    corrected, matching what it sees at deployment.
    """
    pipeline = pipeline or Pipeline(cfg)
    pipeline._check(cset)
    quants = _per_layer(quant, cfg.n_layers, "quant")
    xs = [s[2] for s in cset.samples]
    corrs: list[BiasCorrection] = []
    for layer in range(cfg.n_layers):
        if quants[layer] is None or quants[layer].get(QuantPoint.SOFTMAX) is None:
            raise ValueError(f"layer {layer} does not quantize the softmax output")
        acc = SoftmaxBiasAccumulator(granularity, cfg.n_timesteps)
        for sample, t, x in zip(cset.samples, cset.timesteps, xs):
            def hook(point, _before, after, _t=t):
                if point is QuantPoint.SOFTMAX:
                    acc.add(after, _t if granularity.timestep_aware else None)
            q, k, v = sample if layer == 0 else pipeline.block_inputs(layer, x, t)
            attention_forward(q, k, v, quants[layer], None, t, hook)
        corrs.append(acc.result())
        if layer + 1 < cfg.n_layers:
            xs = [pipeline.block(layer, x, s, t, quants[layer], corrs[layer])
                  for x, s, t in zip(xs, cset.samples, cset.timesteps)]
    return corrs


def pipeline_sqnr(reference: Sequence[Tensor], outputs: Sequence[Tensor], average: str = "ratio") -> SqnrReport:
    if len(reference) != len(outputs):
        raise ValueError(f"got {len(reference)} reference and {len(outputs)} outputs")
    return sqnr_from_energies([energy_pair(r, o) for r, o in zip(reference, outputs)], average)


def sensitivity_analysis(cfg: AttentionConfig, b: int = 8, cset: CalibrationSet | None = None,
                         softmax_minmax: bool = False) -> dict[QuantPoint, float]:
    """Output SQNR (dB) with each quantization point enabled on its own."""
    cset = cset if cset is not None else gen_inputs(cfg)
    pipeline = Pipeline(cfg)
    reference, observers = float_calibration(cset, cfg, pipeline)
    result = {}
    for point in QuantPoint:
        outs = pipeline.run(cset, quant_plan(observers, point, b, softmax_minmax))
        result[point] = pipeline_sqnr(reference, outs).mean_db
    return result
