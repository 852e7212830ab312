import math

import numpy as np
import pytest

from qsoftmax.attention import (AttentionConfig, CalibrationSet, Pipeline, QuantPoint, attention_forward,
                                calibrate_softmax_bias, derive_seed, float_calibration, gen_inputs, pipeline_forward,
                                pipeline_sqnr, quant_plan, sensitivity_analysis)
from qsoftmax.bias import PER_TENSOR, BiasCorrection, Granularity
from qsoftmax.metrics import expected_softmax_sum
from qsoftmax.quantizer import QuantParams, fake_quant, softmax_grid
from qsoftmax.tensor import Tensor

TINY = AttentionConfig(n_heads=2, n_seq=8, d_head=4, n_layers=1, n_samples=3)
SMALL = AttentionConfig(n_heads=2, n_seq=128, d_head=8, n_layers=2, n_samples=4)


def naive_attention(q, k, v):
    """Plain-loop softmax(QK^T/sqrt(d)) V, one head and row at a time."""
    h, n, d = q.shape
    out = np.zeros((h, n, d))
    for a in range(h):
        for i in range(n):
            row = []
            for j in range(n):
                s = 0.0
                for c in range(d):
                    s += q[a, i, c] * k[a, j, c]
                row.append(s / math.sqrt(d))
            m = max(row)
            e = np.exp(np.array([r - m for r in row]))
            tot = 0.0
            for x in e:
                tot += x
            p = [x / tot for x in e]
            for c in range(d):
                acc = 0.0
                for j in range(n):
                    acc += p[j] * v[a, j, c]
                out[a, i, c] = acc
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(n_samples=0)
    with pytest.raises(ValueError):
        AttentionConfig(logit_std=0.0)
    with pytest.raises(ValueError):
        AttentionConfig(seed=-1)
    with pytest.raises(ValueError):
        AttentionConfig.from_json({"n_heads": 2, "heads": 3})
    cfg = AttentionConfig.from_json(TINY.to_json())
    assert cfg == TINY


def test_derive_seed_is_labelled():
    assert derive_seed(0, "inputs") == derive_seed(0, "inputs")
    assert derive_seed(0, "inputs") != derive_seed(0, "weights")
    assert derive_seed(0, "inputs") != derive_seed(1, "inputs")


def test_gen_inputs_deterministic():
    a, b = gen_inputs(TINY), gen_inputs(TINY)
    assert a.timesteps == b.timesteps == (0, 1, 2)
    for sa, sb in zip(a.samples, b.samples):
        assert all(x.equal(y) for x, y in zip(sa, sb))
    c = gen_inputs(TINY.replace(seed=1))
    assert not c.samples[0][0].equal(a.samples[0][0])


def test_gen_inputs_subsets_regenerate_independently():
    full = gen_inputs(TINY.replace(n_samples=5))
    assert all(x.equal(y) for x, y in zip(full.samples[1], gen_inputs(TINY).samples[1]))


def test_logit_scale():
    cfg = AttentionConfig(n_heads=1, n_seq=256, d_head=64, n_samples=2, logit_std=2.0, value_mean=0.0)
    q, k, _ = gen_inputs(cfg).samples[0]
    scores = np.einsum("hid,hjd->hij", q.data, k.data) / 8.0
    assert scores.std() == pytest.approx(2.0, rel=0.05)


def test_head_and_timestep_scales():
    cfg = AttentionConfig(n_heads=3, head_spread=2.0, timestep_spread=1.0, n_timesteps=3)
    assert cfg.head_scales().tolist() == [0.5, 1.0, 2.0]
    assert [cfg.timestep_scale(t) for t in range(3)] == [2**-0.5, 1.0, 2**0.5]


def test_calibration_set_checks():
    s = gen_inputs(TINY).samples
    with pytest.raises(ValueError):
        CalibrationSet(s, (0,))
    with pytest.raises(ValueError):
        CalibrationSet((), ())
    first, second = gen_inputs(TINY.replace(n_samples=5)).split_half()
    assert (len(first), len(second)) == (2, 3)
    assert second.timesteps == (2, 3, 4)


def test_unquantized_matches_naive_reference_exactly():
    for q, k, v in gen_inputs(TINY).samples:
        got = attention_forward(q, k, v).data
        np.testing.assert_array_equal(got, naive_attention(q.data, k.data, v.data))


def test_unquantized_softmax_rows_normalized():
    q, k, v = gen_inputs(TINY).samples[0]
    seen = []
    attention_forward(q, k, v, hook=lambda p, before, after: seen.append((p, after)))
    probs = dict(seen)[QuantPoint.SOFTMAX].data
    assert np.abs(probs.sum(-1) - 1.0).max() <= 1e-12


def test_empty_quant_map_is_float_path():
    q, k, v = gen_inputs(TINY).samples[0]
    base = attention_forward(q, k, v)
    assert attention_forward(q, k, v, {}).equal(base)
    assert attention_forward(q, k, v, {QuantPoint.QUERY: None}).equal(base)


def test_quant_point_isolation():
    q, k, v = gen_inputs(TINY).samples[0]

    def trace(quant):
        seen = {}
        attention_forward(q, k, v, quant, hook=lambda p, before, after: seen.setdefault(p, (before, after)))
        return seen

    ref = trace(None)
    order = list(QuantPoint)
    for idx, point in enumerate(order):
        got = trace({point: QuantParams(0.05, 128, 8)})
        for other in order[:idx]:
            assert got[other][1].equal(ref[other][1])
        # the enabled point sees the float input, then emits the quantized value
        assert got[point][0].equal(ref[point][0])
        assert not got[point][1].equal(ref[point][1])
        for other in order[idx + 1:]:
            if other in (QuantPoint.QUERY, QuantPoint.KEY, QuantPoint.VALUE):
                assert got[other][1].equal(ref[other][1])


def test_correction_requires_softmax_quantization():
    q, k, v = gen_inputs(TINY).samples[0]
    corr = BiasCorrection(Granularity(PER_TENSOR), 0.01, n_seq=8)
    with pytest.raises(ValueError):
        attention_forward(q, k, v, {QuantPoint.QUERY: QuantParams(0.1, 128, 8)}, corr)
    with pytest.raises(ValueError):
        attention_forward(q, k, v, None, corr)


def test_correction_uses_offset_path():
    q, k, v = gen_inputs(TINY).samples[0]
    p = softmax_grid(4)
    beta = 0.01
    corr = BiasCorrection(Granularity(PER_TENSOR), beta, n_seq=8)
    seen = {}
    attention_forward(q, k, v, {QuantPoint.SOFTMAX: p}, hook=lambda pt, b, a: seen.setdefault(pt, b))
    y = fake_quant(seen[QuantPoint.SOFTMAX], p).data + beta
    want = np.einsum("hij,hjd->hid", y, v.data)
    got = attention_forward(q, k, v, {QuantPoint.SOFTMAX: p}, corr).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_quantized_softmax_sum_below_one():
    cfg = AttentionConfig(n_heads=1, n_seq=512, d_head=16, n_samples=2)
    seen = []
    for q, k, v in gen_inputs(cfg).samples:
        attention_forward(q, k, v, {QuantPoint.SOFTMAX: softmax_grid(8)},
                          hook=lambda p, b, a: seen.append(a) if p is QuantPoint.SOFTMAX else None)
    assert expected_softmax_sum(seen) < 1.0


def test_single_layer_is_attention_plus_residual():
    cset = gen_inputs(TINY)
    outs = pipeline_forward(cset, TINY)
    for (q, k, v), o in zip(cset.samples, outs):
        assert o.equal(Tensor(v.data + attention_forward(q, k, v).data))


def test_pipeline_deterministic_and_self_sqnr_infinite():
    cset = gen_inputs(SMALL)
    a = pipeline_forward(cset, SMALL)
    b = pipeline_forward(gen_inputs(SMALL), SMALL)
    assert all(x.equal(y) for x, y in zip(a, b))
    rep = pipeline_sqnr(a, b)
    assert rep.is_infinite and rep.n_pos_inf == len(a)


def test_pipeline_shape_check():
    with pytest.raises(ValueError):
        pipeline_forward(gen_inputs(TINY), SMALL)
    with pytest.raises(ValueError):
        pipeline_forward(gen_inputs(SMALL), SMALL, quant=[{}])


def test_deeper_layers_share_prefix():
    cfg3 = SMALL.replace(n_layers=3)
    assert all(a.equal(b) for a, b in zip(Pipeline(SMALL).weights[0], Pipeline(cfg3).weights[0]))


def test_sqnr_non_increasing_with_depth():
    means = []
    for depth in (1, 2, 3):
        vals = []
        for seed in range(10):
            cfg = SMALL.replace(n_layers=depth, seed=seed)
            cset = gen_inputs(cfg)
            pipe = Pipeline(cfg)
            ref = pipe.run(cset)
            vals.append(pipeline_sqnr(ref, pipe.run(cset, {QuantPoint.SOFTMAX: softmax_grid(8)})).mean_db)
        means.append(float(np.mean(vals)))
    assert means[0] >= means[1] >= means[2]


def test_correction_never_hurts_on_calibration_data():
    for seed in range(10):
        cfg = SMALL.replace(seed=seed, n_seq=256)
        cset = gen_inputs(cfg)
        pipe = Pipeline(cfg)
        ref = pipe.run(cset)
        quant = {QuantPoint.SOFTMAX: softmax_grid(8)}
        corrs = calibrate_softmax_bias(cset, cfg, quant, Granularity(PER_TENSOR), pipe)
        plain = pipeline_sqnr(ref, pipe.run(cset, quant)).mean_db
        fixed = pipeline_sqnr(ref, pipe.run(cset, quant, corrs)).mean_db
        assert fixed >= plain - 0.1


def test_calibrate_requires_softmax_quant():
    cset = gen_inputs(SMALL)
    with pytest.raises(ValueError):
        calibrate_softmax_bias(cset, SMALL, {QuantPoint.QUERY: QuantParams(0.1, 0, 8)}, Granularity(PER_TENSOR))


def test_quant_plan_uses_softmax_grid_by_default():
    _, obs = float_calibration(gen_inputs(TINY), TINY)
    assert quant_plan(obs, QuantPoint.SOFTMAX, 8) == [{QuantPoint.SOFTMAX: softmax_grid(8)}]
    minmax = quant_plan(obs, QuantPoint.SOFTMAX, 8, softmax_minmax=True)[0][QuantPoint.SOFTMAX]
    assert minmax.zero_point == 0 and minmax.scale < softmax_grid(8).scale


def test_sensitivity_small_config():
    cfg = SMALL.replace(n_seq=256)
    r8 = sensitivity_analysis(cfg, 8)
    assert set(r8) == set(QuantPoint)
    assert all(math.isfinite(v) and v > 0 for v in r8.values())
    assert min(r8, key=r8.get) is QuantPoint.SOFTMAX
    r16 = sensitivity_analysis(cfg, 16)
    assert r16[QuantPoint.SOFTMAX] > r8[QuantPoint.SOFTMAX]
