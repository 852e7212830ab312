import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsoftmax.metrics import DB_MEAN, RATIO_MEAN, expected_softmax_sum, sqnr_db, zero_fraction
from qsoftmax.quantizer import fake_quant, softmax_grid
from qsoftmax.tensor import Tensor, softmax


def oracle_sqnr(refs, quants, average="ratio"):
    ratios = []
    for r, q in zip(refs, quants):
        sig = noise = 0.0
        for a, b in zip(np.ravel(r).tolist(), np.ravel(q).tolist()):
            sig += a * a
            noise += (b - a) * (b - a)
        ratios.append(sig / noise)
    if average == "ratio":
        return 10 * math.log10(sum(ratios) / len(ratios))
    return sum(10 * math.log10(x) for x in ratios) / len(ratios)


def test_twenty_db_case():
    ref = Tensor([3.0, 4.0])  # ||ref||^2 = 25
    q = Tensor([3.3, 4.4])  # error (0.3, 0.4) -> 0.25
    rep = sqnr_db([ref], [q])
    assert rep.mean_db == pytest.approx(20.0, abs=1e-9)
    assert rep.n_samples == 1 and not rep.is_infinite


def test_identical_flags_positive_infinity():
    x = Tensor([1.0, -2.0])
    rep = sqnr_db([x, x], [x, Tensor([1.0, -2.5])])
    assert rep.n_pos_inf == 1
    assert rep.mean_db == math.inf and rep.is_infinite
    assert json.loads(json.dumps(rep.to_json()))["mean_db"] == "inf"


def test_zero_reference_flags_negative_infinity():
    rep = sqnr_db([Tensor([0.0, 0.0])], [Tensor([0.1, 0.0])])
    assert rep.per_sample_db == (-math.inf,)
    assert rep.n_neg_inf == 1 and rep.mean_db == -math.inf


def test_errors():
    with pytest.raises(ValueError):
        sqnr_db([Tensor([1.0])], [Tensor([1.0, 2.0])])
    with pytest.raises(ValueError):
        sqnr_db([], [])
    with pytest.raises(ValueError):
        sqnr_db([Tensor([1.0])], [])
    with pytest.raises(ValueError):
        sqnr_db([Tensor([1.0])], [Tensor([2.0])], average="median")


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 50), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_matches_loop_oracle(n_samples, size, scale, seed):
    rng = np.random.default_rng(seed)
    refs = [rng.standard_normal(size) * scale for _ in range(n_samples)]
    quants = [r + rng.standard_normal(size) * scale * 0.01 for r in refs]
    rt, qt = [Tensor(r) for r in refs], [Tensor(q) for q in quants]
    for avg in (RATIO_MEAN, DB_MEAN):
        assert abs(sqnr_db(rt, qt, avg).mean_db - oracle_sqnr(refs, quants, avg)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((3, 4))
    e = rng.standard_normal((3, 4)) * 0.1
    base = sqnr_db([Tensor(r)], [Tensor(r + e)]).mean_db
    scaled = sqnr_db([Tensor(3 * r)], [Tensor(3 * r + 3 * e)]).mean_db
    assert scaled == pytest.approx(base, abs=1e-9)


def test_expectation_inside_log_differs_from_mean_db():
    refs = [Tensor([1.0]), Tensor([1.0])]
    quants = [Tensor([1.1]), Tensor([2.0])]  # ratios 100 and 1
    assert sqnr_db(refs, quants).mean_db == pytest.approx(10 * math.log10(50.5))
    assert sqnr_db(refs, quants, DB_MEAN).mean_db == pytest.approx(10.0)


def test_expected_sum_examples():
    rng = np.random.default_rng(0)
    ys = [softmax(Tensor(rng.standard_normal((2, 16, 16)))) for _ in range(3)]
    assert abs(expected_softmax_sum(ys) - 1.0) <= 1e-12
    assert expected_softmax_sum([Tensor(np.zeros((1, 4, 4)))]) == 0.0
    with pytest.raises(ValueError):
        expected_softmax_sum([])
    with pytest.raises(ValueError):
        expected_softmax_sum([Tensor(np.zeros((4, 4)))])


def test_expected_sum_long_sequence_falls_with_logit_std():
    p = softmax_grid(8)
    rng = np.random.default_rng(1)
    n = 4096
    sums = []
    for std in (2.0, 1.0, 0.5):
        y = fake_quant(softmax(Tensor(rng.standard_normal((1, 64, n)) * std)), p)
        sums.append(expected_softmax_sum([y]))  # 64 query rows keep it fast
    assert all(0.0 < s < 1.0 for s in sums)
    assert sums[0] > sums[1] > sums[2]


def test_zero_fraction_examples():
    assert zero_fraction([Tensor([0.1, 0.2])]) == 0.0
    assert zero_fraction([Tensor(np.zeros(5))]) == 1.0
    assert zero_fraction([Tensor([0.0, 1.0]), Tensor([0.0, 0.0, 3.0, 4.0])]) == 0.5
    assert zero_fraction([Tensor([-0.5, 1.0])], zero_value=-0.5) == 0.5
    with pytest.raises(ValueError):
        zero_fraction([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_fraction_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = fake_quant(Tensor(rng.uniform(0, 0.02, 200)), softmax_grid(8)).data
    assert zero_fraction([Tensor(x)]) == zero_fraction([Tensor(rng.permutation(x))])
