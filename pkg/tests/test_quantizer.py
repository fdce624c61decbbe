import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixq.quantizer import (
    DomainError,
    ExponentRangeError,
    UnsupportedCombinationError,
    dequantize_model,
    lloyd_codebook,
    lloyd_init_grid,
    lq_decode,
    lq_encode,
    nlq_decode,
    nlq_encode,
    precision_sweep,
    quantize_lq,
    quantize_model,
    quantize_nlq,
    round_flag,
    scale_exponent,
    scale_group,
    unscale_group,
)
from fixq.store import FixedPointFormat, FloatModel, WeightTensor

from conftest import random_model
from oracles import kmeans_dp, lq_ref, nlq_ref, nlq_table

GRID = np.arange(-19999, 20000) * 1e-4
sw_values = st.floats(min_value=-1.9999, max_value=1.9999, allow_nan=False)


@pytest.mark.parametrize("m,e", [(0.9, -1), (1.0, 0), (1.5, 0), (0.5, -1), (0.4999, -2), (3.0, 1), (2.0**-8, -8)])
def test_scale_exponent(m, e):
    assert scale_exponent(np.array([m, -m / 3])) == e


def test_scale_exponent_zero_group():
    assert scale_exponent(np.zeros(4)) == 0


def test_scaling_is_exact():
    w = np.random.default_rng(0).normal(size=100)
    e = scale_exponent(w)
    sw = scale_group(w, e)
    assert np.max(np.abs(sw)) < 2 and np.max(np.abs(sw)) >= 1
    assert np.array_equal(unscale_group(sw, e), w)


def test_round_flag():
    assert round_flag(44.5) == 0
    assert round_flag(44.50001) == 1
    assert round_flag(-19.2) == 1


def test_worked_values():
    assert quantize_lq(0.7) == 45 / 64
    assert quantize_lq(-0.3) == -19 / 64
    assert quantize_lq(44.5 / 64) == 44 / 64
    assert quantize_lq(1.999) == 127 / 64
    assert quantize_nlq(0.9) == 29 / 32
    assert quantize_nlq(0.3) == 19 / 64
    assert quantize_nlq(0.1) == 26 / 256
    assert quantize_nlq(0.2499) == 0.25
    assert quantize_nlq(1.99) == 63 / 32


def test_worked_codes():
    assert nlq_encode(0.5) == 0x50
    assert nlq_encode(-0.5) == 0xD0
    assert nlq_encode(26 / 256) == 0x1A
    assert nlq_decode(0x50) == 0.5
    assert lq_encode(-19 / 64) == 0xED
    assert lq_decode(0xED) == -19 / 64


@pytest.mark.parametrize("x", [2.0, -2.5, 2.5, float("nan"), float("inf")])
def test_domain_errors(x):
    with pytest.raises(DomainError):
        quantize_nlq(x)
    with pytest.raises(DomainError):
        quantize_lq(x)


def test_lq_matches_exact_oracle_on_grid():
    q = quantize_lq(GRID)
    ref = np.array([float(lq_ref(x)) for x in GRID[::7]])
    assert np.array_equal(q[::7], ref)


def test_nlq_matches_exact_oracle_on_grid():
    q = quantize_nlq(GRID)
    ref = np.array([float(nlq_ref(x)) for x in GRID[::7]])
    assert np.array_equal(q[::7], ref)


def test_nlq_region_error_bounds():
    q = quantize_nlq(GRID)
    err = np.abs(q - GRID)
    a = np.abs(GRID)
    sat = a > 63 / 32
    assert np.all(err[(a >= 0.5) & ~sat] <= 1 / 64)
    assert np.all(err[(a >= 0.25) & (a < 0.5)] <= 1 / 128)
    assert np.all(err[a < 0.25] <= 1 / 512)
    assert np.all(err[sat] <= 2 - 63 / 32)


def test_lq_error_bound():
    err = np.abs(quantize_lq(GRID) - GRID)
    inside = GRID <= 127 / 64
    assert np.all(err[inside] <= 1 / 128)


@pytest.mark.parametrize("fn", [quantize_lq, quantize_nlq])
def test_monotone_and_idempotent(fn):
    q = fn(GRID)
    assert np.all(np.diff(q) >= 0)
    assert np.array_equal(fn(q), q)


def test_nlq_odd_symmetry_off_ties():
    x = np.random.default_rng(1).uniform(0, 1.99, 20000)
    assert np.array_equal(quantize_nlq(-x), -quantize_nlq(x))


def test_lq_minus_two_is_a_fixed_point():
    assert quantize_lq(-1.9999) == -2.0
    assert quantize_lq(-2.0) == -2.0
    with pytest.raises(DomainError):
        quantize_nlq(-2.0)


def test_lq_negative_power_of_two_group():
    w = np.array([-0.25, 0.1, 0.2]).reshape(1, 1, 1, 3)
    qm = quantize_model(FloatModel([WeightTensor(w)]), "lq", "lw")
    assert qm.exponents[0][0] == -3
    assert lq_decode(int(qm.codes[0][0])) == -2.0
    assert dequantize_model(qm).tensors[0].values.reshape(-1)[0] == -0.25


def test_sweep_offset_zero_on_quantized_model():
    m = dequantize_model(quantize_model(random_model(12, diverse=True), "lq", "cw"))
    assert precision_sweep(m, "cw", offsets=(0,))[0].mse == 0.0


def test_ties_round_down():
    assert quantize_nlq(0.5 + 1 / 64) == 0.5
    assert quantize_nlq(-(0.5 + 1 / 64)) == -(0.5 + 1 / 32)
    assert quantize_lq(-0.5 / 64) == -1 / 64


def test_nlq_codes_exhaustive():
    table = nlq_table()
    assert len(table) == 255
    for code in range(256):
        if code == 0x80:
            with pytest.raises(Exception):
                nlq_decode(code)
            continue
        v = nlq_decode(code)
        assert Fraction(v) == table[code]
        assert nlq_encode(v) == code


def test_nlq_codes_fl4():
    fmt = FixedPointFormat.from_fl(4)
    table = nlq_table(4)
    codes = np.array(sorted(table), dtype=np.uint8)
    vals = nlq_decode(codes, fmt)
    assert [Fraction(v) for v in vals] == [table[c] for c in codes]
    assert np.array_equal(nlq_encode(vals, fmt), codes)
    with pytest.raises(Exception):
        nlq_decode(0x40, fmt)


def test_nlq_encode_rejects_off_grid():
    with pytest.raises(DomainError):
        nlq_encode(0.51)


def test_lq_codes_exhaustive():
    codes = np.arange(256, dtype=np.uint8)
    vals = lq_decode(codes)
    assert np.array_equal(lq_encode(vals), codes)
    assert sorted(vals * 64) == list(range(-128, 128))


@settings(max_examples=300, deadline=None)
@given(sw_values)
def test_nlq_property_oracle(x):
    q = quantize_nlq(x)
    assert Fraction(q) == nlq_ref(x)
    assert nlq_decode(nlq_encode(q)) == q


@settings(max_examples=300, deadline=None)
@given(sw_values, st.integers(min_value=6, max_value=9))
def test_lq_property_oracle(x, fl):
    assert Fraction(quantize_lq(x, fl)) == lq_ref(x, fl)


@settings(max_examples=200, deadline=None)
@given(sw_values, sw_values)
def test_monotone_property(a, b):
    a, b = min(a, b), max(a, b)
    assert quantize_nlq(a) <= quantize_nlq(b)
    assert quantize_lq(a) <= quantize_lq(b)


@pytest.mark.parametrize("scheme", ["lq", "nlq"])
@pytest.mark.parametrize("grouping", ["lw", "cw"])
def test_model_idempotence(scheme, grouping):
    m = random_model(4, diverse=True)
    qm = quantize_model(m, scheme, grouping)
    deq = dequantize_model(qm)
    assert quantize_model(deq, scheme, grouping) == qm


def test_model_does_not_mutate_input():
    m = random_model(5)
    before = [a.copy() for a in m.arrays()]
    quantize_model(m, "nlq", "cw")
    assert all(np.array_equal(a, b) for a, b in zip(before, m.arrays()))


def test_lloyd_cw_refused():
    with pytest.raises(UnsupportedCombinationError, match="not feasible to memorize LUTs"):
        quantize_model(random_model(0), "lloyd", "cw")


def test_exponent_range_error():
    w = np.full((1, 1, 1, 2), 300.0)
    with pytest.raises(ExponentRangeError, match="layer 0 group 0"):
        quantize_model(FloatModel([WeightTensor(w)]), "nlq", "lw")


def test_all_zero_group():
    w = np.zeros((2, 1, 2, 2))
    w[1] = 0.3
    qm = quantize_model(FloatModel([WeightTensor(w)]), "nlq", "cw")
    assert qm.exponents[0][0] == 0
    assert np.all(qm.codes[0][:4] == 0)


def test_threads_give_same_result(monkeypatch):
    m = random_model(6, dims=((4, 3, 3, 3),) * 5)
    base = quantize_model(m, "nlq", "cw", workers=1)
    assert quantize_model(m, "nlq", "cw", workers=4) == base
    monkeypatch.setenv("FIXQ_THREADS", "3")
    assert quantize_model(m, "nlq", "cw") == base


def test_lloyd_init_grid():
    g = lloyd_init_grid(64)
    assert g[0] == -(2 - 2**-6) and g[-1] == 2 - 2**-6
    assert np.all(np.diff(g) > 0)


def test_lloyd_improves_on_init():
    x = np.random.default_rng(7).normal(0, 0.3, 500)
    cb = lloyd_codebook(x, k=16)
    assert cb.mse <= cb.history[0]
    assert np.all(np.diff(cb.history) <= 0)
    assert np.all(np.diff(cb.codewords) > 0)


def test_lloyd_requires_enough_samples():
    with pytest.raises(DomainError):
        lloyd_codebook(np.zeros(3), k=4)


def test_lloyd_exact_when_k_equals_distinct_values():
    x = np.repeat([-0.5, 0.1, 0.7], 10)
    cb = lloyd_codebook(x, k=3)
    assert cb.mse == pytest.approx(0.0, abs=1e-30)
    assert np.allclose(cb.codewords, [-0.5, 0.1, 0.7])


@pytest.mark.parametrize("seed", range(12))
def test_lloyd_matches_dp_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(20, 201))
    k = int(rng.integers(2, 9))
    x = rng.laplace(0, 0.3, n) if seed % 2 else rng.normal(0, 0.3, n)
    m = lloyd_codebook(x, k=k).mse
    assert m <= kmeans_dp(x, k) * 1.01 + 1e-15


def test_lloyd_model_roundtrip():
    m = random_model(8, dims=((2, 3, 3, 3),))
    qm = quantize_model(m, "lloyd", "lw", lloyd_k=16)
    assert qm.codebooks[0].shape == (1, 16)
    assert np.array_equal(qm.codebooks[0].astype(np.float32).astype(np.float64), qm.codebooks[0])
    deq = dequantize_model(qm).tensors[0].values
    assert np.mean((deq - m.tensors[0].values) ** 2) < 1e-4


def test_precision_sweep_strictly_decreasing():
    pts = precision_sweep(random_model(9), "cw")
    assert [p.fl_eff for p in pts] == [6, 7, 8, 9]
    assert all(a.mse > b.mse for a, b in zip(pts, pts[1:]))


def test_precision_sweep_offset_zero_matches_lq():
    m = random_model(10)
    (pt,) = precision_sweep(m, "lw", offsets=(0,))
    deq = dequantize_model(quantize_model(m, "lq", "lw"))
    ref = sum(np.sum((a - b) ** 2) for a, b in zip(deq.arrays(), m.arrays())) / m.manifest.num_params
    assert pt.mse == pytest.approx(ref, rel=1e-12)


def test_precision_sweep_bad_offset():
    with pytest.raises(ValueError):
        precision_sweep(random_model(0), "cw", offsets=(5,))


def test_exponent_matches_log2():
    for m in np.random.default_rng(11).uniform(1e-3, 100, 200):
        assert scale_exponent(np.array([m])) == math.floor(math.log2(m))
