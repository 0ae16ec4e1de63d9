import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npuvlm.errors import InvalidRangeError, ShapeError, UndefinedSignalError
from npuvlm.qtensor import (
    QTensor, QuantParams, compute_quant_params, dequantize, error_report, fake_quant, pack_int4, qrange,
    quantize, rms_error_percent, sqnr_db, unpack_int4,
)


def test_params_examples():
    p = compute_quant_params(0.0, 1.0, 8, False)
    assert p.scale == pytest.approx(1 / 255) and p.zero_point == 0
    p = compute_quant_params(-1.0, 1.0, 8, True)
    assert p.scale == pytest.approx(1 / 127) and p.zero_point == 0
    assert compute_quant_params(0.0, 0.0, 8, True) == QuantParams(1.0, 0, 8, True)
    assert compute_quant_params(0.0, 0.0, 8, False) == QuantParams(1.0, 0, 8, False)


def test_params_errors():
    with pytest.raises(InvalidRangeError):
        compute_quant_params(1.0, -1.0, 8, True)
    with pytest.raises(InvalidRangeError):
        compute_quant_params(0.0, math.inf, 8, True)
    with pytest.raises(ValueError):
        compute_quant_params(0.0, 1.0, 3, True)
    with pytest.raises(InvalidRangeError):
        QuantParams(1.0, 3, 8, True)


def test_symmetric_grid_excludes_most_negative():
    assert qrange(8, True) == (-127, 127)
    assert qrange(4, True) == (-7, 7)
    assert qrange(8, False) == (0, 255)


def test_quantize_examples():
    unit = QuantParams(1.0, 0, 8, True)
    assert quantize(np.array([0.0, 1.0, -2.0]), unit).qdata.tolist() == [0, 1, -2]
    asym = QuantParams(1 / 255, 0, 8, False)
    assert quantize(np.array([0.0, 0.5, 1.0]), asym).qdata.tolist() == [0, 128, 255]
    assert quantize(np.array([10.0]), QuantParams(1 / 127, 0, 8, True)).qdata.tolist() == [127]


def test_round_half_to_even():
    p = QuantParams(1.0, 0, 8, True)
    assert quantize(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), p).qdata.tolist() == [0, 2, 2, 0, -2]


def test_dequantize_examples():
    assert dequantize(QTensor(np.array([0, 1, -2]), QuantParams(1.0, 0, 8, True))).tolist() == [0.0, 1.0, -2.0]
    assert dequantize(QTensor(np.array([255]), QuantParams(1 / 255, 0, 8, False)))[0] == pytest.approx(1.0)
    assert dequantize(QTensor(np.array([0]), QuantParams(0.5, 10, 8, False)))[0] == -5.0


def test_fake_quant_examples():
    assert fake_quant(np.array([0.3]), QuantParams(1.0, 0, 8, True)).tolist() == [0.0]
    assert fake_quant(np.array([0.26]), QuantParams(0.5, 0, 8, True)).tolist() == [0.5]
    p = QuantParams(0.25, 0, 8, True)
    grid = np.arange(-127, 128) * 0.25
    assert np.array_equal(fake_quant(grid, p), grid.astype(np.float32))


def test_qtensor_rejects_off_grid_codes():
    with pytest.raises(InvalidRangeError):
        QTensor(np.array([-128]), QuantParams(1.0, 0, 8, True))


def test_pack_int4_examples():
    assert pack_int4([]) == b""
    b = pack_int4([1, -1])
    assert len(b) == 1 and b[0] & 0xF == 0x1 and b[0] >> 4 == 0xF
    assert pack_int4([3]) == bytes([0x03])
    with pytest.raises(InvalidRangeError):
        pack_int4([8])
    with pytest.raises(ShapeError):
        unpack_int4(b"\x00", 3)


def test_pack_int4_exhaustive_pairs():
    for a, b in itertools.product(range(-8, 8), repeat=2):
        assert unpack_int4(pack_int4([a, b]), 2).tolist() == [a, b]


def test_pack_int4_exhaustive_short_sequences():
    vals = range(-8, 8)
    for n in range(1, 4):
        for seq in itertools.product(vals, repeat=n):
            assert unpack_int4(pack_int4(seq), n).tolist() == list(seq)


@given(st.lists(st.integers(-8, 7), min_size=0, max_size=200))
def test_pack_int4_bijection(seq):
    assert unpack_int4(pack_int4(seq), len(seq)).tolist() == seq


def test_qtensor_packed_roundtrip():
    rng = np.random.default_rng(1)
    for bits in (4, 8, 16):
        p = compute_quant_params(-1, 1, bits, True)
        q = quantize(rng.uniform(-1, 1, (5, 7)), p)
        assert QTensor.from_packed(q.packed(), q.shape, p) == q


def test_sqnr_and_rms_examples():
    ref = np.ones(4)
    test = np.array([1.1, 0.9, 1.1, 0.9])
    assert sqnr_db(ref, ref) == math.inf
    assert sqnr_db(ref, test) == pytest.approx(20.0)
    assert rms_error_percent(ref, ref) == 0.0
    assert rms_error_percent(ref, test) == pytest.approx(10.0)
    with pytest.raises(UndefinedSignalError):
        sqnr_db(np.zeros(3), np.ones(3))
    with pytest.raises(ShapeError):
        sqnr_db(np.ones(3), np.ones(4))


def test_sqnr_8bit_uniform_law():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 200_000)
    p = compute_quant_params(-1, 1, 8, True)
    assert abs(sqnr_db(x, fake_quant(x, p)) - 48.2) < 1.5


def test_error_report_perfect_match_serialises_null():
    r = error_report(np.ones(3), np.ones(3))
    assert r.to_dict()["sqnr_db"] is None
    assert type(r).from_dict(r.to_dict()) == r


params_st = st.builds(
    lambda lo, span, bits, sym: compute_quant_params(lo, lo + span, bits, sym),
    st.floats(-100, 100), st.floats(1e-3, 200), st.sampled_from([4, 8, 16]), st.booleans(),
)
arrays_st = st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=64).map(np.array)


@given(arrays_st, params_st)
def test_quantize_monotone(x, p):
    order = np.argsort(x, kind="stable")
    q = quantize(x, p).qdata.astype(np.int64)[order]
    assert np.all(np.diff(q) >= 0)


@given(arrays_st, params_st)
def test_saturation(x, p):
    q = quantize(x, p).qdata.astype(np.int64)
    assert q.min() >= p.qmin and q.max() <= p.qmax


def test_saturation_large_random():
    rng = np.random.default_rng(3)
    for _ in range(10):
        bits = int(rng.choice([4, 8, 16]))
        p = compute_quant_params(-rng.uniform(0, 5), rng.uniform(0, 5), bits, bool(rng.integers(2)))
        q = quantize(rng.standard_normal(10_000) * 100, p).qdata.astype(np.int64)
        assert q.min() >= p.qmin and q.max() <= p.qmax


@settings(max_examples=300)
@given(arrays_st, params_st)
def test_fake_quant_idempotent(x, p):
    once = fake_quant(x, p)
    assert np.array_equal(fake_quant(once, p), once)


@given(arrays_st, st.floats(1e-4, 0.5))
def test_sqnr_rms_identity(ref, noise):
    ref = ref + 1.0  # keep the reference away from zero
    if not np.any(ref):
        return
    test = ref + noise * np.sign(np.sin(np.arange(ref.size)) + 0.5)
    s, r = sqnr_db(ref, test), rms_error_percent(ref, test)
    assert r == pytest.approx(100 * 10 ** (-s / 20), rel=1e-6)


@pytest.mark.parametrize("bits", [4, 8, 16])
def test_uniform_sqnr_law(bits):
    rng = np.random.default_rng(bits)
    x = rng.uniform(-1, 1, 1_000_000)
    p = compute_quant_params(-1, 1, bits, True)
    assert abs(sqnr_db(x, dequantize(quantize(x, p)).astype(np.float64)) - 6.02 * bits) < 1.5
