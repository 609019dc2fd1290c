import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lowbit import ConfigError, DataError, ShapeError
from lowbit.quant import (
    PER_CHANNEL,
    DegenerateScaleWarning,
    QuantParams,
    clip_limits,
    dequantize,
    fake_quantize,
    fit_scale,
    naive_scale,
    quant_error,
    quantize,
)


@pytest.mark.parametrize(
    "bits,signed,expected",
    [(1, True, (1, 0)), (2, True, (2, 1)), (3, True, (4, 3)), (1, False, (0, 1)), (2, False, (0, 3)), (3, False, (0, 7))],
)
def test_clip_limits(bits, signed, expected):
    assert clip_limits(bits, signed) == expected


def test_quantize_examples():
    q = QuantParams(2, 0.5)
    assert quantize([0.7], q).data.tolist() == [1]
    assert quantize([0.0], QuantParams(3, 0.37)).data.tolist() == [0]
    assert quantize([-5.0], QuantParams(2, 1.0)).data.tolist() == [-2]


def test_round_half_even():
    assert quantize([0.5, 1.5, 2.5, -0.5], QuantParams(3, 1.0)).data.tolist() == [0, 2, 2, 0]


def test_dequantize_examples():
    q = QuantParams(2, 0.5)
    assert dequantize([1], q).data.tolist() == [0.5]
    assert dequantize([0], q).data.tolist() == [0.0]
    assert fake_quantize([0.7], q).data.tolist() == [0.5]
    assert abs(0.7 - fake_quantize([0.7], q).data[0]) == pytest.approx(0.2, abs=1e-7)


def test_quant_error_examples():
    assert quant_error([-1.0, 0.0, 1.0], QuantParams(2, 1.0)) == 0.0
    assert quant_error([0.7], QuantParams(2, 0.5)) == pytest.approx(0.04, rel=1e-6)
    with pytest.raises(ShapeError):
        quant_error(np.zeros(0, np.float32), QuantParams(2, 1.0))


def test_errors():
    with pytest.raises(DataError):
        quantize([np.nan], QuantParams(2, 1.0))
    with pytest.raises(DataError):
        dequantize([2], QuantParams(2, 1.0))
    with pytest.raises(ConfigError):
        QuantParams(4, 1.0)
    with pytest.raises(ConfigError):
        QuantParams(2, 0.0)
    with pytest.raises(ShapeError):
        quantize(np.zeros((3, 2)), QuantParams(2, [1.0, 1.0]))


def test_params_are_immutable_float32():
    q = QuantParams(2, 0.1)
    assert q.scale == float(np.float32(0.1))
    assert q.zero_point == 2
    with pytest.raises(AttributeError):
        q.bits = 3


def test_per_channel_scales():
    q = QuantParams(2, [1.0, 0.5])
    assert q.granularity == PER_CHANNEL
    assert quantize([[1.0, -1.0], [1.0, -1.0]], q).data.tolist() == [[1, -1], [1, -2]]


def test_fit_exact_example():
    q = fit_scale([-1.0, 1.0], 2, signed=True)
    assert quant_error([-1.0, 1.0], q) == 0.0


def test_fit_degenerate():
    with pytest.warns(DegenerateScaleWarning):
        q = fit_scale(np.zeros(5), 2, signed=True)
    assert q.scale == 1.0
    assert quant_error(np.zeros(5), q) == 0.0


def test_two_bit_signed_code_set(rng):
    t = rng.standard_normal(4000) * 3
    codes = quantize(t, fit_scale(t, 2, True)).data
    assert set(np.unique(codes).tolist()) == {-2, -1, 0, 1}


finite = st.floats(-100, 100, allow_nan=False, width=32)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=finite), st.integers(1, 3), st.booleans())
def test_fit_bounds_and_never_worse(t, bits, signed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateScaleWarning)
        q = fit_scale(t, bits, signed)
    q_n, q_p = clip_limits(bits, signed)
    codes = quantize(t, q).data
    assert codes.min() >= -q_n and codes.max() <= q_p
    if np.any(t != 0) and (signed or np.any(t > 0)):
        s0 = naive_scale(t, bits, signed)
        if s0 > 0:
            assert quant_error(t, q) <= quant_error(t, QuantParams(bits, s0, signed))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.integers(1, 30), elements=finite), st.integers(1, 3), st.floats(1e-3, 10))
def test_error_within_half_step_inside_range(t, bits, s):
    q = QuantParams(bits, s, True)
    recon = fake_quantize(t, q).data.astype(np.float64)
    inside = (t / q.scale >= -q.q_n) & (t / q.scale <= q.q_p)
    err = np.abs(t.astype(np.float64) - recon)[inside]
    assert np.all(err <= q.scale / 2 * (1 + 1e-6) + 1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.integers(1, 30), elements=finite), st.integers(1, 3))
def test_fake_quantize_idempotent(t, bits):
    q = QuantParams(bits, 0.3, True)
    once = fake_quantize(t, q).data
    assert np.array_equal(fake_quantize(once, q).data, once)


def test_per_channel_fit(rng):
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32) * np.array([0.1, 1, 10, 100], np.float32)[:, None, None, None]
    q = fit_scale(w, 2, True, per_channel=True)
    assert q.scale.shape == (4,)
    assert np.all(np.diff(q.scale) > 0)
    for c in range(4):
        assert q.scale[c] == fit_scale(w[c], 2, True).scale
