import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbit import ConfigError, ShapeError
from lowbit.bitpack import pack_bitplanes
from lowbit.bitserial import (
    MAX_K,
    TilePlan,
    code_sum,
    conv2d_bitserial,
    dense_bitserial,
    dot_1bit,
    dot_corrected,
    dot_multibit,
    gemm_bitserial,
    im2col,
    make_tile_plan,
    pack_weights,
    popcount_native,
    popcount_portable,
)
from lowbit.quant import QuantParams, dequantize, fit_scale, quantize
from lowbit.ref_ops import ConvParams, conv2d_f32, dense_f32


def packed_row(bits):
    return pack_bitplanes([bits], 1).planes[0, 0]


def test_popcount_kernels_agree(rng):
    x = rng.integers(0, 2**63, size=5000, dtype=np.uint64) ^ rng.integers(0, 2, size=5000, dtype=np.uint64) << np.uint64(63)
    x[:3] = [0, np.uint64(2**64 - 1), 1]
    expected = np.array([bin(int(v)).count("1") for v in x])
    assert np.array_equal(popcount_portable(x), expected)
    assert np.array_equal(popcount_native(x), expected)


def test_dot_1bit_examples():
    assert dot_1bit(packed_row([1, 0, 1, 1]), packed_row([1, 1, 0, 1]), k=4) == 2
    assert dot_1bit(packed_row([1, 1, 1, 1]), packed_row([0, 0, 0, 0])) == 0
    with pytest.raises(ShapeError):
        dot_1bit(np.zeros(2, np.uint64), np.zeros(1, np.uint64))


@pytest.mark.parametrize("kernel", ["portable", "native"])
def test_dot_1bit_random(kernel):
    r = np.random.default_rng(5)
    for _ in range(500):
        k = int(r.integers(1, 201))
        w, a = r.integers(0, 2, (2, k))
        assert dot_1bit(packed_row(w), packed_row(a), k, kernel) == int(w @ a)


def test_dot_multibit_example():
    w = pack_bitplanes([[1, 2]], 2)
    a = pack_bitplanes([[3, 1]], 2)
    assert dot_multibit(w, a) == 5
    assert dot_multibit(pack_bitplanes([[0, 0]], 2), a) == 0


def test_dot_multibit_random():
    r = np.random.default_rng(6)
    for i in range(500):
        bw, ba = 1 + i % 3, 1 + (i // 3) % 3
        k = int(r.integers(1, 300))
        w, a = r.integers(0, 2**bw, k), r.integers(0, 2**ba, k)
        assert dot_multibit(pack_bitplanes([w], bw), pack_bitplanes([a], ba)) == int(w @ a)


def test_dot_corrected_example():
    w = pack_bitplanes([[1, 3]], 2, zero_point=2)
    a = pack_bitplanes([[3, 1]], 2)
    assert code_sum(a) == 4
    assert dot_corrected(w, a) == -2
    assert dot_corrected(w, pack_bitplanes([[0, 0]], 2)) == 0


def test_dot_corrected_random():
    r = np.random.default_rng(7)
    for i in range(500):
        bw, ba = 1 + i % 3, 1 + (i // 3) % 3
        q_n, q_p = 2 ** (bw - 1), 2 ** (bw - 1) - 1
        k = int(r.integers(1, 300))
        v, a = r.integers(-q_n, q_p + 1, k), r.integers(0, 2**ba, k)
        assert dot_corrected(pack_bitplanes([v + q_n], bw, q_n), pack_bitplanes([a], ba)) == int(v @ a)


def test_dot_corrected_rejects_signed_activations():
    with pytest.raises(ConfigError):
        dot_corrected(pack_bitplanes([[1]], 2, 2), pack_bitplanes([[1]], 2, 2))


def test_k_mismatch():
    with pytest.raises(ShapeError):
        dot_multibit(pack_bitplanes([[1, 1]], 1), pack_bitplanes([[1, 1, 1]], 1))


def naive_gemm(wv, a):
    return wv.astype(np.int64) @ a.astype(np.int64).T


def test_gemm_scalar():
    assert gemm_bitserial(pack_bitplanes([[1]], 1), pack_bitplanes([[1]], 1)).data.tolist() == [[1]]


def test_gemm_random_and_plan_invariance():
    r = np.random.default_rng(8)
    v = r.integers(-2, 2, (16, 48))
    a = r.integers(0, 4, (16, 48))
    w_p, a_p = pack_bitplanes(v + 2, 2, 2), pack_bitplanes(a, 2)
    want = naive_gemm(v, a)
    plans = [TilePlan(1, 1, 1), TilePlan(8, 8, a_p.words), TilePlan(8, 8, 1, 4), None]
    for plan in plans:
        assert np.array_equal(gemm_bitserial(w_p, a_p, plan).data, want)
    assert np.array_equal(gemm_bitserial(w_p, a_p, kernel="portable").data, want)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 20), st.integers(1, 20), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_gemm_property(bw, ba, m, n, k, seed):
    r = np.random.default_rng(seed)
    z = 2 ** (bw - 1)
    v = r.integers(-z, z, (m, k))
    a = r.integers(0, 2**ba, (n, k))
    out = gemm_bitserial(pack_bitplanes(v + z, bw, z), pack_bitplanes(a, ba), TilePlan(3, 5, 1, 2))
    assert np.array_equal(out.data, naive_gemm(v, a))


def test_gemm_k_checks():
    with pytest.raises(ShapeError):
        gemm_bitserial(pack_bitplanes([[1, 1]], 1), pack_bitplanes([[1]], 1))
    assert MAX_K == 2**20


def test_tile_plan():
    assert make_tile_plan(64, 64, 64, l1_budget_bytes=32768) == TilePlan(8, 8, 64, 1)
    assert make_tile_plan(64, 64, 1000, l1_budget_bytes=32768) == TilePlan(8, 8, 256, 1)
    assert make_tile_plan(3, 2, 1) == TilePlan(3, 2, 1, 1)
    with pytest.raises(ConfigError):
        make_tile_plan(8, 8, 8, l1_budget_bytes=0)
    with pytest.raises(ConfigError):
        make_tile_plan(8, 8, 8, l1_budget_bytes=100)
    with pytest.raises(ConfigError):
        TilePlan(0, 1, 1)


def test_im2col_examples():
    x = np.arange(2 * 3 * 3).reshape(1, 2, 3, 3)
    cols = im2col(x, ConvParams(1))
    assert np.array_equal(cols, x[0].reshape(2, 9).T)
    assert im2col(np.array([[[[1, 2], [3, 4]]]]), ConvParams(2)).tolist() == [[1, 2, 3, 4]]


def test_im2col_matches_conv(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    p = ConvParams(3, stride=2, padding=1)
    oh, ow = p.output_hw(6, 5)
    cols = im2col(x, p).astype(np.float64)
    got = (cols @ w.reshape(4, -1).T.astype(np.float64)).reshape(2, oh, ow, 4).transpose(0, 3, 1, 2)
    assert np.allclose(got, conv2d_f32(x, w, None, p).data, rtol=1e-5, atol=1e-5)


def test_conv_identity():
    a_q = QuantParams(2, 1.0, signed=False)
    w_q = QuantParams(2, 1.0)
    codes = np.array([[[[0, 1], [2, 3]]]])
    out = conv2d_bitserial(codes, a_q, pack_weights(np.ones((1, 1, 1, 1)), w_q), None, ConvParams(1))
    assert np.array_equal(out.data, dequantize(codes, a_q).data)


@pytest.mark.parametrize("a_bits,w_bits", [(1, 1), (2, 2), (3, 2), (1, 3)])
def test_conv_matches_dequantized_oracle(rng, a_bits, w_bits):
    x = np.abs(rng.standard_normal((1, 8, 6, 6))).astype(np.float32)
    w = rng.standard_normal((4, 8, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    p = ConvParams(3, padding=1)
    a_q = fit_scale(x, a_bits, signed=False)
    w_q = fit_scale(w, w_bits, signed=True, per_channel=True)
    codes = quantize(x, a_q).data
    got = conv2d_bitserial(codes, a_q, pack_weights(w, w_q), b, p).data
    want = conv2d_f32(dequantize(codes, a_q), dequantize(quantize(w, w_q), w_q), b, p).data
    assert np.allclose(got, want, rtol=1e-4, atol=1e-6)


def test_fused_relu_negative_bias(rng):
    a_q = QuantParams(2, 0.5, signed=False)
    w = np.zeros((3, 2, 3, 3), np.float32)
    codes = rng.integers(0, 4, (1, 2, 5, 5))
    out = conv2d_bitserial(codes, a_q, pack_weights(w, QuantParams(2, 1.0)), -np.ones(3), ConvParams(3), fuse_relu=True)
    assert out.shape == (1, 3, 3, 3) and not out.data.any()


def test_dense_bitserial(rng):
    a_q = QuantParams(2, 0.25, signed=False)
    w = rng.standard_normal((5, 20)).astype(np.float32)
    w_q = fit_scale(w, 2, True, per_channel=True)
    codes = rng.integers(0, 4, (3, 20))
    got = dense_bitserial(codes, a_q, pack_weights(w, w_q), None).data
    want = dense_f32(dequantize(codes, a_q), dequantize(quantize(w, w_q), w_q)).data
    assert np.allclose(got, want, rtol=1e-5, atol=1e-6)


def test_conv_rejects_bad_codes():
    w = pack_weights(np.ones((1, 1, 1, 1)), QuantParams(2, 1.0))
    with pytest.raises(ConfigError):
        conv2d_bitserial([[[[4]]]], QuantParams(2, 1.0, signed=False), w, None, ConvParams(1))
    with pytest.raises(ShapeError):
        conv2d_bitserial(np.zeros((1, 2, 1, 1)), QuantParams(2, 1.0, signed=False), w, None, ConvParams(1))
