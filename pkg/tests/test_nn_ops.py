import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npuvlm import nn_ops as ops
from npuvlm.errors import AccumulatorOverflowError, ShapeError
from npuvlm.qtensor import QTensor, QuantParams, dequantize


def loop_conv(x, w, b, stride, pad, groups=1):
    """Second, independent convolution: plain nested loops."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(oh):
                for j in range(ow):
                    s = 0.0 if b is None else float(b[oc])
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride + u - pad, j * stride + v - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[bi, g * cg + ci, y, xx] * w[oc, ci, u, v]
                    out[bi, oc, i, j] = s
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    spec = ops.Conv2dSpec(3, 3, 1, 1)
    assert np.array_equal(ops.conv2d_direct(x, w, None, spec), x)


def test_conv_zero_weights_bias():
    spec = ops.Conv2dSpec(2, 3, 3, 3, 1, 1)
    b = np.array([1.0, -2.0, 0.5], np.float32)
    y = ops.conv2d_direct(np.ones((1, 2, 4, 4), np.float32), np.zeros(spec.weight_shape, np.float32), b, spec)
    assert np.array_equal(y, np.broadcast_to(b[None, :, None, None], y.shape))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
    spec = ops.Conv2dSpec(3, 4, 3, 3, 2, 1)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    y = ops.conv2d_direct(x, w, b, spec)
    assert y.shape == (1, 4, 3, 3)
    np.testing.assert_allclose(y, loop_conv(x, w, b, 2, 1), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(ops.conv2d(x, w, b, spec), y, rtol=1e-5, atol=1e-5)


def test_depthwise_identity_and_pointwise_matmul():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    spec = ops.Conv2dSpec(4, 4, 3, 3, 1, 1, groups=4)
    w = np.zeros((4, 1, 3, 3), np.float32)
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(ops.depthwise_conv2d(x, w, None, spec), x)
    pw = rng.standard_normal((5, 4)).astype(np.float32)
    ref = np.einsum("oc,nchw->nohw", pw, x)
    np.testing.assert_allclose(ops.pointwise_conv2d(x, pw), ref, rtol=1e-5, atol=1e-5)


def factorized_case(rng, c, o, h, stride, k=3):
    x = rng.standard_normal((1, c, h, h)).astype(np.float32)
    dw = rng.standard_normal((c, 1, k, k)).astype(np.float32)
    pw = rng.standard_normal((o, c)).astype(np.float32)
    dspec = ops.Conv2dSpec(c, c, k, k, stride, k // 2, groups=c)
    fact = ops.pointwise_conv2d(ops.depthwise_conv2d(x, dw, None, dspec), pw)
    dense = pw[:, :, None, None] * dw[:, 0][None]
    direct = ops.conv2d_direct(x, dense, None, ops.Conv2dSpec(c, o, k, k, stride, k // 2))
    return fact, direct


def test_factorized_equals_dense_many_shapes():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c, o = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, s = int(rng.integers(1, 9)), int(rng.integers(1, 3))
        fact, direct = factorized_case(rng, c, o, h, s)
        scale = max(1.0, float(np.abs(direct).max()))
        assert np.max(np.abs(fact - direct)) <= 1e-5 * scale


def test_conv_depthwise_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 7, 7)).astype(np.float32)
    w = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    spec = ops.Conv2dSpec(3, 3, 3, 3, 2, 1, groups=3)
    np.testing.assert_allclose(ops.depthwise_conv2d(x, w, None, spec), loop_conv(x, w, None, 2, 1, 3), rtol=1e-5, atol=1e-5)


def test_out_size_formula_exhaustive():
    for h in range(1, 17):
        for k in range(1, h + 1):
            for s in range(1, 4):
                for p in range(0, k):
                    if h + 2 * p < k:
                        continue
                    spec = ops.Conv2dSpec(1, 1, k, k, s, p)
                    y = ops.conv2d(np.zeros((1, 1, h, h), np.float32), np.zeros(spec.weight_shape, np.float32), None, spec)
                    assert y.shape[-1] == (h + 2 * p - k) // s + 1 == ops.conv_out_size(h, k, s, p)


def test_conv_shape_errors():
    spec = ops.Conv2dSpec(3, 4, 3, 3)
    with pytest.raises(ShapeError):
        ops.conv2d(np.zeros((1, 2, 5, 5), np.float32), np.zeros(spec.weight_shape, np.float32), None, spec)
    with pytest.raises(ShapeError):
        ops.Conv2dSpec(3, 4, 3, 3, groups=2)


def test_avg_pool_examples():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    assert ops.avg_pool2d(x, 3, 3).tolist() == [[[[5.0]]]]
    c = np.full((1, 2, 6, 6), 1.5, np.float32)
    assert np.all(ops.avg_pool2d(c, 3, 3) == 1.5)
    assert ops.avg_pool2d(np.zeros((1, 1, 48, 48), np.float32), 3, 3).shape == (1, 1, 16, 16)


def test_upsample_examples():
    x = np.random.default_rng(5).standard_normal((1, 2, 3, 3)).astype(np.float32)
    assert np.array_equal(ops.upsample_nearest(x, 1), x)
    assert np.all(ops.upsample_nearest(np.full((1, 1, 1, 1), 7.0, np.float32), 2) == 7.0)
    c = np.full((1, 1, 4, 4), 2.0, np.float32)
    assert np.array_equal(ops.upsample_nearest(ops.avg_pool2d(c, 2, 2), 2), c)


def test_gelu_examples():
    assert ops.gelu_tanh(np.array([0.0]))[0] == 0.0
    assert ops.gelu_tanh(np.array([3.0]))[0] == pytest.approx(2.9964, abs=1e-4)
    x = np.linspace(-6, 6, 1001)
    # the tanh form splits as x/2 + (x/2) tanh(u), so the odd difference is exactly x
    np.testing.assert_allclose(ops.gelu_tanh(x) - ops.gelu_tanh(-x), x, atol=1e-5)


def test_rmsnorm_examples():
    x = np.array([1.0, -1.0, 1.0, -1.0])
    np.testing.assert_allclose(ops.rmsnorm(x, np.ones(4), 0.0), x)
    np.testing.assert_allclose(ops.rmsnorm(np.array([3.0, 4.0]), np.ones(2), 0.0), np.array([3, 4]) / math.sqrt(12.5), rtol=1e-6)
    y = np.random.default_rng(6).standard_normal(8)
    np.testing.assert_allclose(ops.rmsnorm(7.5 * y, np.ones(8), 0.0), ops.rmsnorm(y, np.ones(8), 0.0), rtol=1e-5)


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(ops.softmax_rows(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    x = np.random.default_rng(7).standard_normal((3, 5))
    np.testing.assert_allclose(ops.softmax_rows(x + 17.0), ops.softmax_rows(x), rtol=1e-5)


def naive_attention(q, k, v, causal):
    """Per-head loops; query head h reads kv head h // group."""
    tq, h, hd = q.shape
    tk, hk, _ = k.shape
    g = h // hk
    out = np.zeros((tq, h, hd))
    for head in range(h):
        for i in range(tq):
            pos = tk - tq + i
            s = np.array([q[i, head] @ k[j, head // g] / math.sqrt(hd) for j in range(tk)])
            if causal:
                s[pos + 1:] = -np.inf
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i, head] = p @ v[:, head // g]
    return out


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(8)
    spec = ops.AttentionSpec(16, 4, 2, 4)
    q = rng.standard_normal((6, 4, 4)).astype(np.float32)
    k = rng.standard_normal((6, 2, 4)).astype(np.float32)
    v = rng.standard_normal((6, 2, 4)).astype(np.float32)
    for causal in (True, False):
        np.testing.assert_allclose(ops.attention(q, k, v, spec, causal), naive_attention(q, k, v, causal), rtol=1e-5, atol=1e-6)
        p = ops.attention_probs(q, k, spec, causal)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_attention_examples():
    rng = np.random.default_rng(9)
    spec = ops.AttentionSpec(8, 2, 1, 4)
    q = rng.standard_normal((1, 2, 4)).astype(np.float32)
    k = rng.standard_normal((1, 1, 4)).astype(np.float32)
    v = rng.standard_normal((1, 1, 4)).astype(np.float32)
    out = ops.attention(q, k, v, spec)
    assert np.array_equal(out[0, 0], v[0, 0]) and np.array_equal(out[0, 1], v[0, 0])
    k = np.zeros((5, 1, 4), np.float32)
    v = rng.standard_normal((5, 1, 4)).astype(np.float32)
    out = ops.attention(rng.standard_normal((1, 2, 4)).astype(np.float32), k, v, spec, causal=False)
    np.testing.assert_allclose(out[0, 0], v[:, 0].mean(0), rtol=1e-5)


def test_mqa_equals_duplicated_heads():
    rng = np.random.default_rng(10)
    q = rng.standard_normal((5, 2, 8)).astype(np.float32)
    k = rng.standard_normal((5, 1, 8)).astype(np.float32)
    v = rng.standard_normal((5, 1, 8)).astype(np.float32)
    mqa = ops.attention(q, k, v, ops.AttentionSpec(16, 2, 1, 8))
    mha = ops.attention(q, np.repeat(k, 2, 1), np.repeat(v, 2, 1), ops.AttentionSpec(16, 2, 2, 8))
    np.testing.assert_allclose(mqa, mha, rtol=1e-6, atol=1e-7)


def test_causal_attention_ignores_future():
    rng = np.random.default_rng(11)
    spec = ops.AttentionSpec(8, 2, 1, 4)
    q = rng.standard_normal((6, 2, 4)).astype(np.float32)
    k = rng.standard_normal((6, 1, 4)).astype(np.float32)
    v = rng.standard_normal((6, 1, 4)).astype(np.float32)
    base = ops.attention(q, k, v, spec)
    for t in range(6):
        q2, k2, v2 = q.copy(), k.copy(), v.copy()
        q2[t + 1:] += 5
        k2[t + 1:] -= 3
        v2[t + 1:] *= 7
        out = ops.attention(q2, k2, v2, spec)
        assert np.array_equal(out[: t + 1], base[: t + 1])


def test_rope_preserves_norm_and_relative_scores():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((4, 2, 8)).astype(np.float32)
    y = ops.rope(x, np.arange(4))
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-5)
    np.testing.assert_array_equal(ops.rope(x, np.zeros(4)), x)
    a, b = rng.standard_normal((1, 1, 8)).astype(np.float32), rng.standard_normal((1, 1, 8)).astype(np.float32)
    s1 = float(ops.rope(a, [3])[0, 0] @ ops.rope(b, [1])[0, 0])
    s2 = float(ops.rope(a, [10])[0, 0] @ ops.rope(b, [8])[0, 0])
    assert s1 == pytest.approx(s2, rel=1e-4)


def scalar_swiglu(x, wg, wu, wd):
    hid = []
    for r in range(wg.shape[0]):
        g = sum(wg[r, c] * x[c] for c in range(x.size))
        u = sum(wu[r, c] * x[c] for c in range(x.size))
        hid.append(g / (1 + math.exp(-g)) * u)
    return np.array([sum(wd[o, r] * hid[r] for r in range(len(hid))) for o in range(wd.shape[0])])


def test_swiglu_examples():
    rng = np.random.default_rng(13)
    wg, wu, wd = rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), rng.standard_normal((4, 6))
    assert np.all(ops.swiglu_ffn(np.zeros((1, 4)), wg, wu, wd) == 0)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(ops.swiglu_ffn(x[None], wg, wu, wd)[0], scalar_swiglu(x, wg, wu, wd), rtol=1e-6, atol=1e-9)
    big = np.abs(wg) * 0 + 50.0
    xp = np.abs(x)
    g = xp @ big.T
    np.testing.assert_allclose(ops.swiglu_ffn(xp[None], big, wu, wd)[0], wd @ (g * (wu @ xp)), rtol=1e-6)
    with pytest.raises(ShapeError):
        ops.swiglu_ffn(np.zeros((1, 5)), wg, wu, wd)


def q8(a, scale=1.0):
    return QTensor(np.asarray(a, np.int64), QuantParams(scale, 0, 8, True))


def test_int_matmul_examples():
    rng = np.random.default_rng(14)
    perm = np.eye(4, dtype=np.int64)[[2, 0, 3, 1]]
    b = rng.integers(-127, 128, (4, 3))
    acc, s = ops.int_matmul_i32(q8(perm), q8(b))
    assert np.array_equal(acc, b[[2, 0, 3, 1]]) and s == 1.0
    a1, b1 = q8([[7]], 0.5), q8([[-9]], 0.25)
    acc, s = ops.int_matmul_i32(a1, b1)
    assert acc[0, 0] * s == (dequantize(a1) @ dequantize(b1))[0, 0]
    a, b = rng.integers(-127, 128, (8, 8)), rng.integers(-127, 128, (8, 8))
    acc, _ = ops.int_matmul_i32(q8(a), q8(b))
    assert acc.dtype == np.int32 and np.array_equal(acc, a @ b)


def test_int_matmul_overflow_raises():
    k = 140_000  # 127 * 127 * k exceeds the int32 range
    with pytest.raises(AccumulatorOverflowError):
        ops.int_matmul_i32(q8(np.full((1, k), 127)), q8(np.full((k, 1), 127)))
    with pytest.raises(ShapeError):
        ops.int_matmul_i32(q8(np.zeros((2, 3))), q8(np.zeros((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 8), st.integers(1, 2))
def test_factorized_property(c, o, h, s):
    fact, direct = factorized_case(np.random.default_rng(c * 100 + o * 10 + h), c, o, h, s)
    assert np.max(np.abs(fact - direct)) <= 1e-5 * max(1.0, float(np.abs(direct).max()))
