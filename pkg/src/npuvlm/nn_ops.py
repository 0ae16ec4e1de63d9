"""Reference neural operators in float32 numpy.

Feature maps are ``(N, C, H, W)``; sequences are ``(T, features)``;
attention heads are laid out ``(T, heads, head_dim)``. Dense weights are
``(out, in)`` and applied as ``x @ w.T``.

``conv2d_direct`` is the deliberately naive oracle. ``conv2d``,
``depthwise_conv2d`` and ``pointwise_conv2d`` are the vectorised kernels the
models run on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AccumulatorOverflowError, ShapeError
from .qtensor import QTensor

INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride, self.groups) < 1:
            raise ShapeError(f"non-positive conv dimension in {self}")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(f"channels not divisible by groups={self.groups}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_out_size(h, self.kernel_h, self.stride, self.padding),
            conv_out_size(w, self.kernel_w, self.stride, self.padding),
        )

    def macs(self, n: int, h: int, w: int) -> int:
        oh, ow = self.out_hw(h, w)
        return n * oh * ow * self.out_channels * (self.in_channels // self.groups) * self.kernel_h * self.kernel_w


@dataclass(frozen=True)
class AttentionSpec:
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    causal: bool = True

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_kv_heads, self.head_dim) < 1:
            raise ShapeError(f"non-positive attention dimension in {self}")
        if self.n_heads % self.n_kv_heads:
            raise ShapeError("n_heads must be a multiple of n_kv_heads")
        if self.n_heads * self.head_dim != self.d_model:
            raise ShapeError("n_heads * head_dim must equal d_model")

    @property
    def mqa(self) -> bool:
        return self.n_kv_heads == 1

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {kernel} does not fit input {size} with padding {padding}")
    return out


def _check_conv(x, w, b, spec: Conv2dSpec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input {x.shape} does not match in_channels={spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"weight {w.shape} != expected {spec.weight_shape}")
    if b is not None and tuple(b.shape) != (spec.out_channels,):
        raise ShapeError(f"bias {b.shape} != ({spec.out_channels},)")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: Conv2dSpec) -> np.ndarray:
    """Naive grouped convolution, one output element at a time."""
    _check_conv(x, w, b, spec)
    n, _, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    xp = _pad(x.astype(np.float64), spec.padding)
    wf = w.astype(np.float64)
    cin_g = spec.in_channels // spec.groups
    cout_g = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    s = spec.stride
    for bi in range(n):
        for o in range(spec.out_channels):
            g = o // cout_g
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin_g):
                        ci = g * cin_g + c
                        for ki in range(spec.kernel_h):
                            for kj in range(spec.kernel_w):
                                acc += xp[bi, ci, i * s + ki, j * s + kj] * wf[o, c, ki, kj]
                    out[bi, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out.astype(np.float32)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: Conv2dSpec) -> np.ndarray:
    """Grouped convolution via strided patch extraction and a matmul per group."""
    _check_conv(x, w, b, spec)
    n, _, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    xp = _pad(x, spec.padding)
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    # (N, C, OH, OW, KH, KW) view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    g = spec.groups
    cin_g, cout_g = spec.in_channels // g, spec.out_channels // g
    win = win.reshape(n, g, cin_g, oh, ow, kh, kw)
    wg = w.reshape(g, cout_g, cin_g, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
    out = out.reshape(n, spec.out_channels, oh, ow)
    if b is not None:
        out = out + b[None, :, None, None]
    return out.astype(np.float32, copy=False)


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: Conv2dSpec) -> np.ndarray:
    """Per-channel k×k convolution by accumulating shifted slices."""
    if not spec.depthwise:
        raise ShapeError("depthwise_conv2d requires groups == in_channels == out_channels")
    _check_conv(x, w, b, spec)
    n, c, h, wd = x.shape
    oh, ow = spec.out_hw(h, wd)
    xp = _pad(x, spec.padding)
    s = spec.stride
    out = np.zeros((n, c, oh, ow), dtype=np.float32)
    for ki in range(spec.kernel_h):
        for kj in range(spec.kernel_w):
            patch = xp[:, :, ki : ki + (oh - 1) * s + 1 : s, kj : kj + (ow - 1) * s + 1 : s]
            out += patch * w[None, :, 0, ki, kj, None, None]
    if b is not None:
        out += b[None, :, None, None]
    return out


def pointwise_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """1×1 convolution; ``w`` may be ``(O, C)`` or ``(O, C, 1, 1)``."""
    if w.ndim == 4:
        if w.shape[2:] != (1, 1):
            raise ShapeError(f"pointwise weight must be 1x1, got {w.shape}")
        w = w[:, :, 0, 0]
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"pointwise: input {x.shape} vs weight {w.shape}")
    out = np.einsum("nchw,oc->nohw", x, w, optimize=True)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias {b.shape} != ({w.shape[0]},)")
        out = out + b[None, :, None, None]
    return out.astype(np.float32, copy=False)


def avg_pool2d(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Mean over k×k windows; the windows must tile the map exactly."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    for size in (h, w):
        if size < kernel or (size - kernel) % stride:
            raise ShapeError(f"pool kernel {kernel}/stride {stride} does not tile size {size}")
    oh, ow = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    acc = np.zeros((n, c, oh, ow), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            acc += x[:, :, ki : ki + (oh - 1) * stride + 1 : stride, kj : kj + (ow - 1) * stride + 1 : stride]
    return (acc / (kernel * kernel)).astype(np.float32)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    if factor == 1:
        return x
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    inner = np.float32(_GELU_C) * (x + np.float32(0.044715) * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x * sigmoid(x)).astype(np.float32, copy=False)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6, axis: int = -1) -> np.ndarray:
    """``x / sqrt(mean(x^2) + eps) * gain`` along ``axis``."""
    axis = axis % x.ndim
    if gain.shape != (x.shape[axis],):
        raise ShapeError(f"gain {gain.shape} does not match feature size {x.shape[axis]}")
    ms = np.mean(np.square(x, dtype=np.float32), axis=axis, keepdims=True)
    shape = [1] * x.ndim
    shape[axis] = -1
    return (x / np.sqrt(ms + np.float32(eps)) * gain.reshape(shape)).astype(np.float32, copy=False)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm params do not match feature size")
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return (xc / np.sqrt(var + np.float32(eps)) * gain + bias).astype(np.float32, copy=False)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis; fully masked rows give zeros."""
    x = np.asarray(x, dtype=np.float32)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0).astype(np.float32)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    return (e / np.where(s == 0, 1, s)).astype(np.float32, copy=False)


def rope(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotary position embedding on ``(T, heads, head_dim)`` (half-split pairing)."""
    t, _, hd = x.shape
    if hd % 2:
        raise ShapeError("rotary embedding needs an even head_dim")
    half = hd // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(ang).astype(np.float32)[:, None, :]
    sin = np.sin(ang).astype(np.float32)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def attention_probs(q: np.ndarray, k: np.ndarray, spec: AttentionSpec, causal: bool | None = None, q_offset: int | None = None) -> np.ndarray:
    """Softmax score matrix ``(heads, Tq, Tk)`` with grouped kv sharing.

    Query row ``i`` sits at absolute position ``q_offset + i`` (default: the
    queries are the last ``Tq`` positions of the key sequence).
    """
    causal = spec.causal if causal is None else causal
    tq, h, hd = q.shape
    tk = k.shape[0]
    if h != spec.n_heads or hd != spec.head_dim or k.shape[1:] != (spec.n_kv_heads, spec.head_dim):
        raise ShapeError(f"q {q.shape} / k {k.shape} inconsistent with {spec}")
    g = spec.group_size
    qh = q.transpose(1, 0, 2).reshape(spec.n_kv_heads, g * tq, hd)
    kh = k.transpose(1, 2, 0)
    scores = (qh @ kh).reshape(h, tq, tk) * np.float32(1.0 / math.sqrt(hd))
    if causal:
        off = tk - tq if q_offset is None else q_offset
        qpos = off + np.arange(tq)[:, None]
        mask = np.arange(tk)[None, :] > qpos
        scores = np.where(mask[None], np.float32(-np.inf), scores)
    return softmax_rows(scores)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, spec: AttentionSpec, causal: bool | None = None, q_offset: int | None = None) -> np.ndarray:
    """Scaled dot-product attention; returns ``(Tq, heads, head_dim)``.

    Query head ``h`` reads kv head ``h // (n_heads // n_kv_heads)``.
    """
    if v.shape != k.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} differ")
    p = attention_probs(q, k, spec, causal, q_offset)
    h, tq, tk = p.shape
    g = spec.group_size
    pg = p.reshape(spec.n_kv_heads, g * tq, tk)
    out = pg @ v.transpose(1, 0, 2)
    return out.reshape(h, tq, spec.head_dim).transpose(1, 0, 2).astype(np.float32, copy=False)


def swiglu_ffn(x, w_gate, w_up, w_down, linear=None, hidden_hook=None):
    """``w_down · (silu(w_gate·x) ⊙ (w_up·x))`` over the last axis of ``x``.

    ``linear`` replaces the projection kernel and ``hidden_hook`` sees the gated
    hidden vector before the down projection; both exist for the runtime.
    """
    if w_gate.shape != w_up.shape or w_gate.shape[1] != x.shape[-1] or w_down.shape != (w_gate.shape[1], w_gate.shape[0]):
        raise ShapeError(f"swiglu shapes: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}")
    mm = linear or (lambda a, w: a @ w.T)
    hidden = silu(mm(x, w_gate)) * mm(x, w_up)
    if hidden_hook is not None:
        hidden = hidden_hook(hidden)
    return mm(hidden, w_down)


def int_matmul_i32(a: QTensor, b: QTensor) -> tuple[np.ndarray, float]:
    """Integer GEMM of two symmetric 8-bit matrices with a 32-bit accumulator.

    Returns the int32 result and its scale ``s_a * s_b``. Any partial sum that
    leaves the int32 range raises instead of wrapping.
    """
    for t in (a, b):
        if t.params.bits != 8 or not t.params.symmetric:
            raise ShapeError("int_matmul_i32 needs symmetric 8-bit operands")
        if t.qdata.ndim != 2:
            raise ShapeError("int_matmul_i32 operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    qa = a.qdata.astype(np.int64)
    qb = b.qdata.astype(np.int64)
    partial = np.cumsum(qa[:, :, None] * qb[None, :, :], axis=1)
    if partial.size and (partial.max() > INT32_MAX or partial.min() < INT32_MIN):
        raise AccumulatorOverflowError("int32 accumulator overflow")
    acc = partial[:, -1, :] if a.shape[1] else np.zeros((a.shape[0], b.shape[1]), dtype=np.int64)
    return acc.astype(np.int32), a.params.scale * b.params.scale
