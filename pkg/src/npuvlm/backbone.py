"""Hybrid decoder: gated short-convolution layers interleaved with attention.

Every layer is pre-norm::

    x = x + mixer(rmsnorm(x))
    x = x + swiglu_ffn(rmsnorm(x))

where the mixer is either a gated depthwise causal convolution (``C``) whose
decode state is a fixed ring buffer of the last ``conv_kernel - 1`` inputs, or
rotary multi-query attention (``A``) backed by a growing KV cache.

Prefill and decode run through the same sequence code; a decode step is a
prefill of one row on a warm session.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import nn_ops as ops
from .errors import ContextOverflowError, ShapeError
from .initializers import fan_in_uniform
from .runtime import FLOAT, Runtime

DEFAULT_PATTERN = "CCACCACCACCACCAA"
ATTN_QUERY_CHUNK = 512


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 16
    layer_pattern: str = DEFAULT_PATTERN
    d_model: int = 256
    n_heads: int = 4
    n_kv_heads: int = 1
    head_dim: int = 64
    conv_kernel: int = 3
    ffn_inner: int = 1024
    vocab_size: int = 4096
    max_context: int = 4096
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    tie_embeddings: bool = False

    def __post_init__(self):
        if len(self.layer_pattern) != self.n_layers or set(self.layer_pattern) - {"C", "A"}:
            raise ValueError(f"layer_pattern: {self.layer_pattern!r} is not {self.n_layers} chars over {{C, A}}")
        if not 2 <= self.conv_kernel <= 8:
            raise ValueError("conv_kernel: must be in [2, 8]")
        if self.max_context < 1 or self.vocab_size < 1 or self.ffn_inner < 1:
            raise ValueError("max_context/vocab_size/ffn_inner: must be positive")
        ops.AttentionSpec(self.d_model, self.n_heads, self.n_kv_heads, self.head_dim)

    @property
    def attention_spec(self) -> ops.AttentionSpec:
        return ops.AttentionSpec(self.d_model, self.n_heads, self.n_kv_heads, self.head_dim, causal=True)

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def n_conv(self) -> int:
        return self.layer_pattern.count("C")

    @property
    def n_attn(self) -> int:
        return self.layer_pattern.count("A")

    def with_(self, **kw) -> "BackboneConfig":
        d = asdict(self)
        d.update(kw)
        if "layer_pattern" in kw and "n_layers" not in kw:
            d["n_layers"] = len(kw["layer_pattern"])
        return BackboneConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def layer_prefix(i: int, prefix: str = "lm") -> str:
    return f"{prefix}.layers.{i}"


def init_backbone_weights(cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "lm") -> dict[str, np.ndarray]:
    """Seeded weights: unit-variance embeddings, fan-in uniform projections, unit gains.

    Projections that write into the residual stream are scaled by
    ``1/sqrt(2 * n_layers)`` so the untrained stack stays close to identity
    instead of amplifying small perturbations layer after layer.
    """
    d, k = cfg.d_model, cfg.conv_kernel
    res = 1.0 / np.sqrt(2 * cfg.n_layers)

    def lin(o, i, gain=1.0):
        return fan_in_uniform(rng, (o, i), i, gain)

    w = {f"{prefix}.embed": fan_in_uniform(rng, (cfg.vocab_size, d), 1)}
    for i, kind in enumerate(cfg.layer_pattern):
        p = layer_prefix(i, prefix)
        w[f"{p}.norm1"] = np.ones(d, np.float32)
        if kind == "C":
            w[f"{p}.conv.in_proj.w"] = lin(2 * d, d)
            w[f"{p}.conv.kernel"] = fan_in_uniform(rng, (d, k), k)
            w[f"{p}.conv.out_proj.w"] = lin(d, d, res)
        else:
            w[f"{p}.attn.q.w"] = lin(cfg.n_heads * cfg.head_dim, d)
            w[f"{p}.attn.k.w"] = lin(cfg.kv_dim, d)
            w[f"{p}.attn.v.w"] = lin(cfg.kv_dim, d)
            w[f"{p}.attn.o.w"] = lin(d, cfg.n_heads * cfg.head_dim, res)
        w[f"{p}.norm2"] = np.ones(d, np.float32)
        w[f"{p}.ffn.gate.w"] = lin(cfg.ffn_inner, d)
        w[f"{p}.ffn.up.w"] = lin(cfg.ffn_inner, d)
        w[f"{p}.ffn.down.w"] = lin(d, cfg.ffn_inner, res)
    w[f"{prefix}.final_norm"] = np.ones(d, np.float32)
    if not cfg.tie_embeddings:
        w[f"{prefix}.head.w"] = lin(cfg.vocab_size, d)
    return w


class RollingState:
    """Ring buffer holding the last ``conv_kernel - 1`` conv inputs of one layer."""

    def __init__(self, conv_kernel: int, d_model: int):
        self.buffer = np.zeros((conv_kernel - 1, d_model), dtype=np.float32)
        self.cursor = 0  # slot of the oldest row, i.e. the next write

    def ordered(self) -> np.ndarray:
        """Rows oldest first."""
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]])

    def push(self, rows: np.ndarray) -> None:
        n = self.buffer.shape[0]
        for r in rows[-n:]:
            self.buffer[self.cursor] = r
            self.cursor = (self.cursor + 1) % n

    def nbytes(self, bytes_per_elem: int = 4) -> int:
        return self.buffer.size * bytes_per_elem

    def copy(self) -> "RollingState":
        s = RollingState.__new__(RollingState)
        s.buffer, s.cursor = self.buffer.copy(), self.cursor
        return s


class KVCache:
    """Keys and values of one attention layer, ``(length, n_kv_heads, head_dim)``."""

    def __init__(self, max_context: int, n_kv_heads: int, head_dim: int):
        self.max_context = max_context
        self._k = np.zeros((max_context, n_kv_heads, head_dim), dtype=np.float32)
        self._v = np.zeros_like(self._k)
        self.length = 0

    @property
    def keys(self) -> np.ndarray:
        return self._k[: self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[: self.length]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        t = k.shape[0]
        if self.length + t > self.max_context:
            raise ContextOverflowError(self.max_context, self.max_context)
        self._k[self.length : self.length + t] = k
        self._v[self.length : self.length + t] = v
        self.length += t

    def nbytes(self, bytes_per_elem: int = 4) -> int:
        return 2 * self.length * self._k.shape[1] * self._k.shape[2] * bytes_per_elem

    def copy(self) -> "KVCache":
        c = KVCache.__new__(KVCache)
        c.max_context, c.length = self.max_context, self.length
        c._k, c._v = self._k.copy(), self._v.copy()
        return c


@dataclass
class DecodeSession:
    """Mutable decode state of one sequence; not safe for concurrent steps."""

    config: BackboneConfig
    weights: Mapping[str, np.ndarray]
    runtime: Runtime = FLOAT
    prefix: str = "lm"
    caches: list = field(default_factory=list)
    position: int = 0

    def __post_init__(self):
        if not self.caches:
            c = self.config
            self.caches = [
                RollingState(c.conv_kernel, c.d_model) if kind == "C" else KVCache(c.max_context, c.n_kv_heads, c.head_dim)
                for kind in c.layer_pattern
            ]

    @property
    def rolling_states(self) -> list[RollingState]:
        return [c for c in self.caches if isinstance(c, RollingState)]

    @property
    def kv_caches(self) -> list[KVCache]:
        return [c for c in self.caches if isinstance(c, KVCache)]

    def rolling_state_bytes(self, bytes_per_elem: int = 4) -> int:
        return sum(s.nbytes(bytes_per_elem) for s in self.rolling_states)

    def kv_bytes(self, bytes_per_elem: int = 4) -> int:
        return sum(c.nbytes(bytes_per_elem) for c in self.kv_caches)

    def fork(self) -> "DecodeSession":
        return DecodeSession(self.config, self.weights, self.runtime, self.prefix,
                             [c.copy() for c in self.caches], self.position)


def new_session(cfg: BackboneConfig, weights, rt: Runtime = FLOAT, prefix: str = "lm") -> DecodeSession:
    return DecodeSession(cfg, weights, rt, prefix)


def _weight_linear(x, w, name, layer, op, rt: Runtime):
    wt = w[name]
    rt.count_weight_op(layer, op, name, wt.size, x.shape[0] * wt.size)
    return rt.linear(x, wt)


def _norm(x, w, name, layer, eps, rt: Runtime):
    g = w[name]
    rt.count_weight_op(layer, name.rsplit(".", 1)[-1], name, g.size, 0)
    return ops.rmsnorm(x, g, eps)


def gated_conv_mixer(h: np.ndarray, state: RollingState, w, p: str, rt: Runtime = FLOAT) -> np.ndarray:
    """Gated depthwise causal convolution over ``T`` rows; advances ``state``.

    ``u = W_in h`` splits into ``(gate, cand)``; ``c_t`` is the depthwise conv
    of the kernel over ``[history ‖ cand]``; output is ``W_out (silu(gate) ⊙ c)``.
    Kernel tap ``k-1`` multiplies the current row.
    """
    t, d = h.shape
    kern = w[f"{p}.conv.kernel"]
    k = kern.shape[1]
    h = rt.act(f"{p}.conv.in_proj.in", h)
    u = _weight_linear(h, w, f"{p}.conv.in_proj.w", p, "in_proj", rt)
    gate, cand = u[:, :d], u[:, d:]
    cand = rt.act(f"{p}.conv.dw.in", cand)
    hist = state.ordered()
    rt.count_cache(p, "state", hist.size, hist.size)
    rt.count_weight_op(p, "dw", f"{p}.conv.kernel", kern.size, t * kern.size)
    seq = np.concatenate([hist, cand])
    c = kern[:, 0] * seq[0:t]
    for j in range(1, k):
        c = c + kern[:, j] * seq[j : j + t]
    state.push(cand)
    y = rt.act(f"{p}.conv.out_proj.in", ops.silu(gate) * c)
    return _weight_linear(y, w, f"{p}.conv.out_proj.w", p, "out_proj", rt)


def attention_mixer(h: np.ndarray, cache: KVCache, w, p: str, cfg: BackboneConfig, rt: Runtime = FLOAT) -> np.ndarray:
    """Rotary grouped-kv causal attention for ``T`` rows appended to ``cache``."""
    t = h.shape[0]
    p0 = cache.length
    spec = cfg.attention_spec
    h = rt.act(f"{p}.attn.qkv.in", h)
    pos = np.arange(p0, p0 + t)
    q = _weight_linear(h, w, f"{p}.attn.q.w", p, "q", rt).reshape(t, cfg.n_heads, cfg.head_dim)
    k = _weight_linear(h, w, f"{p}.attn.k.w", p, "k", rt).reshape(t, cfg.n_kv_heads, cfg.head_dim)
    v = _weight_linear(h, w, f"{p}.attn.v.w", p, "v", rt).reshape(t, cfg.n_kv_heads, cfg.head_dim)
    q = rt.act(f"{p}.attn.q.out", ops.rope(q, pos, cfg.rope_base))
    k = rt.act(f"{p}.attn.k.out", ops.rope(k, pos, cfg.rope_base))
    v = rt.act(f"{p}.attn.v.out", v)
    rt.count_cache(p, "kv", 2 * p0 * cfg.kv_dim, 2 * t * cfg.kv_dim)
    cache.append(k, v)
    keys, vals = cache.keys, cache.values
    # causal pairs: sum over rows of (p0 + i + 1) keys, two matmuls each
    rt.count_macs(p, "attend", 2 * cfg.n_heads * cfg.head_dim * (t * p0 + t * (t + 1) // 2))
    out = np.empty((t, cfg.n_heads, cfg.head_dim), dtype=np.float32)
    if rt.exact:
        for i in range(t):
            n = p0 + i + 1
            out[i : i + 1] = ops.attention(q[i : i + 1], keys[:n], vals[:n], spec)
    else:
        for s in range(0, t, ATTN_QUERY_CHUNK):
            e = min(t, s + ATTN_QUERY_CHUNK)
            n = p0 + e
            out[s:e] = ops.attention(q[s:e], keys[:n], vals[:n], spec, q_offset=p0 + s)
    o = rt.act(f"{p}.attn.o.in", out.reshape(t, cfg.n_heads * cfg.head_dim))
    return _weight_linear(o, w, f"{p}.attn.o.w", p, "o", rt)


def _ffn(x, w, p, rt: Runtime):
    x = rt.act(f"{p}.ffn.in", x)
    for op in ("gate", "up", "down"):
        wt = w[f"{p}.ffn.{op}.w"]
        rt.count_weight_op(p, op, f"{p}.ffn.{op}.w", wt.size, x.shape[0] * wt.size)
    return ops.swiglu_ffn(
        x, w[f"{p}.ffn.gate.w"], w[f"{p}.ffn.up.w"], w[f"{p}.ffn.down.w"],
        linear=rt.linear, hidden_hook=lambda hid: rt.act(f"{p}.ffn.down.in", hid),
    )


def forward_rows(x: np.ndarray, session: DecodeSession) -> np.ndarray:
    """Advance ``session`` by ``T`` embedding rows; return ``(T, vocab)`` logits."""
    cfg, w, rt, pre = session.config, session.weights, session.runtime, session.prefix
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ShapeError(f"expected (T, {cfg.d_model}) embeddings, got {x.shape}")
    t = x.shape[0]
    if session.position + t > cfg.max_context:
        raise ContextOverflowError(max(session.position, cfg.max_context), cfg.max_context)
    for i, kind in enumerate(cfg.layer_pattern):
        p = layer_prefix(i, pre)
        h = _norm(x, w, f"{p}.norm1", p, cfg.norm_eps, rt)
        if kind == "C":
            m = gated_conv_mixer(h, session.caches[i], w, p, rt)
        else:
            m = attention_mixer(h, session.caches[i], w, p, cfg, rt)
        x = x + m
        h = _norm(x, w, f"{p}.norm2", p, cfg.norm_eps, rt)
        x = x + _ffn(h, w, p, rt)
    head = f"{pre}.head"
    h = _norm(x, w, f"{pre}.final_norm", head, cfg.norm_eps, rt)
    h = rt.act(f"{head}.in", h)
    head_w = f"{pre}.embed" if cfg.tie_embeddings else f"{pre}.head.w"
    logits = _weight_linear(h, w, head_w, head, "head", rt)
    session.position += t
    return logits


def gated_conv_layer_step(x_t: np.ndarray, state: RollingState, w, p: str, rt: Runtime = FLOAT):
    """One decode position of a conv mixer; returns ``(y_t, state)``."""
    y = gated_conv_mixer(np.asarray(x_t, np.float32)[None], state, w, p, rt)
    return y[0], state


def attention_layer_step(x_t: np.ndarray, cache: KVCache, w, p: str, cfg: BackboneConfig, rt: Runtime = FLOAT):
    """One decode position of an attention mixer; returns ``(y_t, cache)``."""
    if cache.length >= cfg.max_context:
        raise ContextOverflowError(cache.length, cfg.max_context)
    y = attention_mixer(np.asarray(x_t, np.float32)[None], cache, w, p, cfg, rt)
    return y[0], cache


def prefill(embeddings: np.ndarray, session: DecodeSession):
    """Full-sequence pass; returns ``(logits, session)`` with caches populated."""
    return forward_rows(embeddings, session), session


def decode_step(token_embedding: np.ndarray, session: DecodeSession):
    """One autoregressive position; returns ``(logits, session)``."""
    e = np.asarray(token_embedding, dtype=np.float32)
    return forward_rows(e.reshape(1, -1), session)[0], session


def embed_tokens(ids, session: DecodeSession) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    table = session.weights[f"{session.prefix}.embed"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("token id out of vocabulary")
    session.runtime.count_weight_op(f"{session.prefix}.embed", "lookup", f"{session.prefix}.embed", ids.size * table.shape[1], 0)
    return table[ids]


def generate_greedy(prompt_embeddings: np.ndarray, n_steps: int, session: DecodeSession) -> list[int]:
    """Prefill the prompt, then emit ``n_steps`` argmax tokens.

    The first token comes from the prefill logits; each later one costs one
    decode step. Ties resolve to the lowest id. A context overflow carries the
    failing generation index in ``err.generation_step``.
    """
    if n_steps <= 0:
        return []
    logits, _ = prefill(prompt_embeddings, session)
    out = [int(np.argmax(logits[-1]))]
    for i in range(1, n_steps):
        try:
            logits, _ = decode_step(embed_tokens([out[-1]], session)[0], session)
        except ContextOverflowError as err:
            err.generation_step = i
            raise
        out.append(int(np.argmax(logits)))
    return out
