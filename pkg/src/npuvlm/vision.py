"""MobileNet-style vision encoder.

Layout: a 3×3 stride-2 stem, four stages of inverted-residual (IR) blocks
whose first block downsamples by 2, optional multi-query attention
bottlenecks after selected late-stage blocks, and a multi-scale fusion adapter
(MSFA). The MSFA upsamples the stage-4 map onto the stage-3 grid, refines the
concatenation with one IR layer, normalises and average-pools it. Each pixel
of the pooled map becomes one visual token.

All forward functions take the flat weight mapping, a name ``prefix`` and a
:class:`~npuvlm.runtime.Runtime`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_ops as ops
from .errors import ShapeError
from .initializers import fan_in_uniform
from .runtime import FLOAT, Runtime

STEM_STRIDE = 2


@dataclass(frozen=True)
class StageConfig:
    num_blocks: int
    channels: int
    expansion: int = 4


def _default_stages():
    return (StageConfig(2, 32), StageConfig(2, 64), StageConfig(2, 96), StageConfig(2, 128))


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyper-parameters.

    ``mqa_positions`` holds 0-based ``(stage, block)`` pairs; only stages 2
    and 3 (the two late, low-resolution stages) may carry a bottleneck.
    """

    input_size: int = 96
    stem_channels: int = 16
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    mqa_positions: tuple[tuple[int, int], ...] = ((3, 1),)
    mqa_heads: int = 4
    msfa_out_channels: int = 256
    msfa_expansion: int = 2
    kernel_size: int = 3
    pool_kernel: int = 3
    pool_stride: int = 3
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages))
        object.__setattr__(self, "mqa_positions", tuple(tuple(p) for p in self.mqa_positions))
        if len(self.stages) != 4:
            raise ValueError("stages: exactly four stages are required")
        if self.input_size % (2 ** (1 + len(self.stages)) * self.pool_stride):
            raise ValueError(f"input_size: {self.input_size} not divisible by {2 ** 5 * self.pool_stride}")
        for s, b in self.mqa_positions:
            if s not in (2, 3) or not 0 <= b < self.stages[s].num_blocks:
                raise ValueError(f"mqa_positions: ({s}, {b}) is not a late-stage block")
            if self.stages[s].channels % self.mqa_heads:
                raise ValueError("mqa_heads: must divide the stage channels")
        if any(st.num_blocks < 1 or st.channels < 1 or st.expansion < 1 for st in self.stages):
            raise ValueError("stages: block counts, channels and expansion must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size: must be odd")

    @property
    def tap_side(self) -> int:
        """Side of the stage-3 map, the finest tapped resolution."""
        return self.input_size // 2 ** 4

    @property
    def token_side(self) -> int:
        return (self.tap_side - self.pool_kernel) // self.pool_stride + 1

    @property
    def num_tokens(self) -> int:
        return self.token_side**2

    @property
    def token_dim(self) -> int:
        return self.msfa_out_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mqa_positions"] = [list(p) for p in self.mqa_positions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)


def block_names(cfg: EncoderConfig, prefix: str = "vision"):
    """Yield ``(stage, block, name, in_ch, out_ch, stride)`` in execution order."""
    cin = cfg.stem_channels
    for si, st in enumerate(cfg.stages):
        for bi in range(st.num_blocks):
            yield si, bi, f"{prefix}.stages.{si}.{bi}", cin, st.channels, 2 if bi == 0 else 1
            cin = st.channels


def init_encoder_weights(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "vision") -> dict[str, np.ndarray]:
    """Seeded He-uniform convolutions, zero biases, unit norm gains."""
    w: dict[str, np.ndarray] = {}
    k = cfg.kernel_size

    def he(shape, fan_in):
        return fan_in_uniform(rng, shape, fan_in, np.sqrt(2.0))

    def ir(name, cin, cout, expansion):
        hid = cin * expansion
        w[f"{name}.expand.w"] = he((hid, cin), cin)
        w[f"{name}.expand.b"] = np.zeros(hid, np.float32)
        w[f"{name}.dw.w"] = he((hid, 1, k, k), k * k)
        w[f"{name}.dw.b"] = np.zeros(hid, np.float32)
        w[f"{name}.project.w"] = he((cout, hid), hid)
        w[f"{name}.project.b"] = np.zeros(cout, np.float32)
        w[f"{name}.norm"] = np.ones(cout, np.float32)

    w[f"{prefix}.stem.w"] = he((cfg.stem_channels, 3, 3, 3), 27)
    w[f"{prefix}.stem.b"] = np.zeros(cfg.stem_channels, np.float32)
    w[f"{prefix}.stem.norm"] = np.ones(cfg.stem_channels, np.float32)
    for si, bi, name, cin, cout, _ in block_names(cfg, prefix):
        ir(name, cin, cout, cfg.stages[si].expansion)
        if (si, bi) in cfg.mqa_positions:
            c = cout
            hd = c // cfg.mqa_heads
            lin = lambda shape: fan_in_uniform(rng, shape, shape[1])
            w[f"{name}.mqa.norm"] = np.ones(c, np.float32)
            w[f"{name}.mqa.q.w"] = lin((c, c))
            w[f"{name}.mqa.k.w"] = lin((hd, c))
            w[f"{name}.mqa.v.w"] = lin((hd, c))
            w[f"{name}.mqa.o.w"] = lin((c, c))
    c3, c4 = cfg.stages[2].channels, cfg.stages[3].channels
    cat = c3 + c4
    hid = cat * cfg.msfa_expansion
    m = f"{prefix}.msfa"
    w[f"{m}.expand.w"] = he((hid, cat), cat)
    w[f"{m}.expand.b"] = np.zeros(hid, np.float32)
    w[f"{m}.dw.w"] = he((hid, 1, k, k), k * k)
    w[f"{m}.dw.b"] = np.zeros(hid, np.float32)
    w[f"{m}.project.w"] = he((cfg.msfa_out_channels, hid), hid)
    w[f"{m}.project.b"] = np.zeros(cfg.msfa_out_channels, np.float32)
    w[f"{m}.norm"] = np.ones(cfg.msfa_out_channels, np.float32)
    return w


def param_count(weights, prefix: str = "vision") -> int:
    return sum(int(v.size) for k, v in weights.items() if k.startswith(prefix + "."))


def _pointwise(x, w, name, rt: Runtime):
    wt = w[f"{name}.w"]
    x = rt.act(f"{name}.in", x)
    n, _, h, wd = x.shape
    rt.count_weight_op(name, "pointwise", f"{name}.w", wt.size, n * h * wd * wt.size)
    y = ops.pointwise_conv2d(x, wt, w.get(f"{name}.b"))
    rt.count_activation(name, "pointwise", y.size)
    return y


def _depthwise(x, w, name, stride, rt: Runtime):
    wt = w[f"{name}.w"]
    c, _, k, _ = wt.shape
    spec = ops.Conv2dSpec(c, c, k, k, stride, k // 2, groups=c)
    x = rt.act(f"{name}.in", x)
    n, _, h, wd = x.shape
    rt.count_weight_op(name, "depthwise", f"{name}.w", wt.size, spec.macs(n, h, wd))
    y = ops.depthwise_conv2d(x, wt, w.get(f"{name}.b"), spec)
    rt.count_activation(name, "depthwise", y.size)
    return y


def ir_block(x: np.ndarray, w, name: str, stride: int, rt: Runtime = FLOAT, eps: float = 1e-6) -> np.ndarray:
    """Inverted residual: expand → GELU → depthwise → GELU → project → RMSNorm.

    The norm is skipped when ``{name}.norm`` is absent. The residual is added
    when the block keeps both resolution and channel count.
    """
    if x.ndim != 4 or x.shape[1] != w[f"{name}.expand.w"].shape[1]:
        raise ShapeError(f"{name}: input {x.shape} vs expand {w[f'{name}.expand.w'].shape}")
    h = ops.gelu_tanh(_pointwise(x, w, f"{name}.expand", rt))
    h = ops.gelu_tanh(_depthwise(h, w, f"{name}.dw", stride, rt))
    h = _pointwise(h, w, f"{name}.project", rt)
    gain = w.get(f"{name}.norm")
    if gain is not None:
        h = ops.rmsnorm(h, gain, eps, axis=1)
    if stride == 1 and h.shape == x.shape:
        h = x + h
    return h


def mqa_bottleneck(x: np.ndarray, w, name: str, n_heads: int, rt: Runtime = FLOAT, eps: float = 1e-6) -> np.ndarray:
    """Pre-norm multi-query self-attention over all pixels, with residual."""
    n, c, hh, ww = x.shape
    hd = c // n_heads
    spec = ops.AttentionSpec(c, n_heads, 1, hd, causal=False)
    seq = x.reshape(n, c, hh * ww).transpose(0, 2, 1)
    xn = ops.rmsnorm(seq, w[f"{name}.norm"], eps)
    xn = rt.act(f"{name}.qkv.in", xn)
    t = hh * ww
    out = np.empty_like(seq)
    for ws in ("q", "k", "v"):
        wt = w[f"{name}.{ws}.w"]
        rt.count_weight_op(name, ws, f"{name}.{ws}.w", wt.size, n * t * wt.size)
    rt.count_macs(name, "scores", 2 * n * n_heads * t * t * hd)
    rt.count_activation(name, "scores", n * n_heads * t * t)
    for i in range(n):
        q = rt.act(f"{name}.q.out", rt.linear(xn[i], w[f"{name}.q.w"])).reshape(t, n_heads, hd)
        k = rt.act(f"{name}.k.out", rt.linear(xn[i], w[f"{name}.k.w"])).reshape(t, 1, hd)
        v = rt.act(f"{name}.v.out", rt.linear(xn[i], w[f"{name}.v.w"])).reshape(t, 1, hd)
        att = ops.attention(q, k, v, spec).reshape(t, c)
        att = rt.act(f"{name}.o.in", att)
        out[i] = seq[i] + rt.linear(att, w[f"{name}.o.w"])
    wo = w[f"{name}.o.w"]
    rt.count_weight_op(name, "o", f"{name}.o.w", wo.size, n * t * wo.size)
    return out.transpose(0, 2, 1).reshape(n, c, hh, ww)


def msfa_fuse(feat3: np.ndarray, feat4: np.ndarray, w, prefix: str = "vision", rt: Runtime = FLOAT,
              pool_kernel: int = 3, pool_stride: int = 3, eps: float = 1e-6) -> np.ndarray:
    """Fuse the last two stage maps into the pooled token map ``(N, C, s, s)``."""
    if feat4.shape[-1] * 2 != feat3.shape[-1] or feat4.shape[-2] * 2 != feat3.shape[-2] or feat3.shape[0] != feat4.shape[0]:
        raise ShapeError(f"msfa: stage-4 map {feat4.shape} is not half of stage-3 map {feat3.shape}")
    m = f"{prefix}.msfa"
    up = ops.upsample_nearest(feat4, 2)
    cat = np.concatenate([feat3, up], axis=1)
    h = ops.gelu_tanh(_pointwise(cat, w, f"{m}.expand", rt))
    h = ops.gelu_tanh(_depthwise(h, w, f"{m}.dw", 1, rt))
    h = _pointwise(h, w, f"{m}.project", rt)
    h = ops.rmsnorm(h, w[f"{m}.norm"], eps, axis=1)
    pooled = ops.avg_pool2d(h, pool_kernel, pool_stride)
    n, c, ph, pw = pooled.shape
    rt.count_macs(m, "pool", n * c * ph * pw * pool_kernel * pool_kernel)
    return rt.act(f"{m}.out", pooled)


def stem(x, w, prefix, rt: Runtime = FLOAT, eps: float = 1e-6):
    name = f"{prefix}.stem"
    wt = w[f"{name}.w"]
    spec = ops.Conv2dSpec(3, wt.shape[0], 3, 3, STEM_STRIDE, 1)
    x = rt.act(f"{name}.in", x)
    n, _, h, wd = x.shape
    rt.count_weight_op(name, "conv", f"{name}.w", wt.size, spec.macs(n, h, wd))
    y = ops.conv2d(x, wt, w[f"{name}.b"], spec)
    rt.count_activation(name, "conv", y.size)
    return ops.gelu_tanh(ops.rmsnorm(y, w[f"{name}.norm"], eps, axis=1))


def encoder_features(images: np.ndarray, cfg: EncoderConfig, w, prefix: str = "vision", rt: Runtime = FLOAT):
    """Run stem and stages; return the list of stage output maps."""
    x = stem(images, w, prefix, rt, cfg.norm_eps)
    feats = []
    for si, st in enumerate(cfg.stages):
        for bi in range(st.num_blocks):
            name = f"{prefix}.stages.{si}.{bi}"
            x = ir_block(x, w, name, 2 if bi == 0 else 1, rt, cfg.norm_eps)
            if (si, bi) in cfg.mqa_positions:
                x = mqa_bottleneck(x, w, f"{name}.mqa", cfg.mqa_heads, rt, cfg.norm_eps)
        feats.append(x)
    return feats


def encode_images(images: np.ndarray, cfg: EncoderConfig, w, prefix: str = "vision", rt: Runtime = FLOAT) -> np.ndarray:
    """Batch encode ``(N, 3, S, S)`` images into ``(N, num_tokens, token_dim)``."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ShapeError(f"expected (N, 3, {cfg.input_size}, {cfg.input_size}), got {images.shape}")
    feats = encoder_features(images, cfg, w, prefix, rt)
    fused = msfa_fuse(feats[2], feats[3], w, prefix, rt, cfg.pool_kernel, cfg.pool_stride, cfg.norm_eps)
    n, c, s, _ = fused.shape
    return fused.reshape(n, c, s * s).transpose(0, 2, 1).copy()


def encode_image(img: np.ndarray, cfg: EncoderConfig, w, prefix: str = "vision", rt: Runtime = FLOAT) -> np.ndarray:
    """Encode one ``(3, S, S)`` image into ``(num_tokens, token_dim)`` visual tokens.

    Token ``i * side + j`` is pixel ``(i, j)`` of the pooled fused map.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ShapeError(f"expected (3, S, S), got {img.shape}")
    return encode_images(img[None], cfg, w, prefix, rt)[0]


def activation_range_probe(images: np.ndarray, cfg: EncoderConfig, w, prefix: str = "vision", book=None):
    """Record per-site activation statistics over a batch of images.

    Returns a :class:`~npuvlm.ranges.RangeBook`; pass an existing ``book`` to
    accumulate into it. ``book.summary()`` gives min, max and the |x|
    percentile table per site.
    """
    from .ranges import RangeBook

    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise ValueError("activation_range_probe needs at least one image")
    book = RangeBook() if book is None else book
    encode_images(images, cfg, w, prefix, Runtime(recorder=book))
    return book
