"""Plain ViT encoder used as the quantization and traffic baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn_ops as ops
from .errors import ShapeError
from .initializers import fan_in_uniform
from .model import _Model
from .runtime import FLOAT, Runtime


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 96
    patch_size: int = 16
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    out_dim: int | None = None
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size: must be a multiple of patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads: must divide d_model")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


def init_vit_weights(cfg: ViTConfig, rng: np.random.Generator, prefix: str = "vit") -> dict[str, np.ndarray]:
    """Fan-in uniform projections with residual outputs scaled by ``1/sqrt(2 * n_layers)``."""
    d, p = cfg.d_model, cfg.patch_size

    res = 1.0 / np.sqrt(2 * cfg.n_layers)

    def lin(o, i, gain=1.0):
        return fan_in_uniform(rng, (o, i), i, gain)

    w = {
        f"{prefix}.patch.w": lin(d, 3 * p * p),
        f"{prefix}.patch.b": np.zeros(d, np.float32),
        f"{prefix}.pos": (0.02 * rng.standard_normal((cfg.num_tokens, d))).astype(np.float32),
    }
    hid = cfg.mlp_ratio * d
    for i in range(cfg.n_layers):
        L = f"{prefix}.layers.{i}"
        for ln in ("ln1", "ln2"):
            w[f"{L}.{ln}.g"] = np.ones(d, np.float32)
            w[f"{L}.{ln}.b"] = np.zeros(d, np.float32)
        w[f"{L}.attn.qkv.w"] = lin(3 * d, d)
        w[f"{L}.attn.qkv.b"] = np.zeros(3 * d, np.float32)
        w[f"{L}.attn.o.w"] = lin(d, d, res)
        w[f"{L}.attn.o.b"] = np.zeros(d, np.float32)
        w[f"{L}.mlp.fc1.w"] = lin(hid, d)
        w[f"{L}.mlp.fc1.b"] = np.zeros(hid, np.float32)
        w[f"{L}.mlp.fc2.w"] = lin(d, hid, res)
        w[f"{L}.mlp.fc2.b"] = np.zeros(d, np.float32)
    w[f"{prefix}.final_ln.g"] = np.ones(d, np.float32)
    w[f"{prefix}.final_ln.b"] = np.zeros(d, np.float32)
    if cfg.out_dim:
        w[f"{prefix}.proj.w"] = lin(cfg.out_dim, d)
    return w


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(3, S, S)`` → ``(num_patches, 3*patch*patch)`` in row-major patch order."""
    c, s, _ = img.shape
    g = s // patch
    return img.reshape(c, g, patch, g, patch).transpose(1, 3, 0, 2, 4).reshape(g * g, c * patch * patch)


def _dense(x, w, name, layer, rt: Runtime, bias=True):
    wt = w[f"{name}.w"]
    x = rt.act(f"{name}.in", x)
    rt.count_weight_op(layer, name.rsplit(".", 1)[-1], f"{name}.w", wt.size, x.shape[0] * wt.size)
    y = rt.linear(x, wt)
    if bias:
        y = y + w[f"{name}.b"]
    rt.count_activation(layer, name.rsplit(".", 1)[-1], y.size)
    return y


def vit_encode(img: np.ndarray, cfg: ViTConfig, w, prefix: str = "vit", rt: Runtime = FLOAT) -> np.ndarray:
    """Patch embed → pre-LN transformer blocks → final LN (→ optional projection)."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape != (3, cfg.image_size, cfg.image_size):
        raise ShapeError(f"expected (3, {cfg.image_size}, {cfg.image_size}), got {img.shape}")
    t, d, hd = cfg.num_tokens, cfg.d_model, cfg.head_dim
    spec = ops.AttentionSpec(d, cfg.n_heads, cfg.n_heads, hd, causal=False)
    x = _dense(patchify(img, cfg.patch_size), w, f"{prefix}.patch", f"{prefix}.patch", rt) + w[f"{prefix}.pos"]
    for i in range(cfg.n_layers):
        L = f"{prefix}.layers.{i}"
        h = ops.layernorm(x, w[f"{L}.ln1.g"], w[f"{L}.ln1.b"], cfg.norm_eps)
        qkv = _dense(h, w, f"{L}.attn.qkv", L, rt)
        q = rt.act(f"{L}.attn.q.out", qkv[:, :d]).reshape(t, cfg.n_heads, hd)
        k = rt.act(f"{L}.attn.k.out", qkv[:, d : 2 * d]).reshape(t, cfg.n_heads, hd)
        v = rt.act(f"{L}.attn.v.out", qkv[:, 2 * d :]).reshape(t, cfg.n_heads, hd)
        rt.count_macs(L, "attend", 2 * cfg.n_heads * t * t * hd)
        rt.count_activation(L, "scores", cfg.n_heads * t * t)
        a = ops.attention(q, k, v, spec).reshape(t, d)
        x = x + _dense(a, w, f"{L}.attn.o", L, rt)
        h = ops.layernorm(x, w[f"{L}.ln2.g"], w[f"{L}.ln2.b"], cfg.norm_eps)
        h = ops.gelu_tanh(_dense(h, w, f"{L}.mlp.fc1", L, rt))
        x = x + _dense(h, w, f"{L}.mlp.fc2", L, rt)
    x = ops.layernorm(x, w[f"{prefix}.final_ln.g"], w[f"{prefix}.final_ln.b"], cfg.norm_eps)
    if f"{prefix}.proj.w" in w:
        x = _dense(x, w, f"{prefix}.proj", f"{prefix}.proj", rt, bias=False)
    return rt.act(f"{prefix}.out", x)


def vit_param_count(cfg: ViTConfig) -> int:
    d, hid = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    per_layer = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (hid * d + hid) + (d * hid + d)
    total = 3 * cfg.patch_size**2 * d + d + cfg.num_tokens * d + cfg.n_layers * per_layer + 2 * d
    if cfg.out_dim:
        total += cfg.out_dim * d
    return total


def match_vit_config(target_params: int, image_size: int, patch_size: int = 16, out_dim: int | None = None,
                     n_heads: int = 4, mlp_ratio: int = 4, tolerance: float = 0.05,
                     layer_choices=range(2, 13), width_step: int = 8) -> ViTConfig:
    """Search depth and width for the ViT whose parameter count is closest to
    ``target_params``; raise if nothing lands within ``tolerance``."""
    best = None
    for n_layers in layer_choices:
        for d in range(width_step * n_heads, 4097, width_step * n_heads):
            cfg = ViTConfig(image_size, patch_size, d, n_layers, n_heads, mlp_ratio, out_dim)
            err = abs(vit_param_count(cfg) - target_params) / target_params
            key = (err, n_layers)
            if best is None or key < best[0]:
                best = (key, cfg)
    (err, _), cfg = best
    if err > tolerance:
        raise ValueError(f"no ViT within {tolerance:.0%} of {target_params} parameters (best {err:.1%})")
    return cfg


class ViTEncoder(_Model):
    kind = "vit"

    @classmethod
    def init(cls, config: ViTConfig, seed: int) -> "ViTEncoder":
        return cls(config, init_vit_weights(config, np.random.default_rng(seed)))

    def stages(self, image: np.ndarray, rt: Runtime = FLOAT) -> dict[str, np.ndarray]:
        return {"encoder": vit_encode(image, self.config, self.weights, "vit", rt)}

    def example_input(self) -> np.ndarray:
        s = self.config.image_size
        return np.zeros((3, s, s), np.float32)


class OutlierRuntime(Runtime):
    """Calibration runtime that adds heavy-tailed outliers at chosen sites.

    At each site in ``sites`` a random ``element_rate`` of the elements
    receive ``scale * rms(x) * t(df)`` perturbations before they are recorded
    and passed downstream.
    """

    def __init__(self, recorder, sites, rng: np.random.Generator, element_rate: float = 1e-4,
                 scale: float = 10.0, df: float = 2.0):
        super().__init__(recorder=recorder)
        self.sites = frozenset(sites)
        self.rng = rng
        self.element_rate = element_rate
        self.scale = scale
        self.df = df

    def act(self, site, x):
        if site in self.sites and x.size:
            hit = self.rng.random(x.shape) < self.element_rate
            n = int(hit.sum())
            if n:
                rms = float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))
                x = x.copy()
                x[hit] += (self.scale * rms * self.rng.standard_t(self.df, n)).astype(x.dtype)
        return super().act(site, x)


def range_coverage(book, p: float = 99.99) -> dict:
    """How much of each site's min/max grid its bulk actually uses.

    Per site, coverage is ``abs_percentile(p) / max|x|``: near 1 for
    compact distributions, small when a few outliers stretch the range.
    """
    cov = {}
    for s, st in book.sites.items():
        amax = max(abs(st.min), abs(st.max))
        cov[s] = st.abs_percentile(p) / amax if amax > 0 else 1.0
    v = np.array(list(cov.values())) if cov else np.ones(1)
    return {"percentile": p, "median": float(np.median(v)), "min": float(v.min()), "mean": float(v.mean()),
            "sites": len(cov)}


def _arm(model, calib, evals, plan, method, outliers, seed):
    from .calib import evaluate_quantization, quantize_model
    from .ranges import RangeBook

    book = RangeBook(method=method)
    if outliers:
        sites = model.site_ids()
        rng = np.random.default_rng(seed)
        k = max(1, int(round(outliers["site_fraction"] * len(sites))))
        chosen = sorted(rng.choice(sites, size=k, replace=False).tolist())
        rt = OutlierRuntime(book, chosen, rng, outliers["element_rate"], outliers["scale"], outliers["df"])
    else:
        rt = Runtime(recorder=book)
    for x in calib:
        model.stages(x, rt)
    q = quantize_model(model, plan, book)
    rep = evaluate_quantization(model, q, evals)
    return {"encoder": rep.stages["encoder"].to_dict(), "coverage": range_coverage(book)}


DEFAULT_OUTLIERS = {"site_fraction": 0.25, "element_rate": 2e-5, "scale": 1000.0, "df": 2.0}


def brittleness_experiment(conv_encoder, vit_encoder, calib_inputs, eval_inputs, plan=None,
                           outliers: dict | None = DEFAULT_OUTLIERS, seed: int = 0) -> dict:
    """Compare static-quantization error of two encoders under one plan.

    Both arms are calibrated on ``calib_inputs`` and evaluated on
    ``eval_inputs``. ``ratio`` is ``vit RMS% / conv RMS%`` under minmax
    calibration. The outlier arm injects heavy-tailed perturbations during
    calibration and reports minmax and percentile(99.99) results.
    """
    from .calib import build_precision_plan

    calib_inputs, eval_inputs = list(calib_inputs), list(eval_inputs)
    if not calib_inputs or not eval_inputs:
        raise ValueError("calibration and evaluation sets must be non-empty")
    shapes = {np.shape(x) for x in eval_inputs}
    if len(shapes) != 1:
        raise ShapeError("evaluation inputs must share one shape")
    for m in (conv_encoder, vit_encoder):
        if np.shape(m.example_input()) not in shapes:
            raise ShapeError(f"{m.kind} expects inputs of shape {np.shape(m.example_input())}")
    o_conv = conv_encoder.stages(eval_inputs[0])["encoder"]
    o_vit = vit_encoder.stages(eval_inputs[0])["encoder"]
    if o_conv.shape[-1] != o_vit.shape[-1]:
        raise ShapeError(f"output widths differ: {o_conv.shape[-1]} vs {o_vit.shape[-1]}")
    plan = plan or build_precision_plan("w8a16")
    out = {"plan": plan.to_dict(), "n_calib": len(calib_inputs), "n_eval": len(eval_inputs),
           "params": {"conv": conv_encoder.param_count(), "vit": vit_encoder.param_count()}}
    arms = {}
    for name, m in (("conv", conv_encoder), ("vit", vit_encoder)):
        arms[name] = {"minmax": _arm(m, calib_inputs, eval_inputs, plan, "minmax", None, seed)}
        if outliers:
            arms[name]["outlier_minmax"] = _arm(m, calib_inputs, eval_inputs, plan, "minmax", outliers, seed)
            arms[name]["outlier_percentile"] = _arm(m, calib_inputs, eval_inputs, plan, "percentile:99.99", outliers, seed)
    out["arms"] = arms
    out["outliers"] = dict(outliers) if outliers else None
    c = arms["conv"]["minmax"]["encoder"]["rms_error_percent"]
    v = arms["vit"]["minmax"]["encoder"]["rms_error_percent"]
    out["ratio"] = v / c if c > 0 else None
    out["conv_better"] = c < v
    return out
