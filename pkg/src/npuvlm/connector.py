"""Norm-free two-layer MLP mapping visual tokens into the LM embedding space."""

from __future__ import annotations

import numpy as np

from . import nn_ops as ops
from .errors import ShapeError
from .initializers import fan_in_uniform
from .runtime import FLOAT, Runtime


def init_connector_weights(token_dim: int, hidden: int, d_model: int, rng: np.random.Generator,
                           prefix: str = "connector") -> dict[str, np.ndarray]:
    return {
        f"{prefix}.fc1.w": fan_in_uniform(rng, (hidden, token_dim), token_dim),
        f"{prefix}.fc1.b": np.zeros(hidden, np.float32),
        f"{prefix}.fc2.w": fan_in_uniform(rng, (d_model, hidden), hidden),
        f"{prefix}.fc2.b": np.zeros(d_model, np.float32),
    }


def project_tokens(tokens: np.ndarray, w, prefix: str = "connector", rt: Runtime = FLOAT,
                   norm_gain: np.ndarray | None = None) -> np.ndarray:
    """``fc2(gelu_tanh(fc1(t)))`` applied to every token independently.

    ``norm_gain`` inserts an RMSNorm after the hidden activation. It exists
    only for the contrast experiment on static-range friendliness; product
    weights never carry one.
    """
    w1, b1 = w[f"{prefix}.fc1.w"], w[f"{prefix}.fc1.b"]
    w2, b2 = w[f"{prefix}.fc2.w"], w[f"{prefix}.fc2.b"]
    if tokens.shape[-1] != w1.shape[1]:
        raise ShapeError(f"token_dim {tokens.shape[-1]} != connector input {w1.shape[1]}")
    rows = int(np.prod(tokens.shape[:-1]))
    x = rt.act(f"{prefix}.fc1.in", tokens)
    rt.count_weight_op(prefix, "fc1", f"{prefix}.fc1.w", w1.size, rows * w1.size)
    h = ops.gelu_tanh(rt.linear(x, w1) + b1)
    if norm_gain is not None:
        h = ops.rmsnorm(h, norm_gain)
    h = rt.act(f"{prefix}.fc2.in", h)
    rt.count_weight_op(prefix, "fc2", f"{prefix}.fc2.w", w2.size, rows * w2.size)
    return rt.act(f"{prefix}.out", rt.linear(h, w2) + b2)
