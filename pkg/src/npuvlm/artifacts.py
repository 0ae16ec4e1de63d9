"""Conversion between models and bundles, plus named config presets."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from . import backbone as bb
from . import vision
from .bundle import Bundle
from .calib import PrecisionPlan, QuantizedModel
from .model import VLM, ConvEncoder, VLMConfig
from .qtensor import QTensor
from .vit import ViTConfig, ViTEncoder, match_vit_config

KINDS = {"vlm": (VLM, VLMConfig), "conv_encoder": (ConvEncoder, vision.EncoderConfig), "vit": (ViTEncoder, ViTConfig)}


def _toy_backbone() -> bb.BackboneConfig:
    return bb.BackboneConfig(ffn_inner=512)


def paper_encoder_config() -> vision.EncoderConfig:
    """768 px input fused into a 16x16 map of 2048-wide tokens, with slim stages."""
    return vision.EncoderConfig(
        input_size=768, stem_channels=16,
        stages=(vision.StageConfig(1, 24), vision.StageConfig(1, 32), vision.StageConfig(1, 48), vision.StageConfig(1, 64)),
        mqa_positions=((3, 0),), msfa_out_channels=2048, msfa_expansion=1,
    )


def preset_config(kind: str, name: str):
    kind = kind.replace("-", "_")
    if kind not in KINDS:
        raise ValueError(f"kind: unknown model kind {kind!r}")
    if name == "toy":
        enc = vision.EncoderConfig()
        backbone = _toy_backbone()
    elif name == "paper":
        enc = paper_encoder_config()
        backbone = bb.BackboneConfig()
    else:
        raise ValueError(f"config: unknown preset {name!r}")
    if kind == "vlm":
        return VLMConfig(enc, backbone)
    if kind == "conv_encoder":
        return enc
    params = ConvEncoder.init(enc, 0).param_count()
    return match_vit_config(params, enc.input_size, out_dim=enc.token_dim)


def config_from_dict(kind: str, d: dict):
    kind = kind.replace("-", "_")
    cls = KINDS[kind][1]
    if kind == "vlm":
        for key, sub in (("encoder", vision.EncoderConfig), ("backbone", bb.BackboneConfig)):
            _check_fields(sub, d.get(key, {}), key + ".")
        unknown = set(d) - {"encoder", "backbone", "connector_hidden"}
        if unknown:
            raise ValueError(f"config field {sorted(unknown)[0]!r} is not recognised")
        if "encoder" not in d or "backbone" not in d:
            raise ValueError("config field 'encoder' and 'backbone' are required")
    else:
        _check_fields(cls, d, "")
    try:
        return cls.from_dict(d)
    except (TypeError, KeyError) as e:
        raise ValueError(f"config: {e}") from None


def _check_fields(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"config field {where}{unknown[0]!r} is not recognised")


def load_config(kind: str, spec: str):
    """``spec`` is a preset name (``toy``/``paper``) or a JSON file path."""
    if spec in ("toy", "paper"):
        return preset_config(kind, spec)
    try:
        d = json.loads(Path(spec).read_text())
    except FileNotFoundError:
        raise ValueError(f"config: file {spec!r} not found") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"config: {spec} is not valid JSON ({e})") from None
    return config_from_dict(kind, d)


def init_model(kind: str, config, seed: int):
    return KINDS[kind.replace("-", "_")][0].init(config, seed)


def model_to_bundle(model, seed: int | None) -> Bundle:
    return Bundle(model.kind, model.config.to_dict(), seed, dict(model.weights))


def quantized_to_bundle(q: QuantizedModel, seed: int | None) -> Bundle:
    return Bundle(q.kind, q.config.to_dict(), seed, dict(q.qweights), dict(q.act_params), q.plan.to_dict(), q.method)


def model_from_bundle(b: Bundle):
    """Return the float model, or a :class:`QuantizedModel` for quantized bundles."""
    if b.kind not in KINDS:
        raise ValueError(f"kind: unknown model kind {b.kind!r}")
    cls, cfg_cls = KINDS[b.kind]
    model = cls(cfg_cls.from_dict(b.config), b.float_weights())
    if not b.quantized:
        return model
    qw = {k: v for k, v in b.tensors.items() if isinstance(v, QTensor)}
    return QuantizedModel(model, PrecisionPlan.from_dict(b.plan), qw, b.act_params, b.method or "minmax")
