"""Model containers: a config plus a flat ``name -> float32 array`` weight map.

Every model exposes ``stages(sample, rt)``, which returns the named
intermediate outputs that quantization is evaluated on, and
``example_input()``, used to discover its activation sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import vision
from .connector import init_connector_weights, project_tokens
from .ranges import RangeBook
from .runtime import FLOAT, Runtime


@dataclass(frozen=True)
class VLMInput:
    image: np.ndarray
    text_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class VLMConfig:
    encoder: vision.EncoderConfig
    backbone: bb.BackboneConfig
    connector_hidden: int | None = None

    def __post_init__(self):
        # resolve the default so configs compare equal before and after serialisation
        if self.connector_hidden is None:
            object.__setattr__(self, "connector_hidden", self.backbone.d_model)

    @property
    def hidden(self) -> int:
        return self.connector_hidden

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "backbone": self.backbone.to_dict(),
            "connector_hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VLMConfig":
        return cls(vision.EncoderConfig.from_dict(d["encoder"]), bb.BackboneConfig.from_dict(d["backbone"]),
                   d.get("connector_hidden"))


class _Model:
    kind = ""

    def __init__(self, config, weights):
        self.config = config
        self.weights = dict(weights)

    def with_weights(self, weights):
        return type(self)(self.config, weights)

    def site_ids(self) -> list[str]:
        book = RangeBook()
        self.stages(self.example_input(), Runtime(recorder=book))
        return sorted(book.sites)

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.weights.values())


class VLM(_Model):
    """Encoder → connector → hybrid decoder."""

    kind = "vlm"

    @classmethod
    def init(cls, config: VLMConfig, seed: int) -> "VLM":
        rng = np.random.default_rng(seed)
        w = vision.init_encoder_weights(config.encoder, rng)
        w.update(init_connector_weights(config.encoder.token_dim, config.hidden, config.backbone.d_model, rng))
        w.update(bb.init_backbone_weights(config.backbone, rng))
        return cls(config, w)

    def encode(self, images: np.ndarray, rt: Runtime = FLOAT) -> np.ndarray:
        return vision.encode_images(images, self.config.encoder, self.weights, "vision", rt)

    def connect(self, tokens: np.ndarray, rt: Runtime = FLOAT) -> np.ndarray:
        return project_tokens(tokens, self.weights, "connector", rt)

    def new_session(self, rt: Runtime = FLOAT) -> bb.DecodeSession:
        return bb.new_session(self.config.backbone, self.weights, rt)

    def prompt(self, sample: VLMInput, rt: Runtime = FLOAT):
        """Return ``(visual tokens, prompt embeddings)`` for one sample."""
        tokens = self.encode(np.asarray(sample.image)[None], rt)[0]
        vis = self.connect(tokens, rt)
        text = self.weights["lm.embed"][np.asarray(sample.text_ids, dtype=np.int64)]
        return tokens, np.concatenate([vis, text.reshape(-1, vis.shape[1])]).astype(np.float32)

    def stages(self, sample: VLMInput, rt: Runtime = FLOAT) -> dict[str, np.ndarray]:
        tokens, emb = self.prompt(sample, rt)
        n_vis = tokens.shape[0]
        logits, _ = bb.prefill(emb, self.new_session(rt))
        return {"encoder": tokens, "connector": emb[:n_vis], "logits": logits}

    def generate(self, sample: VLMInput, n_steps: int, rt: Runtime = FLOAT) -> list[int]:
        _, emb = self.prompt(sample, rt)
        return bb.generate_greedy(emb, n_steps, self.new_session(rt))

    def forced_argmax(self, sample: VLMInput, continuation, rt: Runtime = FLOAT) -> np.ndarray:
        """Greedy predictions along a given continuation (teacher forcing).

        Element ``i`` is the model's argmax for continuation token ``i`` given
        the prompt and continuation tokens ``< i``.
        """
        continuation = list(continuation)
        if not continuation:
            return np.zeros(0, dtype=np.int64)
        _, emb = self.prompt(sample, rt)
        fed = self.weights["lm.embed"][np.asarray(continuation[:-1], dtype=np.int64)].reshape(-1, emb.shape[1])
        logits, _ = bb.prefill(np.concatenate([emb, fed]), self.new_session(rt))
        return np.argmax(logits[emb.shape[0] - 1 :], axis=-1)

    def example_input(self) -> VLMInput:
        s = self.config.encoder.input_size
        return VLMInput(np.zeros((3, s, s), np.float32), (0,))


class ConvEncoder(_Model):
    """The vision encoder alone, for encoder-level experiments."""

    kind = "conv_encoder"

    @classmethod
    def init(cls, config: vision.EncoderConfig, seed: int) -> "ConvEncoder":
        return cls(config, vision.init_encoder_weights(config, np.random.default_rng(seed)))

    def stages(self, image: np.ndarray, rt: Runtime = FLOAT) -> dict[str, np.ndarray]:
        return {"encoder": vision.encode_image(image, self.config, self.weights, "vision", rt)}

    def example_input(self) -> np.ndarray:
        s = self.config.input_size
        return np.zeros((3, s, s), np.float32)
