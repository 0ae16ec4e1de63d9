"""Shared tiny configs and helpers; every model here runs in milliseconds."""

import numpy as np
import pytest

from npuvlm import backbone as bb
from npuvlm import vision
from npuvlm.model import VLM, ConvEncoder, VLMConfig, VLMInput


def tiny_backbone(**kw) -> bb.BackboneConfig:
    base = dict(n_layers=4, layer_pattern="CACA", d_model=32, n_heads=2, n_kv_heads=1, head_dim=16,
                ffn_inner=64, vocab_size=97, max_context=128)
    base.update(kw)
    return bb.BackboneConfig(**base)


def tiny_encoder(**kw) -> vision.EncoderConfig:
    base = dict(input_size=96, stem_channels=8,
                stages=(vision.StageConfig(1, 8, 2), vision.StageConfig(1, 12, 2),
                        vision.StageConfig(1, 16, 2), vision.StageConfig(1, 16, 2)),
                mqa_positions=((3, 0),), mqa_heads=2, msfa_out_channels=32, msfa_expansion=1)
    base.update(kw)
    return vision.EncoderConfig(**base)


def tiny_vlm_config(**kw) -> VLMConfig:
    return VLMConfig(tiny_encoder(), tiny_backbone(**kw))


def images(n, size=96, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (3, size, size)).astype(np.float32) for _ in range(n)]


def vlm_inputs(n, size=96, seed=0, text=(1, 2, 3)):
    return [VLMInput(img, tuple(text)) for img in images(n, size, seed)]


@pytest.fixture
def backbone_cfg():
    return tiny_backbone()


@pytest.fixture
def backbone_weights(backbone_cfg):
    return bb.init_backbone_weights(backbone_cfg, np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_vlm():
    return VLM.init(tiny_vlm_config(), 0)


@pytest.fixture(scope="session")
def tiny_conv():
    return ConvEncoder.init(tiny_encoder(), 0)


BRITTLENESS_SEEDS = range(5)


def brittleness_run(seed, n_calib=16, n_eval=64):
    """One seeded W8A16 comparison of the toy conv encoder and its matched ViT."""
    from npuvlm.artifacts import preset_config
    from npuvlm.vit import ViTEncoder, brittleness_experiment

    conv = ConvEncoder.init(preset_config("conv_encoder", "toy"), seed)
    vit = ViTEncoder.init(preset_config("vit", "toy"), seed)
    rng = np.random.default_rng(seed)
    calib = [rng.uniform(-1, 1, (3, 96, 96)).astype(np.float32) for _ in range(n_calib)]
    evals = [rng.uniform(-1, 1, (3, 96, 96)).astype(np.float32) for _ in range(n_eval)]
    return brittleness_experiment(conv, vit, calib, evals, seed=seed)


@pytest.fixture(scope="session")
def brittleness_reports():
    return [brittleness_run(s) for s in BRITTLENESS_SEEDS]


ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(tag: str, ok: bool, detail: str) -> None:
    line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[tag] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[tag])
