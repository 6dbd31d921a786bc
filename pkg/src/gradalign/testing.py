"""Helpers for building tiny randomly-initialized models and fixtures.

Used by the test suite and handy for smoke-testing deployments without a
real checkpoint.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import (
    Model,
    ModelConfig,
    expected_tensor_shapes,
    load_model,
    write_named_tensors,
)

# Two merges on top of the 514 base tokens: "ca" and "cat</w>".
DEMO_MERGES = (("c", "a"), ("ca", "t</w>"))
DEMO_VOCAB_SIZE = 512 + len(DEMO_MERGES) + 2


def write_merges_file(path: str | Path, merges=DEMO_MERGES) -> Path:
    path = Path(path)
    lines = ["#version: gradalign-demo"] + [f"{a} {b}" for a, b in merges]
    path.write_text("\n".join(lines) + "\n")
    return path


def tiny_config(**overrides) -> ModelConfig:
    defaults = dict(
        text_layers=2,
        text_heads=2,
        text_width=16,
        context_length=16,
        vocab_size=DEMO_VOCAB_SIZE,
        vision_layers=2,
        vision_heads=2,
        vision_width=16,
        patch_size=4,
        image_resolution=8,
        embed_dim=8,
        activation="gelu",
    )
    defaults.update(overrides)
    return ModelConfig.from_dict(defaults)


def random_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Random tensors in the canonical naming, scaled like a sane init."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, shape in expected_tensor_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("ln_1.weight", "ln_2.weight", "ln_pre.weight", "ln_post.weight", "ln_final.weight")):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif leaf == "bias":
            arr = 0.1 * rng.standard_normal(shape)
        elif len(shape) >= 2:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        else:
            arr = 0.1 * rng.standard_normal(shape)
        out[name] = arr.astype(dtype)
    return out


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    config = config or tiny_config()
    return load_model(config, random_weights(config, seed=seed, dtype=dtype), dtype=dtype)


def random_image_pixels(config: ModelConfig, seed: int = 0) -> np.ndarray:
    """A preprocessed-looking CHW tensor suitable for an image sidecar."""
    rng = np.random.default_rng(seed)
    res = config.image_resolution
    return rng.standard_normal((3, res, res)).astype(np.float32)


def write_image_sidecar(path: str | Path, pixels: np.ndarray) -> Path:
    path = Path(path)
    write_named_tensors(path, {"pixels": np.asarray(pixels, dtype=np.float32)})
    return path
