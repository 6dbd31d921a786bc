"""Minimal CLIP dual-encoder inference on CPU with recorded text attention.

The text encoder records every post-softmax attention map and accepts
per-(layer, head) override matrices, which is what makes exact
finite-difference checks of the attribution gradients possible.  All
production math is float32; the forward code itself is dtype-generic so
tiny float64 models can be used for numerical tests.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from scipy.special import erf, expit

from .errors import ConfigError, InputError, LoadError, NumericalError
from .tokenizer import TokenSequence

_LN_EPS = 1e-5

# Reference CLIP preprocessing constants.
CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)

ACTIVATIONS = ("gelu", "quick-gelu")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the scoring defaults bound to a checkpoint."""

    text_layers: int
    text_heads: int
    text_width: int
    context_length: int
    vocab_size: int
    vision_layers: int
    vision_heads: int
    vision_width: int
    patch_size: int
    image_resolution: int
    embed_dim: int
    activation: str = "gelu"
    l_start: int | None = None
    epsilon: float = -5e-5
    template: str = "A photo depicts "
    image_mean: tuple[float, float, float] = CLIP_IMAGE_MEAN
    image_std: tuple[float, float, float] = CLIP_IMAGE_STD
    merges_path: str | None = None

    def __post_init__(self):
        for name in (
            "text_layers",
            "text_heads",
            "text_width",
            "context_length",
            "vision_layers",
            "vision_heads",
            "vision_width",
            "patch_size",
            "image_resolution",
            "embed_dim",
            "vocab_size",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            if value <= 0:
                raise ConfigError(f"{name} must be positive")
        if not isinstance(self.template, str):
            raise ConfigError("template must be a string")
        if self.context_length < 3:
            raise ConfigError("context_length must be >= 3")
        if self.text_width % self.text_heads:
            raise ConfigError("text_width must be divisible by text_heads")
        if self.vision_width % self.vision_heads:
            raise ConfigError("vision_width must be divisible by vision_heads")
        if self.image_resolution % self.patch_size:
            raise ConfigError("image_resolution must be divisible by patch_size")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.l_start is not None and not 1 <= self.l_start <= self.text_layers:
            raise ConfigError(
                f"l_start must be in [1, {self.text_layers}], got {self.l_start}"
            )
        if not self.epsilon < 0:
            raise ConfigError("epsilon must be negative")
        if len(self.image_mean) != 3 or len(self.image_std) != 3:
            raise ConfigError("image_mean/image_std must have 3 channels")

    @property
    def resolved_l_start(self) -> int:
        """Layer-mean start index (1-based); defaults to the final three layers."""
        if self.l_start is not None:
            return self.l_start
        return max(1, self.text_layers - 2)

    @property
    def num_patches(self) -> int:
        return (self.image_resolution // self.patch_size) ** 2

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        clean = dict(data)
        for key in ("image_mean", "image_std"):
            if key in clean:
                clean[key] = tuple(float(v) for v in clean[key])
        return cls(**clean)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ModelConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class AttentionLayerWeights:
    in_proj_w: np.ndarray  # (3d, d)
    in_proj_b: np.ndarray  # (3d,)
    out_proj_w: np.ndarray  # (d, d)
    out_proj_b: np.ndarray  # (d,)


@dataclass(frozen=True)
class BlockWeights:
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    attn: AttentionLayerWeights
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    fc_w: np.ndarray  # (4d, d)
    fc_b: np.ndarray
    proj_w: np.ndarray  # (d, 4d)
    proj_b: np.ndarray


@dataclass(frozen=True)
class TextTower:
    token_embedding: np.ndarray  # (vocab, d)
    positional_embedding: np.ndarray  # (n, d)
    blocks: tuple[BlockWeights, ...]
    ln_final_w: np.ndarray
    ln_final_b: np.ndarray
    projection: np.ndarray  # (d, embed_dim)


@dataclass(frozen=True)
class VisionTower:
    patch_embedding: np.ndarray  # (d, 3, p, p) conv kernel
    class_embedding: np.ndarray  # (d,)
    positional_embedding: np.ndarray  # (m + 1, d)
    ln_pre_w: np.ndarray
    ln_pre_b: np.ndarray
    blocks: tuple[BlockWeights, ...]
    ln_post_w: np.ndarray
    ln_post_b: np.ndarray
    projection: np.ndarray  # (d, embed_dim)


@dataclass(frozen=True)
class Model:
    """Immutable weights for both encoders; safe to share across workers."""

    config: ModelConfig
    text: TextTower
    vision: VisionTower


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray  # (embed_dim,)


@dataclass(frozen=True)
class ImageInput:
    """Channel-normalized (3, R, R) float pixels, ready for patch embedding."""

    pixels: np.ndarray


@dataclass
class AttentionTrace:
    """Post-softmax attention probabilities of the text encoder, (L, H, n, n)."""

    maps: np.ndarray

    def layer_head(self, layer: int, head: int) -> np.ndarray:
        return self.maps[layer, head]

    def as_overrides(self) -> dict[tuple[int, int], np.ndarray]:
        """Override mapping that reproduces this trace when fed back to the forward."""
        L, H = self.maps.shape[:2]
        return {(l, h): self.maps[l, h].copy() for l in range(L) for h in range(H)}


# ---------------------------------------------------------------------------
# weight container I/O and naming


def _block_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln_1.weight": (d,),
        f"{prefix}.ln_1.bias": (d,),
        f"{prefix}.attn.in_proj.weight": (3 * d, d),
        f"{prefix}.attn.in_proj.bias": (3 * d,),
        f"{prefix}.attn.out_proj.weight": (d, d),
        f"{prefix}.attn.out_proj.bias": (d,),
        f"{prefix}.ln_2.weight": (d,),
        f"{prefix}.ln_2.bias": (d,),
        f"{prefix}.mlp.fc.weight": (4 * d, d),
        f"{prefix}.mlp.fc.bias": (4 * d,),
        f"{prefix}.mlp.proj.weight": (d, 4 * d),
        f"{prefix}.mlp.proj.bias": (d,),
    }


def expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> required shape for a given configuration."""
    d, dv = config.text_width, config.vision_width
    p = config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "text.token_embedding": (config.vocab_size, d),
        "text.positional_embedding": (config.context_length, d),
        "text.ln_final.weight": (d,),
        "text.ln_final.bias": (d,),
        "text.projection": (d, config.embed_dim),
        "vision.patch_embedding": (dv, 3, p, p),
        "vision.class_embedding": (dv,),
        "vision.positional_embedding": (config.num_patches + 1, dv),
        "vision.ln_pre.weight": (dv,),
        "vision.ln_pre.bias": (dv,),
        "vision.ln_post.weight": (dv,),
        "vision.ln_post.bias": (dv,),
        "vision.projection": (dv, config.embed_dim),
    }
    for i in range(config.text_layers):
        shapes.update(_block_shapes(f"text.blocks.{i}", d))
    for i in range(config.vision_layers):
        shapes.update(_block_shapes(f"vision.blocks.{i}", dv))
    return shapes


_OPENAI_FLAT = {
    "token_embedding.weight": "text.token_embedding",
    "positional_embedding": "text.positional_embedding",
    "ln_final.weight": "text.ln_final.weight",
    "ln_final.bias": "text.ln_final.bias",
    "text_projection": "text.projection",
    "visual.conv1.weight": "vision.patch_embedding",
    "visual.class_embedding": "vision.class_embedding",
    "visual.positional_embedding": "vision.positional_embedding",
    "visual.ln_pre.weight": "vision.ln_pre.weight",
    "visual.ln_pre.bias": "vision.ln_pre.bias",
    "visual.ln_post.weight": "vision.ln_post.weight",
    "visual.ln_post.bias": "vision.ln_post.bias",
    "visual.proj": "vision.projection",
}

_OPENAI_BLOCK_SUB = {
    "ln_1.weight": "ln_1.weight",
    "ln_1.bias": "ln_1.bias",
    "attn.in_proj_weight": "attn.in_proj.weight",
    "attn.in_proj_bias": "attn.in_proj.bias",
    "attn.out_proj.weight": "attn.out_proj.weight",
    "attn.out_proj.bias": "attn.out_proj.bias",
    "ln_2.weight": "ln_2.weight",
    "ln_2.bias": "ln_2.bias",
    "mlp.c_fc.weight": "mlp.fc.weight",
    "mlp.c_fc.bias": "mlp.fc.bias",
    "mlp.c_proj.weight": "mlp.proj.weight",
    "mlp.c_proj.bias": "mlp.proj.bias",
}

_OPENAI_BLOCK_RE = re.compile(r"^(visual\.)?transformer\.resblocks\.(\d+)\.(.+)$")


def translate_checkpoint_key(key: str) -> str | None:
    """Map one open-source CLIP checkpoint key to the canonical name, if known."""
    if key in _OPENAI_FLAT:
        return _OPENAI_FLAT[key]
    m = _OPENAI_BLOCK_RE.match(key)
    if m:
        tower = "vision" if m.group(1) else "text"
        sub = _OPENAI_BLOCK_SUB.get(m.group(3))
        if sub is not None:
            return f"{tower}.blocks.{m.group(2)}.{sub}"
    return None


def _canonicalize(weights: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    if any(k.startswith(("text.", "vision.")) for k in weights):
        return dict(weights)
    translated = {}
    for key, value in weights.items():
        canonical = translate_checkpoint_key(key)
        if canonical is not None:
            translated[canonical] = value
    return translated


def load_model(
    config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    dtype=np.float32,
) -> Model:
    """Validate a named-tensor container against ``config`` and build a Model.

    Accepts canonical names or the common open-source CLIP naming (translated
    automatically); extra tensors such as ``logit_scale`` are ignored.
    """
    tensors = _canonicalize(weights)
    shapes = expected_tensor_shapes(config)
    resolved: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise LoadError(f"weight container is missing tensor {name!r}")
        arr = np.asarray(tensors[name])
        if tuple(arr.shape) != shape:
            raise LoadError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}"
            )
        resolved[name] = np.ascontiguousarray(arr, dtype=dtype)

    def block(prefix: str) -> BlockWeights:
        return BlockWeights(
            ln1_w=resolved[f"{prefix}.ln_1.weight"],
            ln1_b=resolved[f"{prefix}.ln_1.bias"],
            attn=AttentionLayerWeights(
                in_proj_w=resolved[f"{prefix}.attn.in_proj.weight"],
                in_proj_b=resolved[f"{prefix}.attn.in_proj.bias"],
                out_proj_w=resolved[f"{prefix}.attn.out_proj.weight"],
                out_proj_b=resolved[f"{prefix}.attn.out_proj.bias"],
            ),
            ln2_w=resolved[f"{prefix}.ln_2.weight"],
            ln2_b=resolved[f"{prefix}.ln_2.bias"],
            fc_w=resolved[f"{prefix}.mlp.fc.weight"],
            fc_b=resolved[f"{prefix}.mlp.fc.bias"],
            proj_w=resolved[f"{prefix}.mlp.proj.weight"],
            proj_b=resolved[f"{prefix}.mlp.proj.bias"],
        )

    text = TextTower(
        token_embedding=resolved["text.token_embedding"],
        positional_embedding=resolved["text.positional_embedding"],
        blocks=tuple(block(f"text.blocks.{i}") for i in range(config.text_layers)),
        ln_final_w=resolved["text.ln_final.weight"],
        ln_final_b=resolved["text.ln_final.bias"],
        projection=resolved["text.projection"],
    )
    vision = VisionTower(
        patch_embedding=resolved["vision.patch_embedding"],
        class_embedding=resolved["vision.class_embedding"],
        positional_embedding=resolved["vision.positional_embedding"],
        ln_pre_w=resolved["vision.ln_pre.weight"],
        ln_pre_b=resolved["vision.ln_pre.bias"],
        blocks=tuple(block(f"vision.blocks.{i}") for i in range(config.vision_layers)),
        ln_post_w=resolved["vision.ln_post.weight"],
        ln_post_b=resolved["vision.ln_post.bias"],
        projection=resolved["vision.projection"],
    )
    return Model(config=config, text=text, vision=vision)


def read_named_tensors(path: str | Path) -> dict[str, np.ndarray]:
    from safetensors.numpy import load_file

    try:
        return load_file(str(path))
    except Exception as exc:  # safetensors raises its own error types
        raise LoadError(f"cannot read tensor container {path}: {exc}") from exc


def write_named_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    from safetensors.numpy import save_file

    save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(path))


def load_checkpoint(config: ModelConfig, path: str | Path, dtype=np.float32) -> Model:
    return load_model(config, read_named_tensors(path), dtype=dtype)


# ---------------------------------------------------------------------------
# forward math


def _layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * istd
    return xhat * w + b, (xhat, istd)


def _layer_norm_backward(dy, w, xhat, istd):
    dxhat = dy * w
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return istd * (dxhat - m1 - xhat * m2)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _quick_gelu(x):
    return x * expit(1.702 * x)


def _quick_gelu_grad(x):
    s = expit(1.702 * x)
    return s + 1.702 * x * s * (1.0 - s)


def activation_fns(name: str):
    if name == "quick-gelu":
        return _quick_gelu, _quick_gelu_grad
    return _gelu, _gelu_grad


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)  # (H, n, dh)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """Additive mask: -inf strictly above the diagonal, 0 elsewhere."""
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


@dataclass
class _BlockCache:
    ln1_xhat: np.ndarray
    ln1_istd: np.ndarray
    q: np.ndarray  # (H, n, dh)
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # (H, n, n) post-softmax, post-override
    ln2_xhat: np.ndarray
    ln2_istd: np.ndarray
    mlp_pre: np.ndarray  # (n, 4d) pre-activation


@dataclass
class _TextForwardCache:
    z: int
    blocks: list[_BlockCache] = field(default_factory=list)
    lnf_xhat: np.ndarray | None = None
    lnf_istd: np.ndarray | None = None
    e_t: np.ndarray | None = None
    trace: AttentionTrace | None = None


def _encoder_block(x, blk: BlockWeights, heads: int, mask, act, override=None):
    """One pre-LN transformer block; returns (x_out, cache)."""
    h, (ln1_xhat, ln1_istd) = _layer_norm(x, blk.ln1_w, blk.ln1_b)
    qkv = h @ blk.attn.in_proj_w.T + blk.attn.in_proj_b
    d = x.shape[1]
    q = _split_heads(qkv[:, :d], heads)
    k = _split_heads(qkv[:, d : 2 * d], heads)
    v = _split_heads(qkv[:, 2 * d :], heads)
    dh = d // heads
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    attn = _softmax_rows(scores)
    if override:
        for head, matrix in override.items():
            attn[head] = matrix
    z_heads = attn @ v
    attn_out = _merge_heads(z_heads) @ blk.attn.out_proj_w.T + blk.attn.out_proj_b
    x_mid = x + attn_out
    h2, (ln2_xhat, ln2_istd) = _layer_norm(x_mid, blk.ln2_w, blk.ln2_b)
    pre = h2 @ blk.fc_w.T + blk.fc_b
    x_out = x_mid + act(pre) @ blk.proj_w.T + blk.proj_b
    cache = _BlockCache(
        ln1_xhat=ln1_xhat,
        ln1_istd=ln1_istd,
        q=q,
        k=k,
        v=v,
        attn=attn,
        ln2_xhat=ln2_xhat,
        ln2_istd=ln2_istd,
        mlp_pre=pre,
    )
    return x_out, cache


def _check_override_map(overrides, config: ModelConfig, dtype):
    checked: dict[int, dict[int, np.ndarray]] = {}
    if not overrides:
        return checked
    n = config.context_length
    for (layer, head), matrix in overrides.items():
        if not 0 <= layer < config.text_layers or not 0 <= head < config.text_heads:
            raise InputError(f"override index (layer={layer}, head={head}) out of range")
        arr = np.ascontiguousarray(matrix, dtype=dtype)
        if arr.shape != (n, n):
            raise InputError(
                f"override for (layer={layer}, head={head}) has shape {arr.shape}, "
                f"expected {(n, n)}"
            )
        checked.setdefault(layer, {})[head] = arr
    return checked


def _text_forward(
    model: Model,
    tokens: TokenSequence,
    overrides: Mapping[tuple[int, int], np.ndarray] | None = None,
) -> _TextForwardCache:
    cfg = model.config
    tw = model.text
    n = cfg.context_length
    if len(tokens.ids) != n:
        raise InputError(f"token sequence length {len(tokens.ids)} != context {n}")
    if not 1 <= tokens.z <= n - 1:
        raise InputError(f"EOS index z={tokens.z} out of range for n={n}")
    ids = np.asarray(tokens.ids)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError("token id out of vocabulary range")

    dtype = tw.token_embedding.dtype
    override_map = _check_override_map(overrides, cfg, dtype)
    act, _ = activation_fns(cfg.activation)
    mask = causal_mask(n, dtype)

    x = tw.token_embedding[ids] + tw.positional_embedding
    cache = _TextForwardCache(z=tokens.z)
    maps = np.empty((cfg.text_layers, cfg.text_heads, n, n), dtype=dtype)
    for li, blk in enumerate(tw.blocks):
        x, bc = _encoder_block(x, blk, cfg.text_heads, mask, act, override_map.get(li))
        cache.blocks.append(bc)
        maps[li] = bc.attn
    xf, (lnf_xhat, lnf_istd) = _layer_norm(x, tw.ln_final_w, tw.ln_final_b)
    e_t = xf[tokens.z] @ tw.projection
    cache.lnf_xhat = lnf_xhat
    cache.lnf_istd = lnf_istd
    cache.e_t = e_t
    cache.trace = AttentionTrace(maps=maps)
    return cache


def encode_text(
    model: Model,
    tokens: TokenSequence,
    overrides: Mapping[tuple[int, int], np.ndarray] | None = None,
) -> tuple[Embedding, AttentionTrace]:
    """EOS-pooled projected text embedding plus the full attention trace.

    ``overrides`` replaces the computed post-softmax attention for specific
    (layer, head) pairs (0-based); the forward continues from the replacement.
    """
    cache = _text_forward(model, tokens, overrides)
    if not np.all(np.isfinite(cache.e_t)):
        raise NumericalError("text embedding contains non-finite values")
    return Embedding(values=cache.e_t), cache.trace


def encode_image(model: Model, image: ImageInput) -> Embedding:
    """Class-token pooled projected image embedding (no gradients needed here)."""
    cfg = model.config
    vt = model.vision
    px = np.asarray(image.pixels)
    res = cfg.image_resolution
    if px.shape != (3, res, res):
        raise InputError(f"image pixels have shape {px.shape}, expected {(3, res, res)}")
    px = px.astype(vt.patch_embedding.dtype, copy=False)

    p = cfg.patch_size
    g = res // p
    # (3, g, p, g, p) -> (g, g, 3, p, p) -> (m, 3*p*p), matching conv unfold order
    patches = px.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, -1)
    kernel = vt.patch_embedding.reshape(vt.patch_embedding.shape[0], -1)
    x = patches @ kernel.T
    x = np.concatenate([vt.class_embedding[None, :], x], axis=0)
    x = x + vt.positional_embedding
    x, _ = _layer_norm(x, vt.ln_pre_w, vt.ln_pre_b)
    act, _ = activation_fns(cfg.activation)
    for blk in vt.blocks:
        x, _ = _encoder_block(x, blk, cfg.vision_heads, None, act)
    cls, _ = _layer_norm(x[0], vt.ln_post_w, vt.ln_post_b)
    e_v = cls @ vt.projection
    if not np.all(np.isfinite(e_v)):
        raise NumericalError("image embedding contains non-finite values")
    return Embedding(values=e_v)


def similarity(e_v: Embedding, e_t: Embedding) -> float:
    """Cosine similarity of the two embeddings, in [-1, 1]."""
    a = np.asarray(e_v.values, dtype=np.float64)
    b = np.asarray(e_t.values, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (np.isfinite(na) and np.isfinite(nb)):
        raise NumericalError("embedding norm is not finite")
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cosine similarity undefined for zero-norm embedding")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# image preparation


def preprocess_image(raw: np.ndarray, config: ModelConfig) -> ImageInput:
    """Resize (bicubic, shorter side), center-crop, scale to [0,1], normalize."""
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) RGB pixels, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InputError("image has a zero dimension")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)

    res = config.image_resolution
    h, w = arr.shape[:2]
    scale = res / min(h, w)
    nh, nw = round(h * scale), round(w * scale)
    if (nh, nw) != (h, w):
        channels = [
            np.asarray(
                Image.fromarray(arr[:, :, c], mode="F").resize((nw, nh), Image.BICUBIC),
                dtype=np.float32,
            )
            for c in range(3)
        ]
        arr = np.stack(channels, axis=2)
    top = (nh - res) // 2
    left = (nw - res) // 2
    arr = arr[top : top + res, left : left + res]

    chw = arr.transpose(2, 0, 1)
    mean = np.asarray(config.image_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(config.image_std, dtype=np.float32)[:, None, None]
    return ImageInput(pixels=(chw - mean) / std)


def load_image_input(path: str | Path, config: ModelConfig) -> ImageInput:
    """Read an image file or a preprocessed CHW tensor sidecar.

    A ``.safetensors`` path must hold exactly one (3, R, R) tensor that is
    already preprocessed; anything else is decoded with PIL and preprocessed.
    """
    path = Path(path)
    if path.suffix == ".safetensors":
        tensors = read_named_tensors(path)
        if len(tensors) != 1:
            raise InputError(
                f"image sidecar {path} must hold exactly one tensor, has {len(tensors)}"
            )
        (pixels,) = tensors.values()
        res = config.image_resolution
        if pixels.shape != (3, res, res):
            raise InputError(
                f"image sidecar tensor has shape {pixels.shape}, expected {(3, res, res)}"
            )
        return ImageInput(pixels=pixels.astype(np.float32, copy=False))
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return preprocess_image(rgb, config)
