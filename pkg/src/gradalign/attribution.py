"""Signed gradient-based attributions over the text encoder's attention maps.

The score's exact reverse-mode gradient with respect to every post-softmax
attention matrix is computed by a hand-written adjoint of the forward pass.
Each map enters the graph as a free variable at its own layer (its softmax
Jacobian is not chained into the recorded gradient), while the backward
continues through the softmax so earlier layers receive the full chain; this
is exactly what a central finite difference through the attention-override
hook measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NumericalError
from .model import (
    AttentionTrace,
    Embedding,
    Model,
    _layer_norm_backward,
    _merge_heads,
    _split_heads,
    _text_forward,
    activation_fns,
)
from .tokenizer import TokenSequence

VARIANT_MODES = (
    "signed",
    "relu_before_head_mean",
    "relu_before_layer_mean",
    "grad_only",
)


@dataclass(frozen=True)
class AttributionVariant:
    """Attribution recipe; ``signed`` is the production default, the rest ablations."""

    mode: str = "signed"

    def __post_init__(self):
        if self.mode not in VARIANT_MODES:
            raise ConfigError(f"unknown attribution variant {self.mode!r}")


SIGNED = AttributionVariant("signed")


@dataclass
class GradientTrace:
    """d(score)/d(attention map) for every (layer, head), shape (L, H, n, n)."""

    grads: np.ndarray


@dataclass
class RelevanceMap:
    """Head-averaged per-layer maps plus their mean over layers l_start..L."""

    per_layer: np.ndarray  # (L, n, n)
    aggregate: np.ndarray  # (n, n)
    l_start: int  # 1-based start layer of the aggregate mean

    def token_row(self, z: int) -> np.ndarray:
        return token_attributions(self, z)


def attention_gradients(model: Model, tokens: TokenSequence, e_v) -> GradientTrace:
    """Exact gradients of the cosine score w.r.t. all text attention maps.

    The image embedding is held constant; no gradient flows into the vision
    encoder.  Accumulation runs layer-descending with a fixed operation order,
    so results are bit-reproducible.  Nothing is clamped: any non-finite value
    aborts with the layer where it appeared.
    """
    if isinstance(e_v, Embedding):
        e_v = e_v.values
    tw = model.text
    cfg = model.config
    dtype = tw.token_embedding.dtype
    ev = np.asarray(e_v, dtype=dtype)
    nv = np.linalg.norm(ev)
    if not np.isfinite(nv) or nv == 0.0:
        raise NumericalError("image embedding must have a positive finite norm")
    u = ev / nv

    cache = _text_forward(model, tokens)
    e_t = cache.e_t
    nt = np.linalg.norm(e_t)
    if not np.isfinite(nt) or nt == 0.0:
        raise NumericalError("text embedding must have a positive finite norm")
    score = (u @ e_t) / nt

    n = cfg.context_length
    heads = cfg.text_heads
    dh = cfg.text_width // heads
    _, act_grad = activation_fns(cfg.activation)

    # cosine with e_v fixed: d score / d e_t
    d_et = u / nt - score * e_t / (nt * nt)
    d_xf = np.zeros((n, cfg.text_width), dtype=dtype)
    d_xf[cache.z] = tw.projection @ d_et
    dx = _layer_norm_backward(d_xf, tw.ln_final_w, cache.lnf_xhat, cache.lnf_istd)

    grads = np.empty((cfg.text_layers, heads, n, n), dtype=dtype)
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for li in range(cfg.text_layers - 1, -1, -1):
        blk = tw.blocks[li]
        bc = cache.blocks[li]

        # MLP residual: x_out = x_mid + proj(act(fc(ln_2(x_mid))))
        dg = dx @ blk.proj_w
        du = dg * act_grad(bc.mlp_pre)
        dh2 = du @ blk.fc_w
        dx = dx + _layer_norm_backward(dh2, blk.ln2_w, bc.ln2_xhat, bc.ln2_istd)

        # attention residual: x_mid = x_in + out_proj(A @ V)
        dzc = dx @ blk.attn.out_proj_w
        dz_heads = _split_heads(dzc, heads)
        d_attn = dz_heads @ bc.v.transpose(0, 2, 1)  # gradient at the A node
        grads[li] = d_attn
        dv = bc.attn.transpose(0, 2, 1) @ dz_heads
        # softmax backward feeds the chain to earlier layers only
        inner = (d_attn * bc.attn).sum(axis=-1, keepdims=True)
        ds = bc.attn * (d_attn - inner)
        dq = ds @ bc.k * inv_sqrt_dh
        dk = ds.transpose(0, 2, 1) @ bc.q * inv_sqrt_dh
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1
        )
        dh1 = dqkv @ blk.attn.in_proj_w
        dx = dx + _layer_norm_backward(dh1, blk.ln1_w, bc.ln1_xhat, bc.ln1_istd)

        if not (np.all(np.isfinite(grads[li])) and np.all(np.isfinite(dx))):
            raise NumericalError(f"non-finite adjoint value at text layer {li + 1}")
    return GradientTrace(grads=grads)


def relevance(
    trace: AttentionTrace,
    grads: GradientTrace,
    l_start: int,
    variant: AttributionVariant = SIGNED,
) -> RelevanceMap:
    """Aggregate gradient x attention into per-layer and layer-mean maps.

    signed:                  R_l = mean_h (grad * A);  R = mean_{l >= l_start} R_l
    relu_before_head_mean:   positive part taken before the head mean
    relu_before_layer_mean:  positive part of R_l taken before the layer mean
    grad_only:               gradient alone, causally masked positions zeroed
    """
    A = trace.maps
    G = grads.grads
    if A.shape != G.shape:
        raise InputError(f"trace shape {A.shape} != gradient shape {G.shape}")
    layers, _, n, _ = A.shape
    if not 1 <= l_start <= layers:
        raise ConfigError(f"l_start must be in [1, {layers}], got {l_start}")

    if variant.mode == "grad_only":
        base = G.copy()
        iu, ju = np.triu_indices(n, k=1)
        base[..., iu, ju] = 0.0
    else:
        base = G * A

    if variant.mode == "relu_before_head_mean":
        per_layer = np.maximum(base, 0.0).mean(axis=1)
    else:
        per_layer = base.mean(axis=1)

    selected = per_layer[l_start - 1 :]
    if variant.mode == "relu_before_layer_mean":
        aggregate = np.maximum(selected, 0.0).mean(axis=0)
    else:
        aggregate = selected.mean(axis=0)
    return RelevanceMap(per_layer=per_layer, aggregate=aggregate, l_start=l_start)


def token_attributions(rel: RelevanceMap, z: int) -> np.ndarray:
    """The EOS row of the aggregate map; pad positions past z carry nothing."""
    n = rel.aggregate.shape[0]
    if not 0 <= z < n:
        raise InputError(f"EOS index {z} out of range for n={n}")
    row = rel.aggregate[z].copy()
    row[z + 1 :] = 0.0
    return row
