"""Independent straight-line re-implementation of both encoder forwards.

Deliberately naive: explicit loops over positions, heads and patches, scalar
activation math, softmax over the causally allowed prefix only.  Operates on
the raw named-tensor dict so it shares no code with the package's forward.
"""

import math

import numpy as np


def _ln(x, w, b):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return (x - mu) / math.sqrt(var + 1e-5) * w + b


def _gelu_scalar(v, kind):
    if kind == "quick-gelu":
        return v / (1.0 + math.exp(-1.702 * v))
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _block(x, w, prefix, heads, causal, act):
    n, d = x.shape
    dh = d // heads
    h1 = np.stack([_ln(x[i], w[f"{prefix}.ln_1.weight"], w[f"{prefix}.ln_1.bias"]) for i in range(n)])
    qkv = np.stack([w[f"{prefix}.attn.in_proj.weight"] @ h1[i] + w[f"{prefix}.attn.in_proj.bias"] for i in range(n)])
    attn_cat = np.zeros((n, d), dtype=x.dtype)
    for head in range(heads):
        lo, hi = head * dh, (head + 1) * dh
        q = qkv[:, lo:hi]
        k = qkv[:, d + lo : d + hi]
        v = qkv[:, 2 * d + lo : 2 * d + hi]
        for i in range(n):
            limit = i + 1 if causal else n
            scores = [float(np.dot(q[i], k[j])) / math.sqrt(dh) for j in range(limit)]
            mx = max(scores)
            exps = [math.exp(s - mx) for s in scores]
            total = sum(exps)
            for j in range(limit):
                attn_cat[i, lo:hi] += (exps[j] / total) * v[j]
    attn_out = np.stack([w[f"{prefix}.attn.out_proj.weight"] @ attn_cat[i] + w[f"{prefix}.attn.out_proj.bias"] for i in range(n)])
    x = x + attn_out
    h2 = np.stack([_ln(x[i], w[f"{prefix}.ln_2.weight"], w[f"{prefix}.ln_2.bias"]) for i in range(n)])
    mlp = np.zeros_like(x)
    for i in range(n):
        u = w[f"{prefix}.mlp.fc.weight"] @ h2[i] + w[f"{prefix}.mlp.fc.bias"]
        g = np.array([_gelu_scalar(float(v), act) for v in u], dtype=x.dtype)
        mlp[i] = w[f"{prefix}.mlp.proj.weight"] @ g + w[f"{prefix}.mlp.proj.bias"]
    return x + mlp


def naive_encode_text(weights, config, ids, z):
    n = config.context_length
    x = np.stack([weights["text.token_embedding"][ids[i]] + weights["text.positional_embedding"][i] for i in range(n)])
    for layer in range(config.text_layers):
        x = _block(x, weights, f"text.blocks.{layer}", config.text_heads, True, config.activation)
    xf_z = _ln(x[z], weights["text.ln_final.weight"], weights["text.ln_final.bias"])
    return weights["text.projection"].T @ xf_z


def naive_encode_image(weights, config, pixels):
    p = config.patch_size
    g = config.image_resolution // p
    kernel = weights["vision.patch_embedding"]
    dv = kernel.shape[0]
    rows = [weights["vision.class_embedding"].copy()]
    for gy in range(g):
        for gx in range(g):
            out = np.zeros(dv, dtype=pixels.dtype)
            for o in range(dv):
                acc = 0.0
                for c in range(3):
                    for py in range(p):
                        for px in range(p):
                            acc += kernel[o, c, py, px] * pixels[c, gy * p + py, gx * p + px]
                out[o] = acc
            rows.append(out)
    x = np.stack(rows) + weights["vision.positional_embedding"]
    x = np.stack([_ln(x[i], weights["vision.ln_pre.weight"], weights["vision.ln_pre.bias"]) for i in range(len(x))])
    for layer in range(config.vision_layers):
        x = _block(x, weights, f"vision.blocks.{layer}", config.vision_heads, False, config.activation)
    cls = _ln(x[0], weights["vision.ln_post.weight"], weights["vision.ln_post.bias"])
    return weights["vision.projection"].T @ cls


def naive_score(e_v, e_t):
    nv = math.sqrt(sum(float(v) ** 2 for v in e_v))
    nt = math.sqrt(sum(float(v) ** 2 for v in e_t))
    return sum(float(a) * float(b) for a, b in zip(e_v, e_t)) / (nv * nt)
