"""Independent float64 reference implementations used to freeze expected values.

Nothing here imports the package's model, autodiff or trainer code; the only
shared facts are the canonical tensor names and the weight layout
(fan_in, fan_out).
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-6


def rms(x, g):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + EPS) * g


def gelu_tanh(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def rotate(x, pos, base):
    """x: (T, dh); rotate pair (2i, 2i+1) by pos * base^(-2i/dh)."""
    T, dh = x.shape
    out = np.empty_like(x)
    for t in range(T):
        for i in range(dh // 2):
            ang = pos[t] * base ** (-2.0 * i / dh)
            c, s = math.cos(ang), math.sin(ang)
            a, b = x[t, 2 * i], x[t, 2 * i + 1]
            out[t, 2 * i] = a * c - b * s
            out[t, 2 * i + 1] = a * s + b * c
    return out


def attention(W, pre, xq, xkv, cfg, causal, rope, q_pos, kv_pos):
    """Per-head loop, query head h reads kv head h // (q_heads / kv_heads)."""
    H, KV, dh = cfg["q_heads"], cfg["kv_heads"], cfg["d_head"]
    G = H // KV
    q = xq @ W[pre + ".q"]
    k = xkv @ W[pre + ".k"]
    v = xkv @ W[pre + ".v"]
    heads = []
    for h in range(H):
        qh = q[:, h * dh : (h + 1) * dh]
        j = h // G
        kh = k[:, j * dh : (j + 1) * dh]
        vh = v[:, j * dh : (j + 1) * dh]
        if rope:
            qh = rotate(qh, q_pos, cfg["rope_base"])
            kh = rotate(kh, kv_pos, cfg["rope_base"])
        s = qh @ kh.T / math.sqrt(dh)
        if causal:
            s = np.where(np.asarray(kv_pos)[None, :] <= np.asarray(q_pos)[:, None], s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        heads.append(p @ vh)
    return np.concatenate(heads, axis=-1) @ W[pre + ".o"]


def block(W, pre, x, cfg, causal, enc=None):
    T = x.shape[0]
    pos = np.arange(T)
    h = rms(x, W[pre + ".norm.pre_attn"])
    x = x + rms(attention(W, pre + ".attn", h, h, cfg, causal, True, pos, pos), W[pre + ".norm.post_attn"])
    if enc is not None:
        h = rms(x, W[pre + ".xattn.norm_pre"])
        a = attention(W, pre + ".xattn", h, enc, cfg, False, False, pos, np.arange(enc.shape[0]))
        x = x + rms(a, W[pre + ".xattn.norm_post"])
    h = rms(x, W[pre + ".norm.pre_ffn"])
    f = (gelu_tanh(h @ W[pre + ".ffn.gate"]) * (h @ W[pre + ".ffn.up"])) @ W[pre + ".ffn.down"]
    return x + rms(f, W[pre + ".norm.post_ffn"])


def stack(W, prefix, x, cfg, causal, enc=None):
    for i in range(cfg["num_layers"]):
        x = block(W, f"{prefix}.{i}", x, cfg, causal, enc)
    return rms(x, W[f"{prefix}.final_norm"])


def _w64(tensors):
    return {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}


def decoder_only_logits(tensors, cfg, tokens):
    W = _w64(tensors)
    x = W["emb.tok"][np.asarray(tokens)] * math.sqrt(cfg["d_model"])
    return stack(W, "dec", x, cfg, True) @ W["emb.tok"].T


def decoder_only_hidden(tensors, cfg, tokens):
    W = _w64(tensors)
    x = W["emb.tok"][np.asarray(tokens)] * math.sqrt(cfg["d_model"])
    return stack(W, "dec", x, cfg, True)


def encdec_logits(tensors, enc_cfg, dec_cfg, inp, tgt, shared=True, encoder_causal=False):
    W = _w64(tensors)
    table = W["emb.tok"] if shared else W["enc.emb.tok"]
    enc = stack(W, "enc", table[np.asarray(inp)] * math.sqrt(enc_cfg["d_model"]), enc_cfg, encoder_causal)
    x = W["emb.tok"][np.asarray(tgt)] * math.sqrt(dec_cfg["d_model"])
    return stack(W, "dec", x, dec_cfg, True, enc) @ W["emb.tok"].T


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dense_kl(teacher_probs, student_logits):
    """Mean over positions of sum_v p_T (log p_T - log p_S)."""
    p = np.asarray(teacher_probs, dtype=np.float64)
    lq = log_softmax(student_logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - lq), 0.0)
    return float(terms.sum(axis=-1).mean())


def adamw_reference(p, grads, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.1):
    """Plain float64 loop for a sequence of gradients at constant lr."""
    p = np.asarray(p, dtype=np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        upd = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        if p.ndim >= 2:
            upd = upd + wd * p
        p = p - lr * upd
    return p


def layer_params(d, dffn, H, KV, dh):
    """One decoder-only block: q, k, v, o, gated FFN (branch width dffn/2), four norms."""
    attn = d * H * dh + 2 * d * KV * dh + H * dh * d
    ffn = 3 * d * (dffn // 2)
    return attn + ffn + 4 * d


def xattn_params(d_dec, d_enc, H, KV, dh):
    return d_dec * H * dh + 2 * d_enc * KV * dh + H * dh * d_dec + 2 * d_dec
