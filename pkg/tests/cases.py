"""Random grad-check cases for every registered primitive and for whole models."""

from __future__ import annotations

import numpy as np

from encdec_adapt import autodiff as ad
from encdec_adapt.checkpoint import init_checkpoint
from encdec_adapt.config import ArchSpec, ModelConfig
from encdec_adapt.model import decode_hidden, decoder_hidden, encode, output_logits, rope_tables
from encdec_adapt.surgery import adapt_balanced
from encdec_adapt.trainer import ce_loss

# Smallest configs that still exercise GQA, RoPE, both norms and the gated FFN.
GC_DECODER = ModelConfig(2, 8, 8, 2, 1, 4, vocab_size=11, max_seq=16)
GC_ENCDEC = ModelConfig(1, 8, 8, 2, 1, 4, vocab_size=11, max_seq=16)


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    w = ad.Tensor(rng.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, w))


def primitive_case(kind: str, rng: np.random.Generator):
    """(function, inputs) whose scalar output depends on ``kind`` non-trivially."""
    n = rng.standard_normal
    if kind == "matmul":
        if rng.random() < 0.5:
            return (lambda a, b: _weighted(ad.matmul(a, b), np.random.default_rng(0))), [n((2, 3, 4)), n((4, 5))]
        return (lambda a, b: _weighted(ad.matmul(a, b), np.random.default_rng(0))), [n((2, 3, 4)), n((2, 4, 2))]
    if kind in ("add", "mul"):
        op = getattr(ad, kind)
        shapes = [(3, 4), (3, 4)] if rng.random() < 0.5 else [(2, 3, 4), (3, 4)]
        return (lambda a, b: _weighted(op(a, b), np.random.default_rng(0))), [n(s) for s in shapes]
    if kind == "scale":
        c = float(n())
        return (lambda x: _weighted(ad.scale(x, c), np.random.default_rng(0))), [n((3, 4))]
    if kind == "softmax":
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        m = mask if rng.random() < 0.5 else None
        return (lambda x: _weighted(ad.softmax(x, m), np.random.default_rng(0))), [n((3, 5))]
    if kind == "log_softmax":
        return (lambda x: _weighted(ad.log_softmax(x), np.random.default_rng(0))), [n((3, 5))]
    if kind == "rmsnorm":
        return (lambda x, g: _weighted(ad.rmsnorm(x, g), np.random.default_rng(0))), [n((3, 6)), 1.0 + 0.1 * n(6)]
    if kind == "gelu":
        return (lambda x: _weighted(ad.gelu(x), np.random.default_rng(0))), [2.0 * n((3, 5))]
    if kind == "embedding":
        ids = rng.integers(0, 6, size=(2, 4))
        return (lambda t: _weighted(ad.embedding(t, ids), np.random.default_rng(0))), [n((6, 3))]
    if kind == "transpose":
        return (lambda x: _weighted(ad.transpose(x, (2, 0, 1)), np.random.default_rng(0))), [n((2, 3, 4))]
    if kind == "reshape":
        return (lambda x: _weighted(ad.reshape(x, (4, 6)), np.random.default_rng(0))), [n((2, 3, 4))]
    if kind == "sum":
        return (lambda x: _weighted(ad.sum_(x, axis=1), np.random.default_rng(0))), [n((3, 4, 2))]
    if kind == "mean":
        return (lambda x: _weighted(ad.mean(x, axis=-1, keepdims=True), np.random.default_rng(0))), [n((3, 4))]
    if kind == "log":
        return (lambda x: _weighted(ad.log(x), np.random.default_rng(0))), [rng.uniform(0.5, 2.0, (3, 4))]
    if kind == "exp":
        return (lambda x: _weighted(ad.exp(x), np.random.default_rng(0))), [n((3, 4))]
    if kind == "concat":
        return (lambda a, b: _weighted(ad.concat([a, b], axis=1), np.random.default_rng(0))), [n((2, 3)), n((2, 2))]
    if kind == "slice":
        return (lambda x: _weighted(ad.slice_(x, (slice(None), slice(1, 3))), np.random.default_rng(0))), [n((3, 4))]
    if kind == "gather":
        idx = rng.integers(0, 5, size=(3, 2))
        return (lambda x: _weighted(ad.gather(x, idx), np.random.default_rng(0))), [n((3, 5))]
    if kind == "rope":
        cos, sin = rope_tables(np.arange(3), 4, 10000.0, np.float64)
        return (lambda x: _weighted(ad.rope(x, cos[:, None, :], sin[:, None, :]), np.random.default_rng(0))), [n((2, 3, 2, 4))]
    raise KeyError(kind)


def decoder_loss_case(seed: int):
    ck = init_checkpoint(ArchSpec.decoder_only(GC_DECODER), seed=seed)
    names = list(ck.tensors)
    rng = np.random.default_rng(seed)
    # Distinct tokens: identical ones make every layer-0 value row equal, so
    # the q/k gradients vanish and the relative error would measure roundoff.
    toks = rng.choice(11, size=(1, 4), replace=False)
    tgt = rng.integers(0, 11, size=(1, 4))

    def f(*ts):
        P = dict(zip(names, ts))
        return ce_loss(output_logits(P, decoder_hidden(P, GC_DECODER, toks)), tgt)

    return f, [ck[n] for n in names]


def encdec_loss_case(seed: int):
    ck = adapt_balanced(init_checkpoint(ArchSpec.decoder_only(GC_ENCDEC), seed=seed))
    # Break the balanced symmetry so cross-attention gradients are generic.
    rng = np.random.default_rng(seed)
    tensors = {k: (v + 0.1 * rng.standard_normal(v.shape)).astype(np.float32) if ".xattn." in k and v.ndim == 2 else v
               for k, v in ck.tensors.items()}
    ck = ck.replace(tensors)
    names = list(ck.tensors)
    inp = rng.choice(11, size=(1, 4), replace=False)
    dec = rng.choice(11, size=(1, 3), replace=False)
    tgt = rng.integers(0, 11, size=(1, 3))

    def f(*ts):
        P = dict(zip(names, ts))
        enc = encode(P, ck.arch, inp)
        return ce_loss(output_logits(P, decode_hidden(P, ck.arch, dec, enc)), tgt)

    return f, [ck[n] for n in names]
