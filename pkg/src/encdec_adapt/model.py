"""Decoder-only and encoder-decoder transformers over a checkpoint's tensors.

Block layout (both stacks)::

    x = x + post_attn_norm(self_attn(pre_attn_norm(x)))
    x = x + xattn.norm_post(cross_attn(xattn.norm_pre(x), enc))   # decoder of enc-dec only
    x = x + post_ffn_norm(down(gelu(x @ gate) * (x @ up)))

Token embeddings are scaled by sqrt(d_model); the output projection is tied to
``emb.tok``. RoPE is applied in self-attention only; cross-attention has no
positional rotation. Encoder and decoder positions each start at 0.

All functions here take ``params``: a mapping from canonical name to Tensor.
The ``*_forward`` helpers accept a :class:`NamedCheckpoint` for inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import NamedCheckpoint, expected_shapes, is_xattn
from .config import ArchKind, ArchSpec, MaskKind, ModelConfig
from .errors import ConfigError, ContractError, InputError

NORM_EPS = 1e-6
Params = Mapping[str, Tensor]


def as_params(ckpt: NamedCheckpoint | Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    tensors = ckpt.tensors if isinstance(ckpt, NamedCheckpoint) else ckpt
    out = {}
    for name, arr in tensors.items():
        t = Tensor._wrap(arr)
        t.requires_grad = requires_grad
        t.name = name
        out[name] = t
    return out


# ---------------------------------------------------------------------------
# rotary embedding


def rope_tables(positions: np.ndarray, d_head: int, base: float, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of shape (T, d_head/2) for angle pos * base^(-2i/d_head)."""
    if d_head % 2:
        raise ConfigError(f"RoPE needs an even head dimension, got {d_head}")
    pos = np.asarray(positions, dtype=np.int64)
    key = (pos.tobytes(), d_head, float(base), np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        ang = pos.astype(np.float64)[:, None] * inv_freq[None, :]
        hit = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        for a in hit:
            a.flags.writeable = False
        if len(_ROPE_CACHE) > 256:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def rope_apply(x: Tensor, positions: np.ndarray, rope_base: float) -> Tensor:
    """Rotate per-head activations laid out ``(..., T, heads, d_head)``."""
    d_head = x.shape[-1]
    cos, sin = rope_tables(positions, d_head, rope_base, x.dtype)
    if len(positions) != x.shape[-3]:
        raise ContractError(f"{len(positions)} positions for sequence axis of length {x.shape[-3]}")
    return ad.rope(x, cos[:, None, :], sin[:, None, :])


# ---------------------------------------------------------------------------
# attention


def causal_allowed(q_pos: np.ndarray, kv_pos: np.ndarray) -> np.ndarray:
    return np.asarray(kv_pos)[None, :] <= np.asarray(q_pos)[:, None]


def attend(q: Tensor, k: Tensor, v: Tensor, cfg: ModelConfig, allowed: np.ndarray | None) -> Tensor:
    """Grouped scaled dot-product attention.

    Args:
        q: (B, Tq, q_heads, d_head)
        k, v: (B, kv_heads, Tk, d_head)
        allowed: bool mask broadcastable to (B, 1, Tq, Tk), or None for all pairs.

    Query head ``h`` reads kv head ``h // group_size``. Query heads of a group are
    folded into the row axis so no kv replication is materialized.
    """
    B, Tq, H, dh = q.shape
    KV, G = cfg.kv_heads, cfg.group_size
    Tk = k.shape[2]
    if Tk == 0:
        raise ContractError("attention over an empty key/value sequence")
    qg = ad.reshape(ad.transpose(ad.reshape(q, (B, Tq, KV, G, dh)), (0, 2, 3, 1, 4)), (B, KV, G * Tq, dh))
    scores = ad.scale(ad.matmul(qg, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        lead = allowed.shape[:-2]
        mask = np.broadcast_to(allowed[..., None, :, :], lead + (G, Tq, Tk)).reshape(lead + (G * Tq, Tk))
    probs = ad.softmax(scores, mask)
    out = ad.matmul(probs, v)
    out = ad.transpose(ad.reshape(out, (B, KV, G, Tq, dh)), (0, 3, 1, 2, 4))
    return ad.reshape(out, (B, Tq, H * dh))


def _project_kv(P: Params, prefix: str, x_kv: Tensor, cfg: ModelConfig, positions: np.ndarray | None) -> tuple[Tensor, Tensor]:
    B, Tk, _ = x_kv.shape
    k = ad.reshape(ad.matmul(x_kv, P[f"{prefix}.k"]), (B, Tk, cfg.kv_heads, cfg.d_head))
    v = ad.reshape(ad.matmul(x_kv, P[f"{prefix}.v"]), (B, Tk, cfg.kv_heads, cfg.d_head))
    if positions is not None:
        k = rope_apply(k, positions, cfg.rope_base)
    return ad.transpose(k, (0, 2, 1, 3)), ad.transpose(v, (0, 2, 1, 3))


def attention(
    P: Params,
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor | None,
    mask: MaskKind,
    cfg: ModelConfig,
    *,
    q_positions: np.ndarray | None = None,
    kv_valid: np.ndarray | None = None,
    use_rope: bool = True,
    cache: dict | None = None,
) -> Tensor:
    """Multi-/grouped-query attention with projections ``{prefix}.{q,k,v,o}``.

    ``x_kv`` of None means self-attention. With ``cache`` (a dict), self-attention
    appends this call's keys/values to ``cache["k"]``/``cache["v"]``; for
    cross-attention (``use_rope=False``) the projected encoder keys/values are
    computed on the first call and reused afterwards.
    ``kv_valid`` is a (B, Tk) bool mask of unpadded key positions.
    """
    B, Tq, _ = x_q.shape
    q_pos = np.arange(Tq) if q_positions is None else np.asarray(q_positions)
    q = ad.reshape(ad.matmul(x_q, P[f"{prefix}.q"]), (B, Tq, cfg.q_heads, cfg.d_head))
    if use_rope:
        q = rope_apply(q, q_pos, cfg.rope_base)

    if x_kv is None:
        k, v = _project_kv(P, prefix, x_q, cfg, q_pos if use_rope else None)
        kv_pos = q_pos
        if cache is not None:
            if "k" in cache:
                k = ad.concat([cache["k"], k], axis=2)
                v = ad.concat([cache["v"], v], axis=2)
                kv_pos = np.concatenate([cache["pos"], q_pos])
            cache["k"], cache["v"], cache["pos"] = k, v, kv_pos
    elif cache is not None and "k" in cache:
        k, v, kv_pos = cache["k"], cache["v"], cache["pos"]
    else:
        if x_kv.shape[1] == 0:
            raise ContractError("attention over an empty key/value sequence")
        k, v = _project_kv(P, prefix, x_kv, cfg, None)
        kv_pos = np.arange(x_kv.shape[1])
        if cache is not None:
            cache["k"], cache["v"], cache["pos"] = k, v, kv_pos

    allowed = None
    if MaskKind(mask) is MaskKind.CAUSAL:
        allowed = causal_allowed(q_pos, kv_pos)
    if kv_valid is not None:
        kv_mask = np.asarray(kv_valid, dtype=bool)[:, None, None, :]
        allowed = kv_mask if allowed is None else (allowed[None, None] & kv_mask)
    elif allowed is not None:
        allowed = allowed[None, None]
    out = attend(q, k, v, cfg, allowed)
    return ad.matmul(out, P[f"{prefix}.o"])


# ---------------------------------------------------------------------------
# blocks and stacks


def ffn(P: Params, prefix: str, x: Tensor) -> Tensor:
    gate = ad.gelu(ad.matmul(x, P[f"{prefix}.gate"]))
    up = ad.matmul(x, P[f"{prefix}.up"])
    return ad.matmul(ad.mul(gate, up), P[f"{prefix}.down"])


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, Tk, d_enc), after the encoder final norm
    valid: np.ndarray | None  # (B, Tk) bool


@dataclass
class KVCache:
    """Per-layer decoder self-attention keys/values plus fixed cross-attention keys/values."""

    self_kv: dict[int, dict] = field(default_factory=dict)
    cross_kv: dict[int, dict] = field(default_factory=dict)

    @property
    def length(self) -> int:
        if not self.self_kv:
            return 0
        return int(self.self_kv[0]["k"].shape[2])


def block(
    P: Params,
    prefix: str,
    x: Tensor,
    cfg: ModelConfig,
    mask: MaskKind,
    positions: np.ndarray,
    valid: np.ndarray | None,
    enc: EncoderOutput | None = None,
    cache: KVCache | None = None,
    layer: int = 0,
) -> Tensor:
    self_cache = None if cache is None else cache.self_kv.setdefault(layer, {})
    h = ad.rmsnorm(x, P[f"{prefix}.norm.pre_attn"], NORM_EPS)
    a = attention(P, f"{prefix}.attn", h, None, mask, cfg, q_positions=positions, kv_valid=None if cache else valid, cache=self_cache)
    x = ad.add(x, ad.rmsnorm(a, P[f"{prefix}.norm.post_attn"], NORM_EPS))
    if enc is not None:
        cross_cache = None if cache is None else cache.cross_kv.setdefault(layer, {})
        h = ad.rmsnorm(x, P[f"{prefix}.xattn.norm_pre"], NORM_EPS)
        a = attention(
            P, f"{prefix}.xattn", h, enc.hidden, MaskKind.BIDIRECTIONAL, cfg,
            q_positions=positions, kv_valid=enc.valid, use_rope=False, cache=cross_cache,
        )
        x = ad.add(x, ad.rmsnorm(a, P[f"{prefix}.xattn.norm_post"], NORM_EPS))
    h = ad.rmsnorm(x, P[f"{prefix}.norm.pre_ffn"], NORM_EPS)
    return ad.add(x, ad.rmsnorm(ffn(P, f"{prefix}.ffn", h), P[f"{prefix}.norm.post_ffn"], NORM_EPS))


def embed(P: Params, table: str, tokens: np.ndarray, d_model: int) -> Tensor:
    return ad.scale(ad.embedding(P[table], tokens), np.sqrt(d_model))


def run_stack(
    P: Params,
    prefix: str,
    x: Tensor,
    cfg: ModelConfig,
    mask: MaskKind,
    positions: np.ndarray,
    valid: np.ndarray | None,
    enc: EncoderOutput | None = None,
    cache: KVCache | None = None,
) -> Tensor:
    """All blocks then the final norm; a zero-layer stack passes ``x`` through."""
    if cfg.num_layers == 0:
        return x
    for i in range(cfg.num_layers):
        x = block(P, f"{prefix}.{i}", x, cfg, mask, positions, valid, enc, cache, i)
    return ad.rmsnorm(x, P[f"{prefix}.final_norm"], NORM_EPS)


def output_logits(P: Params, hidden: Tensor) -> Tensor:
    return ad.matmul(hidden, ad.transpose(P["emb.tok"], (1, 0)))


def _valid_from_lengths(lengths: np.ndarray | None, T: int) -> np.ndarray | None:
    if lengths is None:
        return None
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def decoder_hidden(
    P: Params,
    cfg: ModelConfig,
    tokens: np.ndarray,
    lengths: np.ndarray | None = None,
    cache: KVCache | None = None,
    start: int = 0,
) -> Tensor:
    """Final-norm hidden states of a decoder-only model, (B, T, d_model)."""
    tokens = np.asarray(tokens)
    T = tokens.shape[1]
    x = embed(P, "emb.tok", tokens, cfg.d_model)
    positions = np.arange(start, start + T)
    return run_stack(P, "dec", x, cfg, MaskKind.CAUSAL, positions, _valid_from_lengths(lengths, T), cache=cache)


def encode(
    P: Params,
    arch: ArchSpec,
    tokens: np.ndarray,
    lengths: np.ndarray | None = None,
    encoder_mask: MaskKind | None = None,
) -> EncoderOutput:
    enc_cfg = arch.encoder
    assert enc_cfg is not None
    tokens = np.asarray(tokens)
    T = tokens.shape[1]
    table = "emb.tok" if arch.shared_embeddings else "enc.emb.tok"
    x = embed(P, table, tokens, enc_cfg.d_model)
    valid = _valid_from_lengths(lengths, T)
    mask = arch.encoder_mask if encoder_mask is None else MaskKind(encoder_mask)
    h = run_stack(P, "enc", x, enc_cfg, mask, np.arange(T), valid)
    return EncoderOutput(h, valid)


def decode_hidden(
    P: Params,
    arch: ArchSpec,
    dec_tokens: np.ndarray,
    enc: EncoderOutput,
    lengths: np.ndarray | None = None,
    cache: KVCache | None = None,
    start: int = 0,
) -> Tensor:
    cfg = arch.decoder
    dec_tokens = np.asarray(dec_tokens)
    T = dec_tokens.shape[1]
    x = embed(P, "emb.tok", dec_tokens, cfg.d_model)
    positions = np.arange(start, start + T)
    return run_stack(P, "dec", x, cfg, MaskKind.CAUSAL, positions, _valid_from_lengths(lengths, T), enc, cache)


# ---------------------------------------------------------------------------
# checkpoint-level inference entry points


def check_tokens(tokens: np.ndarray, cfg: ModelConfig, what: str = "tokens") -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.dtype.kind not in "iu":
        raise InputError(f"{what} must be integer token ids")
    if arr.size == 0 or arr.shape[-1] == 0:
        raise InputError(f"{what} is empty")
    if arr.min() < 0 or arr.max() >= cfg.vocab_size:
        raise InputError(f"{what} has ids outside [0, {cfg.vocab_size})")
    if arr.shape[-1] > cfg.max_seq:
        raise InputError(f"{what} length {arr.shape[-1]} exceeds max_seq {cfg.max_seq}")
    return arr.astype(np.int64)


def _batched(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    if tokens.ndim == 1:
        return tokens[None, :], True
    return tokens, False


def decoder_only_hidden(ckpt: NamedCheckpoint, tokens: np.ndarray) -> np.ndarray:
    if ckpt.arch.kind is not ArchKind.DECODER_ONLY:
        raise ConfigError("decoder_only_hidden needs a decoder-only checkpoint")
    toks, single = _batched(check_tokens(tokens, ckpt.arch.decoder))
    h = decoder_hidden(as_params(ckpt), ckpt.arch.decoder, toks).data
    return h[0] if single else h


def decoder_only_forward(ckpt: NamedCheckpoint, tokens: np.ndarray) -> np.ndarray:
    """Next-token logits, (T, vocab) for a 1-D sequence or (B, T, vocab) for a batch."""
    if ckpt.arch.kind is not ArchKind.DECODER_ONLY:
        raise ConfigError("decoder_only_forward needs a decoder-only checkpoint")
    toks, single = _batched(check_tokens(tokens, ckpt.arch.decoder))
    P = as_params(ckpt)
    logits = output_logits(P, decoder_hidden(P, ckpt.arch.decoder, toks)).data
    return logits[0] if single else logits


def encoder_hidden(ckpt: NamedCheckpoint, input_tokens: np.ndarray, encoder_mask: MaskKind | None = None) -> np.ndarray:
    arch = ckpt.arch
    if not arch.is_encdec:
        raise ConfigError("encoder_hidden needs an encoder-decoder checkpoint")
    toks, single = _batched(check_tokens(input_tokens, arch.encoder, "input_tokens"))
    h = encode(as_params(ckpt), arch, toks, encoder_mask=encoder_mask).hidden.data
    return h[0] if single else h


def encdec_forward(
    ckpt: NamedCheckpoint,
    input_tokens: np.ndarray,
    target_tokens: np.ndarray,
    encoder_mask: MaskKind | None = None,
) -> np.ndarray:
    """Decoder logits, (T_out, vocab) or (B, T_out, vocab).

    ``target_tokens`` is what the decoder reads (already shifted by the caller,
    e.g. ``[BOS] + target[:-1]`` for teacher forcing); row ``t`` predicts the
    token after ``target_tokens[t]``.
    """
    arch = ckpt.arch
    if not arch.is_encdec:
        raise ConfigError("encdec_forward needs an encoder-decoder checkpoint")
    inp, single = _batched(check_tokens(input_tokens, arch.encoder, "input_tokens"))
    tgt, _ = _batched(check_tokens(target_tokens, arch.decoder, "target_tokens"))
    P = as_params(ckpt)
    enc = encode(P, arch, inp, encoder_mask=encoder_mask)
    logits = output_logits(P, decode_hidden(P, arch, tgt, enc)).data
    return logits[0] if single else logits


# ---------------------------------------------------------------------------
# parameter accounting

CONVENTIONS = ("exclude-embeddings", "include-embeddings", "exclude-embeddings-and-cross-attention")


def count_params(arch: ArchSpec, convention: str = "exclude-embeddings") -> dict[str, int]:
    """Per-component parameter counts and the total under ``convention``.

    Components: ``encoder`` (encoder stack incl. its final norm), ``decoder``
    (decoder self-attention, FFN and norms), ``cross_attention`` (xattn
    projections and their norms), ``embedding`` (token tables).
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")
    parts = {"encoder": 0, "decoder": 0, "cross_attention": 0, "embedding": 0}
    for name, shape in expected_shapes(arch).items():
        n = int(np.prod(shape))
        if name.endswith("emb.tok"):
            parts["embedding"] += n
        elif is_xattn(name):
            parts["cross_attention"] += n
        elif name.startswith("enc."):
            parts["encoder"] += n
        else:
            parts["decoder"] += n
    total = parts["encoder"] + parts["decoder"]
    if convention != "exclude-embeddings-and-cross-attention":
        total += parts["cross_attention"]
    if convention == "include-embeddings":
        total += parts["embedding"]
    return {**parts, "total": total}
