"""Checkpoint-to-checkpoint transformations.

None of these functions mutate their inputs: checkpoints hold read-only
arrays and every output tensor is a fresh array.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

from .checkpoint import NamedCheckpoint, expected_shapes, validate, xattn_shapes
from .config import ArchKind, ArchSpec, Metadata, ModelConfig
from .errors import ConfigError, SurgeryError, ValidationError


class Mode(str, enum.Enum):
    BALANCED = "balanced"
    UNBALANCED = "unbalanced"


@dataclass
class AdaptationPlan:
    encoder_source: NamedCheckpoint
    decoder_source: NamedCheckpoint
    mode: Mode = Mode.BALANCED
    warmup_steps_K: int = 0
    init_seed: int = 0
    cross_attn_init_scale: float = 1.0
    zero_init_xattn_o: bool = False

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.warmup_steps_K < 0:
            raise ConfigError("warmup_steps_K must be non-negative")
        if self.cross_attn_init_scale <= 0:
            raise ConfigError("cross_attn_init_scale must be positive")
        if self.mode is Mode.BALANCED and (
            self.encoder_source.arch.decoder != self.decoder_source.arch.decoder
        ):
            raise ConfigError("balanced adaptation needs identical encoder/decoder source configs")


def content_hash(ckpt: NamedCheckpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.tensors[name]).tobytes())
    return h.hexdigest()[:16]


def _require_decoder_only(ckpt: NamedCheckpoint, role: str) -> ModelConfig:
    if ckpt.arch.kind is not ArchKind.DECODER_ONLY:
        raise SurgeryError(f"{role} must be a decoder-only checkpoint")
    try:
        ckpt.validate()
    except ValidationError as e:
        raise SurgeryError(f"{role} failed validation: {e}") from e
    return ckpt.arch.decoder


def _finish(tensors: dict[str, np.ndarray], meta: Metadata) -> NamedCheckpoint:
    expected = expected_shapes(meta.arch)
    unmapped = sorted(set(expected) - set(tensors))
    if unmapped:
        raise SurgeryError(f"unmapped tensors: {unmapped}")
    try:
        validate(tensors, meta.arch)
    except ValidationError as e:
        raise SurgeryError(str(e)) from e
    ordered = {name: tensors[name] for name in expected}
    return NamedCheckpoint(ordered, meta)


def _copy_stack(src: NamedCheckpoint, dst_prefix: str, cfg: ModelConfig, out: dict[str, np.ndarray]) -> None:
    for name in expected_shapes(ArchSpec.decoder_only(cfg)):
        if name.startswith("dec."):
            out[dst_prefix + name[3:]] = np.array(src[name], copy=True)


def adapt_balanced(source: NamedCheckpoint, decoder_source: NamedCheckpoint | None = None) -> NamedCheckpoint:
    """Encoder-decoder initialization where every tensor has a source.

    The encoder and decoder stacks are copies of the source layers, and each
    decoder layer's cross-attention starts as a copy of that layer's
    self-attention (projections and both norms). The embedding table is copied
    once and shared. With a distinct ``decoder_source`` of identical config the
    decoder side (and cross-attention) comes from it and embeddings are not shared.
    """
    cfg = _require_decoder_only(source, "source")
    dec_src = source if decoder_source is None else decoder_source
    if _require_decoder_only(dec_src, "decoder_source") != cfg:
        raise SurgeryError("balanced adaptation needs identical configs")
    shared = dec_src is source
    arch = ArchSpec.encoder_decoder(cfg, cfg, shared_embeddings=shared)
    out: dict[str, np.ndarray] = {"emb.tok": np.array(dec_src["emb.tok"], copy=True)}
    if not shared:
        out["enc.emb.tok"] = np.array(source["emb.tok"], copy=True)
    _copy_stack(source, "enc", cfg, out)
    _copy_stack(dec_src, "dec", cfg, out)
    for i in range(cfg.num_layers):
        for p in "qkvo":
            out[f"dec.{i}.xattn.{p}"] = np.array(dec_src[f"dec.{i}.attn.{p}"], copy=True)
        out[f"dec.{i}.xattn.norm_pre"] = np.array(dec_src[f"dec.{i}.norm.pre_attn"], copy=True)
        out[f"dec.{i}.xattn.norm_post"] = np.array(dec_src[f"dec.{i}.norm.post_attn"], copy=True)
    parents = [content_hash(source)] + ([] if shared else [content_hash(dec_src)])
    meta = Metadata(arch, objective="adapt-balanced", step=0, warmup_steps_K=0, parents=parents)
    return _finish(out, meta)


def adapt_unbalanced(plan: AdaptationPlan) -> NamedCheckpoint:
    """Encoder from one source, decoder from another, cross-attention from scratch.

    Cross-attention projections are drawn from N(0, (scale / sqrt(fan_in))^2)
    with ``plan.init_seed``; its norms start at one. ``plan.warmup_steps_K`` is
    stored in the metadata for the trainer's freeze schedule.
    """
    enc_cfg = _require_decoder_only(plan.encoder_source, "encoder_source")
    dec_cfg = _require_decoder_only(plan.decoder_source, "decoder_source")
    if enc_cfg.vocab_size != dec_cfg.vocab_size:
        raise SurgeryError(f"vocab mismatch: encoder {enc_cfg.vocab_size} vs decoder {dec_cfg.vocab_size}")
    if dec_cfg.attn_width % dec_cfg.d_head or dec_cfg.attn_width != dec_cfg.q_heads * dec_cfg.d_head:
        raise SurgeryError("decoder q_heads * d_head does not give a well-shaped output projection")
    arch = ArchSpec.encoder_decoder(enc_cfg, dec_cfg, shared_embeddings=False)
    out: dict[str, np.ndarray] = {
        "emb.tok": np.array(plan.decoder_source["emb.tok"], copy=True),
        "enc.emb.tok": np.array(plan.encoder_source["emb.tok"], copy=True),
    }
    _copy_stack(plan.encoder_source, "enc", enc_cfg, out)
    _copy_stack(plan.decoder_source, "dec", dec_cfg, out)
    rng = np.random.default_rng(plan.init_seed)
    for i in range(dec_cfg.num_layers):
        for name, shape in xattn_shapes(i, enc_cfg, dec_cfg).items():
            if len(shape) == 1:
                out[name] = np.ones(shape, dtype=np.float32)
                continue
            std = plan.cross_attn_init_scale / np.sqrt(shape[0])
            w = (rng.standard_normal(shape) * std).astype(np.float32)
            if plan.zero_init_xattn_o and name.endswith(".o"):
                w = np.zeros(shape, dtype=np.float32)
            out[name] = w
    meta = Metadata(
        arch,
        objective="adapt-unbalanced",
        step=0,
        warmup_steps_K=plan.warmup_steps_K,
        parents=[content_hash(plan.encoder_source), content_hash(plan.decoder_source)],
        extra={"init_seed": plan.init_seed, "cross_attn_init_scale": plan.cross_attn_init_scale},
    )
    return _finish(out, meta)


def adapt(plan: AdaptationPlan) -> NamedCheckpoint:
    if plan.mode is Mode.BALANCED:
        dec = None if plan.decoder_source is plan.encoder_source else plan.decoder_source
        return adapt_balanced(plan.encoder_source, dec)
    return adapt_unbalanced(plan)


def _replicate_heads(w: np.ndarray, kv_heads: int, d_head: int, group: int) -> np.ndarray:
    fan_in = w.shape[0]
    return np.repeat(w.reshape(fan_in, kv_heads, d_head), group, axis=1).reshape(fan_in, kv_heads * group * d_head)


def expand_gqa_to_mha(ckpt: NamedCheckpoint, scope: str = "encoder") -> NamedCheckpoint:
    """Replicate each kv head's k/v columns so every query head has its own kv head.

    ``scope`` is ``"encoder"`` (encoder self-attention only) or ``"all"``
    (every stack; decoder cross-attention k/v follow the decoder layout).
    Stacks that are already multi-head are left alone, so the operation is
    idempotent.
    """
    if scope not in ("encoder", "all"):
        raise ConfigError(f"scope must be 'encoder' or 'all', got {scope!r}")
    arch = ckpt.arch
    updates: dict[str, np.ndarray] = {}
    new_enc, new_dec = arch.encoder, arch.decoder

    def expand(prefix: str, cfg: ModelConfig, kinds: tuple[str, ...]) -> ModelConfig:
        g = cfg.group_size
        for i in range(cfg.num_layers):
            for kind in kinds:
                for p in "kv":
                    name = f"{prefix}.{i}.{kind}.{p}"
                    updates[name] = _replicate_heads(ckpt[name], cfg.kv_heads, cfg.d_head, g)
        return cfg.replace(kv_heads=cfg.q_heads)

    if arch.is_encdec and arch.encoder.kv_heads != arch.encoder.q_heads:
        new_enc = expand("enc", arch.encoder, ("attn",))
    if scope == "all" and arch.decoder.kv_heads != arch.decoder.q_heads:
        kinds = ("attn", "xattn") if arch.is_encdec else ("attn",)
        new_dec = expand("dec", arch.decoder, kinds)
    if not updates:
        return ckpt
    new_arch = ArchSpec(arch.kind, new_dec, new_enc, arch.shared_embeddings, arch.encoder_mask)
    tensors = {name: updates.get(name, np.array(arr, copy=True)) for name, arr in ckpt.tensors.items()}
    meta = Metadata(
        new_arch, ckpt.meta.objective, ckpt.meta.step, ckpt.meta.warmup_steps_K,
        [content_hash(ckpt)], {**ckpt.meta.extra, "expanded_gqa": scope},
    )
    return _finish(tensors, meta)


def merge_uniform(ckpt_a: NamedCheckpoint, ckpt_b: NamedCheckpoint) -> NamedCheckpoint:
    """Elementwise mean of two checkpoints with identical names, shapes and architecture."""
    names_a, names_b = set(ckpt_a.tensors), set(ckpt_b.tensors)
    if names_a != names_b:
        raise SurgeryError(f"name sets differ: {sorted(names_a ^ names_b)}")
    if ckpt_a.arch != ckpt_b.arch:
        raise SurgeryError("checkpoints have different architectures")
    out = {}
    for name, a in ckpt_a.tensors.items():
        b = ckpt_b[name]
        if a.shape != b.shape:
            raise SurgeryError(f"tensor {name!r}: shapes {a.shape} and {b.shape} differ")
        out[name] = ((a.astype(np.float64) + b.astype(np.float64)) * 0.5).astype(np.float32)
    meta = Metadata(
        ckpt_a.arch,
        objective=f"merge({ckpt_a.meta.objective},{ckpt_b.meta.objective})",
        step=max(ckpt_a.meta.step, ckpt_b.meta.step),
        warmup_steps_K=0,
        parents=[content_hash(ckpt_a), content_hash(ckpt_b)],
    )
    return _finish(out, meta)
