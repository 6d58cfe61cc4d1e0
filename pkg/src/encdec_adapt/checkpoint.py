"""Named checkpoints: canonical tensor names, shape validation, and initialization.

Canonical scheme::

    emb.tok                                   (vocab, d_model of decoder)
    enc.emb.tok                               only when embeddings are not shared
    {enc|dec}.{i}.attn.{q|k|v|o}
    {enc|dec}.{i}.ffn.{gate|up|down}
    {enc|dec}.{i}.norm.{pre_attn|post_attn|pre_ffn|post_ffn}
    {enc|dec}.final_norm
    dec.{i}.xattn.{q|k|v|o}                   encoder-decoder only
    dec.{i}.xattn.{norm_pre|norm_post}        encoder-decoder only

Projection matrices are stored ``(fan_in, fan_out)`` and applied as ``x @ W``.
Decoder-only checkpoints use the ``dec.*`` namespace.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .config import ArchSpec, Metadata, ModelConfig
from .errors import ValidationError

NORMS = ("pre_attn", "post_attn", "pre_ffn", "post_ffn")


def _stack_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.ffn_hidden
    out: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.num_layers):
        p = f"{prefix}.{i}"
        out[f"{p}.attn.q"] = (d, cfg.attn_width)
        out[f"{p}.attn.k"] = (d, cfg.kv_width)
        out[f"{p}.attn.v"] = (d, cfg.kv_width)
        out[f"{p}.attn.o"] = (cfg.attn_width, d)
        out[f"{p}.ffn.gate"] = (d, h)
        out[f"{p}.ffn.up"] = (d, h)
        out[f"{p}.ffn.down"] = (h, d)
        for n in NORMS:
            out[f"{p}.norm.{n}"] = (d,)
    if cfg.num_layers:
        # A zero-layer stack is the identity and owns no parameters.
        out[f"{prefix}.final_norm"] = (d,)
    return out


def xattn_shapes(layer: int, enc: ModelConfig, dec: ModelConfig) -> dict[str, tuple[int, ...]]:
    p = f"dec.{layer}.xattn"
    return {
        f"{p}.q": (dec.d_model, dec.attn_width),
        f"{p}.k": (enc.d_model, dec.kv_width),
        f"{p}.v": (enc.d_model, dec.kv_width),
        f"{p}.o": (dec.attn_width, dec.d_model),
        f"{p}.norm_pre": (dec.d_model,),
        f"{p}.norm_post": (dec.d_model,),
    }


def expected_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Every tensor the architecture reads, in a fixed canonical order."""
    dec = arch.decoder
    shapes: dict[str, tuple[int, ...]] = {"emb.tok": (dec.vocab_size, dec.d_model)}
    if not arch.is_encdec:
        shapes.update(_stack_shapes("dec", dec))
        return shapes
    enc = arch.encoder
    assert enc is not None
    if not arch.shared_embeddings:
        shapes["enc.emb.tok"] = (enc.vocab_size, enc.d_model)
    shapes.update(_stack_shapes("enc", enc))
    shapes.update(_stack_shapes("dec", dec))
    for i in range(dec.num_layers):
        shapes.update(xattn_shapes(i, enc, dec))
    return shapes


def is_xattn(name: str) -> bool:
    parts = name.split(".")
    return len(parts) >= 3 and parts[0] == "dec" and parts[2] == "xattn"


def is_norm(name: str) -> bool:
    return ".norm." in name or name.endswith("final_norm") or ".norm_" in name


@dataclass(frozen=True)
class NamedCheckpoint:
    """Immutable map from canonical name to float32 array plus metadata.

    Arrays handed to the constructor are flagged read-only in place.
    """

    tensors: Mapping[str, np.ndarray]
    meta: Metadata

    def __post_init__(self) -> None:
        fixed = {}
        for name, arr in self.tensors.items():
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
            arr.flags.writeable = False
            fixed[name] = arr
        object.__setattr__(self, "tensors", fixed)

    @property
    def arch(self) -> ArchSpec:
        return self.meta.arch

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, tensors: Mapping[str, np.ndarray] | None = None, **meta_kw) -> "NamedCheckpoint":
        """New checkpoint with some tensors and/or metadata fields swapped."""
        new_tensors = dict(self.tensors)
        if tensors:
            new_tensors.update(tensors)
        meta = Metadata(**{**self.meta.__dict__, **meta_kw})
        meta.parents = list(meta.parents)
        meta.extra = dict(meta.extra)
        return NamedCheckpoint(new_tensors, meta)

    def validate(self) -> None:
        validate(self.tensors, self.meta.arch)

    def num_params(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))


def validate(tensors: Mapping[str, np.ndarray], arch: ArchSpec) -> None:
    """Raise ValidationError unless names and shapes exactly match ``arch``."""
    expected = expected_shapes(arch)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        first = (missing or extra)[0]
        raise ValidationError(f"tensor names do not match architecture: missing={missing} extra={extra}", tensor=first)
    for name, shape in expected.items():
        got = tuple(tensors[name].shape)
        if got != shape:
            raise ValidationError(f"tensor {name!r} has shape {got}, expected {shape}", tensor=name)


def init_tensor(name: str, shape: tuple[int, ...], rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    if len(shape) == 1:
        return np.ones(shape, dtype=np.float32)
    if name.endswith("emb.tok"):
        std = 1.0 / np.sqrt(shape[1])
    else:
        std = scale / np.sqrt(shape[0])
    return (rng.standard_normal(shape) * std).astype(np.float32)


def init_checkpoint(arch: ArchSpec, seed: int = 0, objective: str = "none") -> NamedCheckpoint:
    """Random initialization: N(0, 1/fan_in) projections, N(0, 1/d_model) embeddings, unit norms."""
    rng = np.random.default_rng(seed)
    tensors = {name: init_tensor(name, shape, rng) for name, shape in expected_shapes(arch).items()}
    return NamedCheckpoint(tensors, Metadata(arch, objective=objective, extra={"init_seed": seed}))
