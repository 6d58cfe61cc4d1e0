"""Architecture configuration, presets, and architecture descriptors."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from typing import Any

from .errors import ConfigError

# 256 bytes + PAD/BOS/EOS + 100 sentinels + 3 mode tokens; see data.Vocab.
DEFAULT_VOCAB = 362


@dataclass(frozen=True)
class ModelConfig:
    """Transformer stack hyperparameters.

    ``d_ffn`` is the combined width of the gate and up projections of the gated
    FFN, so each branch is ``d_ffn // 2`` wide. Under this convention the S
    preset has 14,696,960 parameters and 2B about 2.0B.
    """

    num_layers: int
    d_model: int
    d_ffn: int
    q_heads: int
    kv_heads: int
    d_head: int
    vocab_size: int = DEFAULT_VOCAB
    rope_base: float = 10000.0
    max_seq: int = 1024

    def __post_init__(self) -> None:
        for name in ("d_model", "d_ffn", "q_heads", "kv_heads", "d_head", "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be non-negative, got {self.num_layers}")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        if self.q_heads % self.kv_heads:
            raise ConfigError(
                f"q_heads ({self.q_heads}) must be a multiple of kv_heads ({self.kv_heads})"
            )
        if self.d_ffn % 2:
            raise ConfigError(f"d_ffn must be even (gate + up halves), got {self.d_ffn}")

    @property
    def ffn_hidden(self) -> int:
        return self.d_ffn // 2

    @property
    def attn_width(self) -> int:
        return self.q_heads * self.d_head

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.d_head

    @property
    def group_size(self) -> int:
        return self.q_heads // self.kv_heads

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw: Any) -> "ModelConfig":
        return replace(self, **kw)


# Full-size presets. 2B and 9B are kept for accounting only (see HUGE_PRESETS).
PRESETS: dict[str, ModelConfig] = {
    "2B": ModelConfig(26, 2304, 18432, 8, 4, 256, max_seq=8192),
    "9B": ModelConfig(42, 3584, 28672, 16, 8, 256, max_seq=8192),
    "S": ModelConfig(8, 512, 1024, 8, 8, 64, max_seq=8192),
    "B": ModelConfig(12, 768, 2048, 12, 12, 64, max_seq=8192),
    "L": ModelConfig(24, 1024, 2816, 16, 16, 64, max_seq=8192),
    "XL": ModelConfig(24, 2048, 5120, 32, 32, 64, max_seq=8192),
    # Reduced-width analogs that train in minutes on one CPU core.
    "toy": ModelConfig(2, 16, 32, 2, 1, 8, max_seq=256),
    "S-desk": ModelConfig(2, 64, 128, 4, 4, 16, max_seq=512),
    "B-desk": ModelConfig(3, 96, 192, 6, 6, 16, max_seq=512),
    "L-desk": ModelConfig(4, 128, 256, 8, 8, 16, max_seq=512),
}
FULL_PRESETS = ("S", "B", "L", "XL", "2B", "9B")
HUGE_PRESETS = frozenset({"2B", "9B"})


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class MaskKind(str, enum.Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"


class ArchKind(str, enum.Enum):
    DECODER_ONLY = "decoder_only"
    ENCODER_DECODER = "encoder_decoder"


@dataclass(frozen=True)
class ArchSpec:
    """Which stacks a checkpoint holds and how they are wired.

    For encoder-decoder models ``shared_embeddings`` means encoder and decoder
    read the single ``emb.tok`` table; otherwise the encoder owns
    ``enc.emb.tok``. ``encoder_mask`` is the encoder self-attention mask; it is
    a metadata switch, never a weight change.
    """

    kind: ArchKind
    decoder: ModelConfig
    encoder: ModelConfig | None = None
    shared_embeddings: bool = True
    encoder_mask: MaskKind = MaskKind.BIDIRECTIONAL

    def __post_init__(self) -> None:
        if self.kind is ArchKind.DECODER_ONLY:
            if self.encoder is not None:
                raise ConfigError("decoder-only architecture takes no encoder config")
            return
        if self.encoder is None:
            raise ConfigError("encoder-decoder architecture needs an encoder config")
        if self.encoder.vocab_size != self.decoder.vocab_size:
            raise ConfigError("encoder and decoder must share a vocabulary")
        if self.shared_embeddings and self.encoder.d_model != self.decoder.d_model:
            raise ConfigError("shared embeddings need equal encoder/decoder d_model")

    @classmethod
    def decoder_only(cls, cfg: ModelConfig) -> "ArchSpec":
        return cls(ArchKind.DECODER_ONLY, cfg)

    @classmethod
    def encoder_decoder(
        cls,
        encoder: ModelConfig,
        decoder: ModelConfig,
        shared_embeddings: bool | None = None,
        encoder_mask: MaskKind = MaskKind.BIDIRECTIONAL,
    ) -> "ArchSpec":
        if shared_embeddings is None:
            shared_embeddings = encoder.d_model == decoder.d_model
        return cls(ArchKind.ENCODER_DECODER, decoder, encoder, shared_embeddings, encoder_mask)

    @property
    def is_encdec(self) -> bool:
        return self.kind is ArchKind.ENCODER_DECODER

    @property
    def balanced(self) -> bool:
        return self.is_encdec and self.encoder == self.decoder

    def with_encoder_mask(self, mask: MaskKind) -> "ArchSpec":
        return replace(self, encoder_mask=MaskKind(mask))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "decoder": self.decoder.to_dict(),
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "shared_embeddings": self.shared_embeddings,
            "encoder_mask": self.encoder_mask.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchSpec":
        return cls(
            ArchKind(d["kind"]),
            ModelConfig.from_dict(d["decoder"]),
            None if d.get("encoder") is None else ModelConfig.from_dict(d["encoder"]),
            bool(d.get("shared_embeddings", True)),
            MaskKind(d.get("encoder_mask", MaskKind.BIDIRECTIONAL.value)),
        )


def arch_from_preset(name: str) -> ArchSpec:
    """Parse ``"S"`` (decoder-only) or ``"B-S"`` (encoder B, decoder S)."""
    if name in PRESETS:
        return ArchSpec.decoder_only(PRESETS[name])
    for split in range(1, len(name)):
        if name[split] != "-":
            continue
        enc, dec = name[:split], name[split + 1 :]
        if enc in PRESETS and dec in PRESETS:
            return ArchSpec.encoder_decoder(PRESETS[enc], PRESETS[dec])
    raise ConfigError(f"cannot parse preset {name!r}")


def preset_is_huge(name: str) -> bool:
    return any(part in HUGE_PRESETS for part in _preset_parts(name))


def _preset_parts(name: str) -> list[str]:
    if name in PRESETS:
        return [name]
    for split in range(1, len(name)):
        if name[split] == "-" and name[:split] in PRESETS and name[split + 1 :] in PRESETS:
            return [name[:split], name[split + 1 :]]
    return []


@dataclass
class Metadata:
    """Checkpoint metadata record."""

    arch: ArchSpec
    objective: str = "none"
    step: int = 0
    warmup_steps_K: int = 0
    parents: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "arch": self.arch.to_dict(),
            "objective": self.objective,
            "step": self.step,
            "warmup_steps_K": self.warmup_steps_K,
            "parents": list(self.parents),
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Metadata":
        return cls(
            ArchSpec.from_dict(d["arch"]),
            d.get("objective", "none"),
            int(d.get("step", 0)),
            int(d.get("warmup_steps_K", 0)),
            list(d.get("parents", [])),
            dict(d.get("extra", {})),
        )
