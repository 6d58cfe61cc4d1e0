"""Adapting decoder-only language models into encoder-decoder models, at desk scale."""

from .checkpoint import NamedCheckpoint, init_checkpoint
from .config import ArchSpec, MaskKind, ModelConfig, arch_from_preset, preset
from .errors import (
    ConfigError,
    ContractError,
    EncDecError,
    FormatError,
    InputError,
    NonFiniteLossError,
    ShapeError,
    SurgeryError,
    TapeError,
    ValidationError,
)
from .serialization import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
