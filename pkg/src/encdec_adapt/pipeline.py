"""Run configuration and end-to-end training runs."""

from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import NamedCheckpoint, init_checkpoint
from .config import ArchSpec, MaskKind, arch_from_preset, preset_is_huge
from .data import (
    UL2_DEFAULT_MIXTURE,
    Batch,
    PrefixLMExample,
    as_decoder_only,
    chunk_corpus,
    pack_batches,
    pack_lm_batches,
    prefixlm_split,
    read_corpus,
    synthetic_corpus,
    teacher_record,
    ul2_mixture,
)
from .errors import ConfigError
from .serialization import atomic_write_bytes, load_checkpoint, save_checkpoint
from .trainer import BatchStream, RunResult, TrainSchedule, run_adaptation

OBJECTIVES = ("lm", "prefixlm", "ul2")


def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def blob_sha1(path: str | Path) -> str:
    """Git-style content hash: sha1 over ``b"blob <size>\\0" + bytes``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class DataConfig:
    train_paths: list[str] = field(default_factory=list)
    eval_paths: list[str] = field(default_factory=list)
    synthetic_tokens: int = 0
    seq_len: int = 128
    batch_size: int = 16
    eval_sequences: int = 64
    teacher_checkpoint: str | None = None
    teacher_topk: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not self.train_paths and self.synthetic_tokens <= 0:
            raise ConfigError("data needs train_paths or synthetic_tokens > 0")
        for p in [*self.train_paths, *self.eval_paths, *([self.teacher_checkpoint] if self.teacher_checkpoint else [])]:
            if not Path(p).is_file():
                raise ConfigError(f"data file not found: {p}")
        if self.seq_len < 4 or self.batch_size < 1 or self.eval_sequences < 1:
            raise ConfigError("seq_len >= 4, batch_size >= 1 and eval_sequences >= 1 required")


@dataclass
class RunConfig:
    """Everything needed to reproduce a training run.

    ``model`` is a preset name (``"S"``, ``"B-S"``, ``"S-desk"``) or an
    architecture dict; it is ignored when ``init_checkpoint`` is given.
    ``schedule`` holds ``TrainSchedule`` fields other than ``objectives``
    and ``seed``.
    """

    model: str | dict = "S-desk"
    init_checkpoint: str | None = None
    objectives: list[str] = field(default_factory=lambda: ["prefixlm"])
    schedule: dict[str, Any] = field(default_factory=lambda: {"total_steps": 100})
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    encoder_mask: str | None = None
    allow_huge: bool = False

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        _reject_unknown(d, [f.name for f in fields(cls)], "run config")
        d = dict(d)
        data = d.pop("data", {})
        if not isinstance(data, dict):
            raise ConfigError("data must be a mapping")
        _reject_unknown(data, [f.name for f in fields(DataConfig)], "data")
        cfg = cls(**d, data=DataConfig(**data))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read run config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def arch(self) -> ArchSpec:
        if isinstance(self.model, str):
            arch = arch_from_preset(self.model)
        else:
            arch = ArchSpec.from_dict(self.model)
        if self.encoder_mask is not None:
            arch = arch.with_encoder_mask(MaskKind(self.encoder_mask))
        return arch

    def train_schedule(self) -> TrainSchedule:
        _reject_unknown(self.schedule, [f.name for f in fields(TrainSchedule) if f.name not in ("objectives", "seed")], "schedule")
        return TrainSchedule(**self.schedule, objectives=tuple(self.objectives), seed=self.seed)

    def validate(self) -> None:
        """Check every field before any compute happens."""
        if not self.objectives or any(o not in OBJECTIVES for o in self.objectives):
            raise ConfigError(f"objectives must be drawn from {OBJECTIVES}, got {self.objectives}")
        if self.encoder_mask is not None:
            MaskKind(self.encoder_mask)
        self.data.validate()
        if self.init_checkpoint is not None:
            if not Path(self.init_checkpoint).is_file():
                raise ConfigError(f"init checkpoint not found: {self.init_checkpoint}")
        else:
            arch = self.arch()
            if isinstance(self.model, str) and preset_is_huge(self.model) and not self.allow_huge:
                raise ConfigError(f"preset {self.model!r} is accounting-only; pass --i-know-this-is-huge to train it")
            if arch.is_encdec and "lm" in self.objectives:
                raise ConfigError("the lm objective needs a decoder-only model")
        self.train_schedule()


# ---------------------------------------------------------------------------
# data


def load_sequences(data: DataConfig) -> tuple[list[list[int]], list[list[int]]]:
    """Token sequences of length ``seq_len`` for training and evaluation."""
    if data.synthetic_tokens > 0:
        lines = synthetic_corpus(data.synthetic_tokens, seed=data.seed)
    else:
        lines = read_corpus(data.train_paths)
    seqs = chunk_corpus(lines, data.seq_len)
    if data.eval_paths:
        ev = chunk_corpus(read_corpus(data.eval_paths), data.seq_len)
    else:
        n_eval = min(data.eval_sequences, max(1, len(seqs) // 10))
        seqs, ev = seqs[:-n_eval], seqs[-n_eval:]
    if not seqs or not ev:
        raise ConfigError("corpus too small for the requested seq_len")
    return seqs, ev[: data.eval_sequences]


def make_batches(
    arch: ArchSpec,
    sequences: Sequence[Sequence[int]],
    objective: str,
    batch_size: int,
    seq_len: int,
    seed: int = 0,
    teacher: NamedCheckpoint | None = None,
    teacher_topk: int = 16,
) -> list[Batch]:
    """Pack sequences for ``arch`` under ``objective``.

    Decoder-only models receive input+target concatenations with loss on the
    target part, so their losses are comparable to the encoder-decoder view.
    """
    if objective == "lm":
        if arch.is_encdec:
            raise ConfigError("the lm objective needs a decoder-only model")
        if teacher is None:
            return pack_lm_batches(sequences, batch_size, seq_len)
        # A one-token prefix turns every later position into a distilled target.
        examples = [PrefixLMExample(list(s[:1]), list(s[1:])) for s in sequences]
        examples = teacher_record(teacher, examples, k=teacher_topk)
    elif objective == "prefixlm":
        examples = [prefixlm_split(s) for s in sequences]
        if teacher is not None:
            examples = teacher_record(teacher, examples, k=teacher_topk)
    elif objective == "ul2":
        examples = list(ul2_mixture(sequences, UL2_DEFAULT_MIXTURE, seed))
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    batches = pack_batches(examples, batch_size, seq_len, seq_len)
    if not arch.is_encdec:
        batches = [as_decoder_only(b) for b in batches]
    return batches


@dataclass
class Prepared:
    arch: ArchSpec
    streams: dict[str, BatchStream]
    eval_batches: dict[str, list[Batch]]


def prepare(
    arch: ArchSpec,
    data: DataConfig,
    objectives: Sequence[str],
    seed: int,
    sequences: tuple[list[list[int]], list[list[int]]] | None = None,
) -> Prepared:
    train, ev = sequences if sequences is not None else load_sequences(data)
    teacher = load_checkpoint(data.teacher_checkpoint) if data.teacher_checkpoint else None
    streams, evals = {}, {}
    for obj in dict.fromkeys(objectives):
        streams[obj] = BatchStream(
            make_batches(arch, train, obj, data.batch_size, data.seq_len, seed, teacher, data.teacher_topk), seed=seed
        )
        # Evaluation never uses the teacher and always has a fixed corruption seed.
        evals[obj] = make_batches(arch, ev, obj, data.batch_size, data.seq_len, seed=12345)
    return Prepared(arch, streams, evals)


# ---------------------------------------------------------------------------
# runs


def initial_checkpoint(cfg: RunConfig) -> NamedCheckpoint:
    if cfg.init_checkpoint is not None:
        ckpt = load_checkpoint(cfg.init_checkpoint)
        if cfg.encoder_mask is not None and ckpt.arch.is_encdec:
            ckpt = with_encoder_mask(ckpt, cfg.encoder_mask)
        return ckpt
    return init_checkpoint(cfg.arch(), seed=cfg.seed, objective="init")


def with_encoder_mask(ckpt: NamedCheckpoint, mask: str | MaskKind) -> NamedCheckpoint:
    """Same weights, different encoder self-attention mask."""
    return NamedCheckpoint(ckpt.tensors, replace(ckpt.meta, arch=ckpt.arch.with_encoder_mask(MaskKind(mask))))


def reproducibility_record(cfg_dict: dict[str, Any], inputs: Sequence[str | Path], seeds: dict[str, int], command: str) -> dict[str, Any]:
    return {
        "command": command,
        "config": cfg_dict,
        "seeds": seeds,
        "inputs": {str(p): blob_sha1(p) for p in inputs},
        "deterministic": True,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write_bytes(path, [json.dumps(obj, indent=2, sort_keys=True, default=str).encode() + b"\n"])


def run(cfg: RunConfig, on_log=None, write_outputs: bool = True) -> RunResult:
    """Train per ``cfg`` in deterministic mode.

    Writes ``checkpoint.edsg``, ``metrics.tsv`` and ``repro.json`` into
    ``cfg.output_dir`` when ``write_outputs`` is set.
    """
    cfg.validate()
    ckpt = initial_checkpoint(cfg)
    schedule = cfg.train_schedule()
    prep = prepare(ckpt.arch, cfg.data, cfg.objectives, cfg.seed)
    out = Path(cfg.output_dir)
    metrics = None
    if write_outputs:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.tsv"
        if metrics.exists():
            metrics.unlink()
        inputs = [*cfg.data.train_paths, *cfg.data.eval_paths]
        inputs += [p for p in (cfg.init_checkpoint, cfg.data.teacher_checkpoint) if p]
        write_json(out / "repro.json", reproducibility_record(
            cfg.to_dict(), inputs, {"run": cfg.seed, "data": cfg.data.seed}, "train"))
    with ad.deterministic():
        result = run_adaptation(ckpt, prep.streams, schedule, prep.eval_batches, metrics, on_log=on_log)
    if write_outputs:
        save_checkpoint(result.checkpoint, out / "checkpoint.edsg")
    return result
