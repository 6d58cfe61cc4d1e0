"""Desk-scale experiments shared by the acceptance suite and ``scripts/``.

Every experiment draws from one synthetic corpus, cut into disjoint slices
for teacher pretraining, base pretraining and adaptation so that no stage
trains on text an earlier stage has already seen.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import NamedCheckpoint, init_checkpoint
from .config import ArchSpec, MaskKind, preset
from .data import chunk_corpus, synthetic_corpus
from .pipeline import make_batches, with_encoder_mask
from .surgery import AdaptationPlan, Mode, adapt_balanced, adapt_unbalanced
from .trainer import BatchStream, MetricRow, TrainSchedule, run_adaptation


@dataclass(frozen=True)
class DeskSetup:
    corpus_tokens: int = 5_000_000
    data_seed: int = 0
    seq_len: int = 128
    batch_size: int = 16
    eval_sequences: int = 64
    teacher_preset: str = "B-desk"
    teacher_steps: int = 400
    base_preset: str = "S-desk"
    base_steps: int = 400
    pretrain_lr: float = 3e-3
    adapt_lr: float = 3e-3


@dataclass
class Corpus:
    teacher: list[list[int]]
    base: list[list[int]]
    adapt: list[list[int]]
    eval: list[list[int]]


@functools.lru_cache(maxsize=4)
def desk_corpus(tokens: int, seq_len: int, seed: int, eval_sequences: int) -> Corpus:
    seqs = chunk_corpus(synthetic_corpus(tokens, seed=seed), seq_len)
    ev, rest = seqs[:eval_sequences], seqs[eval_sequences:]
    third = len(rest) // 3
    return Corpus(rest[:third], rest[third : 2 * third], rest[2 * third :], ev)


def corpus_for(setup: DeskSetup) -> Corpus:
    return desk_corpus(setup.corpus_tokens, setup.seq_len, setup.data_seed, setup.eval_sequences)


def pretrain_decoder(
    preset_name: str,
    train: list[list[int]],
    eval_seqs: list[list[int]],
    steps: int,
    lr: float,
    seed: int,
    setup: DeskSetup,
    teacher: NamedCheckpoint | None = None,
) -> tuple[NamedCheckpoint, list[MetricRow]]:
    """Next-token pretraining of a decoder-only model, distilled from ``teacher`` if given."""
    arch = ArchSpec.decoder_only(preset(preset_name))
    need = steps * setup.batch_size
    batches = make_batches(arch, train[:need], "lm", setup.batch_size, setup.seq_len, seed, teacher)
    evals = make_batches(arch, eval_seqs, "lm", setup.batch_size, setup.seq_len)
    sched = TrainSchedule(total_steps=steps, lr_peak=lr, objectives=("lm",), seed=seed, eval_every=max(1, steps // 4))
    ckpt = init_checkpoint(arch, seed=seed, objective="lm" if teacher is None else "lm+kd")
    with ad.deterministic():
        res = run_adaptation(ckpt, {"lm": BatchStream(batches, seed)}, sched, evals)
    return res.checkpoint, res.metrics


@dataclass
class Bases:
    teacher: NamedCheckpoint
    base: NamedCheckpoint
    teacher_curve: list[MetricRow]
    base_curve: list[MetricRow]
    seconds: float


def build_bases(setup: DeskSetup = DeskSetup()) -> Bases:
    """Pretrain the larger teacher, then the small base distilled from it."""
    t0 = time.perf_counter()
    c = corpus_for(setup)
    teacher, tc = pretrain_decoder(setup.teacher_preset, c.teacher, c.eval, setup.teacher_steps, setup.pretrain_lr, 0, setup)
    base, bc = pretrain_decoder(setup.base_preset, c.base, c.eval, setup.base_steps, setup.pretrain_lr, 0, setup, teacher)
    return Bases(teacher, base, tc, bc, time.perf_counter() - t0)


def _train(
    ckpt: NamedCheckpoint,
    seqs: list[list[int]],
    eval_seqs: list[list[int]],
    steps: int,
    seed: int,
    setup: DeskSetup,
    eval_every: int,
    freeze_k: int | None = None,
) -> list[MetricRow]:
    arch = ckpt.arch
    need = steps * setup.batch_size
    batches = make_batches(arch, seqs[:need], "prefixlm", setup.batch_size, setup.seq_len, seed)
    evals = make_batches(arch, eval_seqs, "prefixlm", setup.batch_size, setup.seq_len)
    sched = TrainSchedule(
        total_steps=steps, lr_peak=setup.adapt_lr, objectives=("prefixlm",), seed=seed,
        eval_every=eval_every, freeze_xattn_steps=freeze_k,
    )
    with ad.deterministic():
        return run_adaptation(ckpt, {"prefixlm": BatchStream(batches, seed)}, sched, evals).metrics


# ---------------------------------------------------------------------------
# convergence: balanced adaptation vs training from scratch


@dataclass
class ConvergenceTrial:
    seed: int
    total_steps: int
    target_step: int
    target_loss: float
    adapted_reach_step: int | None
    scratch_curve: list[tuple[int, float]]
    adapted_curve: list[tuple[int, float]]

    @property
    def ratio(self) -> float:
        if self.adapted_reach_step is None:
            return math.inf
        return self.adapted_reach_step / self.target_step

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


def first_step_at_or_below(curve: list[tuple[int, float]], level: float) -> int | None:
    for step, loss in curve:
        if loss <= level:
            return step
    return None


def convergence_trial(base: NamedCheckpoint, seed: int, steps: int, setup: DeskSetup, eval_every: int) -> ConvergenceTrial:
    """Train S-S from scratch and from balanced adaptation on identical batches.

    The target is the scratch run's eval loss at 50% of the steps; the trial
    records the first evaluated step at which the adapted run matches it.
    """
    if (steps // 2) % eval_every:
        raise ValueError("eval_every must divide steps // 2")
    c = corpus_for(setup)
    adapted = adapt_balanced(base)
    scratch = init_checkpoint(adapted.arch, seed=1000 + seed, objective="scratch")
    s_rows = _train(scratch, c.adapt, c.eval, steps, seed, setup, eval_every)
    a_rows = _train(adapted, c.adapt, c.eval, steps, seed, setup, eval_every)
    s_curve = [(r.step, r.eval_loss) for r in s_rows]
    a_curve = [(r.step, r.eval_loss) for r in a_rows]
    target_step = steps // 2
    target = dict(s_curve)[target_step]
    return ConvergenceTrial(seed, steps, target_step, target, first_step_at_or_below(a_curve, target), s_curve, a_curve)


# ---------------------------------------------------------------------------
# unbalanced adaptation: cross-attention warmup vs none


@dataclass
class WarmupTrial:
    seed: int
    k: int
    total_steps: int
    final_loss_with_warmup: float
    final_loss_without: float
    curve_with: list[tuple[int, float]] = field(default_factory=list)
    curve_without: list[tuple[int, float]] = field(default_factory=list)

    @property
    def warmup_wins(self) -> bool:
        return self.final_loss_with_warmup < self.final_loss_without


def warmup_trial(
    encoder_src: NamedCheckpoint,
    decoder_src: NamedCheckpoint,
    seed: int,
    steps: int,
    k: int,
    setup: DeskSetup,
    eval_every: int,
) -> WarmupTrial:
    """Same unbalanced initialization and batches, trained with K=k and K=0."""
    c = corpus_for(setup)
    rows = {}
    for kk in (k, 0):
        plan = AdaptationPlan(encoder_src, decoder_src, Mode.UNBALANCED, warmup_steps_K=kk, init_seed=seed)
        rows[kk] = _train(adapt_unbalanced(plan), c.adapt, c.eval, steps, seed, setup, eval_every)
    curve = {kk: [(r.step, r.eval_loss) for r in rs] for kk, rs in rows.items()}
    return WarmupTrial(seed, k, steps, curve[k][-1][1], curve[0][-1][1], curve[k], curve[0])


# ---------------------------------------------------------------------------
# encoder self-attention mask ablation


@dataclass
class MaskAblation:
    steps: int
    losses: dict[str, float]
    curves: dict[str, list[tuple[int, float]]]

    @property
    def better(self) -> str:
        return min(self.losses, key=self.losses.get)


def encoder_mask_ablation(base: NamedCheckpoint, steps: int, seed: int, setup: DeskSetup, eval_every: int) -> MaskAblation:
    """Balanced adaptation trained twice, differing only in the encoder mask flag."""
    c = corpus_for(setup)
    adapted = adapt_balanced(base)
    losses, curves = {}, {}
    for mask in (MaskKind.BIDIRECTIONAL, MaskKind.CAUSAL):
        rows = _train(with_encoder_mask(adapted, mask), c.adapt, c.eval, steps, seed, setup, eval_every)
        curves[mask.value] = [(r.step, r.eval_loss) for r in rows]
        losses[mask.value] = rows[-1].eval_loss
    return MaskAblation(steps, losses, curves)


def summarize_curve(curve: list[tuple[int, float]]) -> str:
    return " ".join(f"{s}:{v:.3f}" for s, v in curve)


def seeds_passing(flags: list[bool]) -> int:
    return int(np.sum(flags))
