"""Losses, optimizer, schedules, and the adaptation training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import NamedCheckpoint, is_xattn
from .data import Batch, as_decoder_only
from .errors import ConfigError, ContractError, NonFiniteLossError
from .model import as_params, decode_hidden, decoder_hidden, encode, output_logits

# ---------------------------------------------------------------------------
# losses


def _as_tensor(x: Tensor | np.ndarray) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _token_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position negative log-likelihood, shape of ``targets``."""
    lp = ad.log_softmax(logits)
    picked = ad.gather(lp, np.asarray(targets)[..., None])
    return ad.scale(ad.reshape(picked, np.shape(targets)), -1.0)


def ce_loss(logits: Tensor | np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token negative log-likelihood over positions where ``mask`` is 1."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise ContractError(f"ce_loss: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = float(mask.sum())
    if count == 0:
        raise ContractError("ce_loss: every position is masked")
    nll = _token_nll(logits, targets)
    return ad.scale(ad.sum_(ad.mul(nll, Tensor._wrap(mask))), 1.0 / count)


def kd_loss(
    student_logits: Tensor | np.ndarray,
    teacher_ids: np.ndarray,
    teacher_probs: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    lam: float = 1.0,
    teacher_mask: np.ndarray | None = None,
) -> Tensor:
    """Top-k distillation mixed with cross-entropy.

    Per position with a teacher entry:
    ``lam * sum_k q_k (log q_k - log p_S(id_k)) + (1 - lam) * CE`` where ``q`` is the
    teacher top-k renormalized to sum to one. Positions without a teacher entry
    (``teacher_mask`` 0) use plain CE. The result is averaged over ``mask``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"kd lambda must lie in [0, 1], got {lam}")
    logits = _as_tensor(student_logits)
    targets = np.asarray(targets)
    dtype = logits.dtype
    mask = np.ones(targets.shape, dtype=dtype) if mask is None else np.asarray(mask, dtype=dtype)
    tmask = np.ones(targets.shape, dtype=dtype) if teacher_mask is None else np.asarray(teacher_mask, dtype=dtype)
    count = float(mask.sum())
    if count == 0:
        raise ContractError("kd_loss: every position is masked")
    ids = np.asarray(teacher_ids)
    q = np.asarray(teacher_probs, dtype=np.float64)
    z = q.sum(axis=-1, keepdims=True)
    q = np.where(z > 0, q / np.where(z > 0, z, 1.0), 0.0)
    q_logq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0).sum(axis=-1)

    lp = ad.log_softmax(logits)
    nll = ad.scale(ad.reshape(ad.gather(lp, targets[..., None]), targets.shape), -1.0)
    cross = ad.sum_(ad.mul(ad.gather(lp, ids), Tensor._wrap(q.astype(dtype))), axis=-1)
    kl = ad.add(Tensor._wrap(q_logq.astype(dtype)), ad.scale(cross, -1.0))

    w_kl = (mask * tmask * lam).astype(dtype)
    w_ce = (mask * (1.0 - tmask * lam)).astype(dtype)
    total = ad.add(ad.sum_(ad.mul(kl, Tensor._wrap(w_kl))), ad.sum_(ad.mul(nll, Tensor._wrap(w_ce))))
    return ad.scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# model-level loss


def batch_logits(P: Mapping[str, Tensor], ckpt_arch, batch: Batch) -> Tensor:
    if ckpt_arch.is_encdec:
        if batch.enc_tokens is None:
            raise ContractError("encoder-decoder model needs a batch with encoder inputs")
        enc = encode(P, ckpt_arch, batch.enc_tokens, batch.enc_lengths)
        h = decode_hidden(P, ckpt_arch, batch.dec_tokens, enc, batch.dec_lengths)
    else:
        if batch.enc_tokens is not None:
            batch = as_decoder_only(batch)
        h = decoder_hidden(P, ckpt_arch.decoder, batch.dec_tokens, batch.dec_lengths)
    return output_logits(P, h)


def batch_loss(P: Mapping[str, Tensor], arch, batch: Batch, kd_lambda: float = 0.0) -> Tensor:
    if not arch.is_encdec and batch.enc_tokens is not None:
        batch = as_decoder_only(batch)
    logits = batch_logits(P, arch, batch)
    if kd_lambda > 0 and batch.teacher_ids is not None:
        return kd_loss(logits, batch.teacher_ids, batch.teacher_probs, batch.targets,
                       batch.loss_mask, kd_lambda, batch.teacher_mask)
    return ce_loss(logits, batch.targets, batch.loss_mask)


def eval_loss(ckpt: NamedCheckpoint, batches: Sequence[Batch]) -> float:
    """Token-weighted mean CE over ``batches``."""
    P = as_params(ckpt)
    total, count = 0.0, 0.0
    for b in batches:
        n = float(b.loss_mask.sum())
        total += batch_loss(P, ckpt.arch, b).item() * n
        count += n
    if count == 0:
        raise ContractError("eval_loss over zero target tokens")
    return total / count


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass
class TrainSchedule:
    """Training hyperparameters.

    ``freeze_xattn_steps`` (K) of None means "take K from the checkpoint
    metadata". ``stage_switch_fraction`` < 1 switches from ``objectives[0]`` to
    ``objectives[1]`` at step ``round(total_steps * fraction)``.
    """

    total_steps: int
    lr_peak: float = 3e-3
    lr_warmup_steps: int | None = None
    lr_floor_fraction: float = 0.1
    freeze_xattn_steps: int | None = None
    stage_switch_fraction: float = 1.0
    objectives: tuple[str, ...] = ("prefixlm",)
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    kd_lambda: float = 1.0
    eval_every: int = 50

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.freeze_xattn_steps is not None and not 0 <= self.freeze_xattn_steps <= self.total_steps:
            raise ConfigError("freeze_xattn_steps must lie in [0, total_steps]")
        if not 0.0 <= self.stage_switch_fraction <= 1.0:
            raise ConfigError("stage_switch_fraction must lie in [0, 1]")
        if self.stage_switch_fraction < 1.0 and len(self.objectives) < 2:
            raise ConfigError("a stage switch needs two objectives")
        if not 0.0 <= self.kd_lambda <= 1.0:
            raise ConfigError("kd_lambda must lie in [0, 1]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        self.objectives = tuple(self.objectives)

    @property
    def warmup(self) -> int:
        if self.lr_warmup_steps is not None:
            return self.lr_warmup_steps
        return max(1, round(0.01 * self.total_steps))

    @property
    def switch_step(self) -> int:
        return round(self.total_steps * self.stage_switch_fraction)

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``lr_floor_fraction * lr_peak``."""
        w = self.warmup
        if step < w:
            return self.lr_peak * (step + 1) / w
        span = max(1, self.total_steps - w)
        frac = min(1.0, (step - w) / span)
        floor = self.lr_floor_fraction * self.lr_peak
        return floor + 0.5 * (self.lr_peak - floor) * (1.0 + math.cos(math.pi * frac))

    def objective_at(self, step: int) -> str:
        if self.stage_switch_fraction >= 1.0 or step < self.switch_step:
            return self.objectives[0]
        return self.objectives[1]


@dataclass
class OptimizerState:
    """AdamW moments keyed by tensor name; per-tensor update counts drive bias correction."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adamw_update(
    name: str,
    p: np.ndarray,
    g: np.ndarray,
    state: OptimizerState,
    lr: float,
    sched: TrainSchedule,
) -> np.ndarray:
    m = state.m.get(name)
    if m is None:
        m = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    t = state.counts.get(name, 0) + 1
    m = sched.beta1 * m + (1.0 - sched.beta1) * g
    v = sched.beta2 * state.v[name] + (1.0 - sched.beta2) * (g * g)
    state.m[name], state.v[name], state.counts[name] = m, v, t
    if lr == 0.0:
        return p
    mhat = m / (1.0 - sched.beta1**t)
    vhat = v / (1.0 - sched.beta2**t)
    update = mhat / (np.sqrt(vhat) + sched.eps)
    if sched.weight_decay and p.ndim >= 2:
        update = update + sched.weight_decay * p
    return (p - lr * update).astype(np.float32)


def trainable_names(ckpt: NamedCheckpoint, step: int, freeze_k: int) -> list[str]:
    if step < freeze_k:
        return [n for n in ckpt.tensors if is_xattn(n)]
    return list(ckpt.tensors)


@dataclass
class StepResult:
    checkpoint: NamedCheckpoint
    state: OptimizerState
    loss: float
    grad_norm: float
    lr: float


def train_step(
    ckpt: NamedCheckpoint,
    batch: Batch,
    schedule: TrainSchedule,
    state: OptimizerState,
    step: int,
) -> StepResult:
    """One clipped AdamW step. While ``step < K`` only ``dec.*.xattn.*`` tensors move."""
    if not 0 <= step < schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps})")
    freeze_k = schedule.freeze_xattn_steps
    if freeze_k is None:
        freeze_k = ckpt.meta.warmup_steps_K
    train = set(trainable_names(ckpt, step, freeze_k))
    P = as_params(ckpt)
    for name in train:
        P[name].requires_grad = True
    lr = schedule.lr_at(step)
    with Tape() as tape:
        loss = batch_loss(P, ckpt.arch, batch, schedule.kd_lambda)
    loss_val = loss.item()
    if not tape.owns(loss):
        raise ContractError("loss does not depend on any trainable tensor")
    grads = ad.backward(tape, loss, wrt=[P[n] for n in train])
    garr = {n: grads[P[n]].data for n in train}
    gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in garr.values()))
    if not (math.isfinite(loss_val) and math.isfinite(gnorm)):
        raise NonFiniteLossError(step, lr, gnorm, loss_val)
    clip = 1.0
    if schedule.grad_clip_norm and gnorm > schedule.grad_clip_norm:
        clip = schedule.grad_clip_norm / (gnorm + 1e-6)
    updates = {}
    for name in train:
        g = garr[name] if clip == 1.0 else (garr[name] * clip).astype(np.float32)
        updates[name] = adamw_update(name, ckpt[name], g, state, lr, schedule)
    state.step += 1
    new = ckpt.replace(updates, step=ckpt.meta.step + 1)
    return StepResult(new, state, loss_val, gnorm, lr)


# ---------------------------------------------------------------------------
# batch streams and the training loop


class BatchStream:
    """Endless iterator over prepared batches; reshuffles (seeded) at every wrap."""

    def __init__(self, batches: Sequence[Batch], seed: int = 0, shuffle: bool = True):
        if not batches:
            raise ContractError("BatchStream needs at least one batch")
        self.batches = list(batches)
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self._order = self._make_order()
        self._pos = 0

    def _make_order(self) -> list[int]:
        idx = np.arange(len(self.batches))
        if self.shuffle:
            np.random.default_rng([self.seed, self.epoch]).shuffle(idx)
        return idx.tolist()

    def __iter__(self) -> "BatchStream":
        return self

    def __next__(self) -> Batch:
        if self._pos == len(self._order):
            self.epoch += 1
            self._order = self._make_order()
            self._pos = 0
        b = self.batches[self._order[self._pos]]
        self._pos += 1
        return b


@dataclass
class MetricRow:
    step: int
    tokens: int
    train_loss: float
    eval_loss: float
    objective: str


@dataclass
class RunResult:
    checkpoint: NamedCheckpoint
    metrics: list[MetricRow]
    snapshots: list[tuple[int, NamedCheckpoint]]
    epochs: dict[str, int]


METRICS_COLUMNS = ("step", "tokens", "split", "loss")


def write_metrics(path: str | Path, rows: Sequence[MetricRow]) -> None:
    """Append rows as tab-separated ``step tokens split loss``; header on a new file."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        if new:
            w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r.step, r.tokens, "train", repr(r.train_loss)])
            w.writerow([r.step, r.tokens, "eval", repr(r.eval_loss)])


def run_adaptation(
    ckpt: NamedCheckpoint,
    streams: Mapping[str, BatchStream],
    schedule: TrainSchedule,
    eval_batches: Sequence[Batch] | Mapping[str, Sequence[Batch]],
    metrics_path: str | Path | None = None,
    keep_snapshots: bool = False,
    on_log: Callable[[MetricRow], None] | None = None,
) -> RunResult:
    """Train for ``schedule.total_steps`` steps, evaluating every ``eval_every`` steps.

    A row is logged after step ``s`` when ``(s + 1) % eval_every == 0`` or at
    the last step, giving ``ceil(total_steps / eval_every)`` rows. Eval batches
    may be keyed by objective; the current objective's set is used.
    """
    for obj in set(schedule.objectives[: 2 if schedule.stage_switch_fraction < 1.0 else 1]):
        if obj not in streams:
            raise ConfigError(f"no batch stream for objective {obj!r}")
    state = OptimizerState()
    rows: list[MetricRow] = []
    snaps: list[tuple[int, NamedCheckpoint]] = []
    tokens = 0
    window: list[float] = []
    for step in range(schedule.total_steps):
        obj = schedule.objective_at(step)
        batch = next(streams[obj])
        res = train_step(ckpt, batch, schedule, state, step)
        ckpt, state = res.checkpoint, res.state
        tokens += batch.num_tokens
        window.append(res.loss)
        if (step + 1) % schedule.eval_every == 0 or step == schedule.total_steps - 1:
            ev = eval_batches[obj] if isinstance(eval_batches, Mapping) else eval_batches
            row = MetricRow(step + 1, tokens, float(np.mean(window)), eval_loss(ckpt, ev), obj)
            window = []
            rows.append(row)
            if metrics_path is not None:
                write_metrics(metrics_path, [row])
            if on_log is not None:
                on_log(row)
            if keep_snapshots:
                snaps.append((step + 1, ckpt))
    return RunResult(ckpt, rows, snaps, {k: s.epoch for k, s in streams.items()})
