"""Inference and efficiency measurement."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import NamedCheckpoint
from .config import ArchSpec, ModelConfig
from .data import (
    UL2_DEFAULT_MIXTURE,
    Batch,
    Vocab,
    pack_batches,
    pack_lm_batches,
    prefixlm_split,
    ul2_mixture,
)
from .errors import ContractError, InputError
from .model import (
    KVCache,
    as_params,
    check_tokens,
    decode_hidden,
    decoder_hidden,
    encode,
    output_logits,
)
from .trainer import OptimizerState, TrainSchedule, adamw_update, batch_loss

# ---------------------------------------------------------------------------
# greedy decoding


def _argmax(logits_row: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties.
    return int(np.argmax(logits_row))


def greedy_decode(
    ckpt: NamedCheckpoint,
    input_tokens: Sequence[int],
    max_new: int,
    use_cache: bool = True,
    stop_at_eos: bool = True,
) -> list[int]:
    """Generate up to ``max_new`` tokens by repeated argmax.

    Decoder-only models continue ``input_tokens``; encoder-decoder models encode
    them and decode from BOS. The returned list holds only generated tokens and
    ends with EOS if one was produced.
    """
    if max_new < 1:
        raise ContractError("max_new must be at least 1")
    arch = ckpt.arch
    P = as_params(ckpt)
    prompt = check_tokens(np.asarray(input_tokens)[None, :], arch.encoder if arch.is_encdec else arch.decoder)
    out: list[int] = []

    if arch.is_encdec:
        enc = encode(P, arch, prompt)
        dec = [Vocab.BOS]

        def step_uncached() -> np.ndarray:
            h = decode_hidden(P, arch, np.array([dec]), enc)
            return output_logits(P, h).data[0, -1]

        cache = KVCache()

        def step_cached() -> np.ndarray:
            start = cache.length
            h = decode_hidden(P, arch, np.array([dec[start:]]), enc, cache=cache, start=start)
            return output_logits(P, h).data[0, -1]

        seq = dec
    else:
        seq = prompt[0].tolist()
        cfg = arch.decoder

        def step_uncached() -> np.ndarray:
            h = decoder_hidden(P, cfg, np.array([seq]))
            return output_logits(P, h).data[0, -1]

        cache = KVCache()

        def step_cached() -> np.ndarray:
            start = cache.length
            h = decoder_hidden(P, cfg, np.array([seq[start:]]), cache=cache, start=start)
            return output_logits(P, h).data[0, -1]

    step = step_cached if use_cache else step_uncached
    limit = arch.decoder.max_seq
    for _ in range(max_new):
        if len(seq) >= limit:
            break
        tok = _argmax(step())
        out.append(tok)
        seq.append(tok)
        if stop_at_eos and tok == Vocab.EOS:
            break
    return out


# ---------------------------------------------------------------------------
# perplexity


def shard_batches(
    sequences: Sequence[Sequence[int]],
    objective: str = "prefixlm",
    batch_size: int = 16,
    max_len: int = 256,
    seed: int = 0,
) -> list[Batch]:
    """Pack raw token sequences under an objective's input/target convention.

    ``lm`` scores every next token; ``prefixlm`` conditions on the first half;
    ``ul2`` applies the default denoiser mixture with ``seed``.
    """
    if objective == "lm":
        return pack_lm_batches(sequences, batch_size, max_len)
    if objective == "prefixlm":
        examples = [prefixlm_split(s) for s in sequences]
    elif objective == "ul2":
        examples = list(ul2_mixture(sequences, UL2_DEFAULT_MIXTURE, seed))
    else:
        raise ContractError(f"unknown objective {objective!r}")
    return pack_batches(examples, batch_size, max_len, max_len)


def perplexity(
    ckpt: NamedCheckpoint,
    shard: Sequence[Batch] | Sequence[Sequence[int]],
    objective: str | None = None,
    **pack_kw,
) -> float:
    """exp of the token-weighted mean NLL over unmasked target tokens.

    ``shard`` is either packed batches or raw sequences; the latter are packed
    with ``shard_batches(shard, objective)``. A decoder-only model reading an
    encoder-decoder batch sees input+target and is scored on the target only.
    """
    if len(shard) == 0:
        raise InputError("perplexity over an empty shard")
    if isinstance(shard[0], Batch):
        batches = list(shard)
    else:
        batches = shard_batches(shard, objective or "prefixlm", **pack_kw)
    P = as_params(ckpt)
    total = count = 0.0
    for b in batches:
        n = float(b.loss_mask.sum())
        if n == 0:
            continue
        total += batch_loss(P, ckpt.arch, b).item() * n
        count += n
    if count == 0:
        raise InputError("perplexity shard has no target tokens")
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# last-token classifier probe


@dataclass
class ProbeConfig:
    learning_rates: tuple[float, ...] = (1e-3, 3e-3, 9e-3)
    batch_sizes: tuple[int, ...] = (8, 32)
    epochs: int = 3
    max_len: int = 128
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class ProbeResult:
    best_accuracy: float
    best_lr: float
    best_batch_size: int
    num_classes: int
    grid: dict[str, float] = field(default_factory=dict)
    side: str = "decoder"


@dataclass
class LabeledDataset:
    train: list[tuple[list[int], int]]
    dev: list[tuple[list[int], int]]
    labels: list[str] = field(default_factory=list)

    @classmethod
    def from_tsv(cls, train_path: str | Path, dev_path: str | Path) -> "LabeledDataset":
        """Read ``text<TAB>label`` files; label strings map to sorted class ids."""
        raw = {}
        for split, path in (("train", train_path), ("dev", dev_path)):
            rows = []
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    text, _, label = line.rpartition("\t")
                    rows.append((text, label))
            raw[split] = rows
        labels = sorted({lab for rows in raw.values() for _, lab in rows})
        index = {lab: i for i, lab in enumerate(labels)}
        conv = {s: [(Vocab.encode(t), index[lab]) for t, lab in rows] for s, rows in raw.items()}
        return cls(conv["train"], conv["dev"], labels)


def _probe_side(arch: ArchSpec) -> tuple[str, ModelConfig]:
    return ("encoder", arch.encoder) if arch.is_encdec else ("decoder", arch.decoder)


def _pad(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [list(s)[: max_len - 1] + [Vocab.EOS] for s in seqs]
    T = max(len(s) for s in seqs)
    toks = np.full((len(seqs), T), Vocab.PAD, dtype=np.int64)
    lens = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        toks[i, : len(s)] = s
        lens[i] = len(s)
    return toks, lens


def last_token_features(P, arch: ArchSpec, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Final-norm hidden state at the last unpadded position.

    Encoder side for encoder-decoder models, decoder side for decoder-only.
    """
    if arch.is_encdec:
        h = encode(P, arch, tokens, lengths).hidden
    else:
        h = decoder_hidden(P, arch.decoder, tokens, lengths)
    B, T, d = h.shape
    flat = ad.reshape(h, (B * T, d))
    rows = np.arange(B) * T + (np.asarray(lengths) - 1)
    return ad.embedding(flat, rows)


def _probe_logits(P, head_w, head_b, arch, toks, lens) -> Tensor:
    feats = last_token_features(P, arch, toks, lens)
    return ad.add(ad.matmul(feats, head_w), head_b)


def finetune_classifier(
    ckpt: NamedCheckpoint,
    dataset: LabeledDataset,
    head_config: ProbeConfig | None = None,
) -> ProbeResult:
    """Grid-search full finetuning with a linear head; return the best dev accuracy."""
    from .trainer import ce_loss

    cfg = head_config or ProbeConfig()
    labels = sorted({y for _, y in dataset.train})
    if len(labels) < 2:
        raise ContractError("classifier training set has a single class")
    n_classes = max(max(y for _, y in dataset.train), max((y for _, y in dataset.dev), default=0)) + 1
    side, side_cfg = _probe_side(ckpt.arch)
    dev_toks, dev_lens = _pad([x for x, _ in dataset.dev], cfg.max_len)
    dev_y = np.array([y for _, y in dataset.dev])
    grid: dict[str, float] = {}
    best = (-1.0, 0.0, 0)
    for lr in cfg.learning_rates:
        for bs in cfg.batch_sizes:
            rng = np.random.default_rng(cfg.seed)
            params = dict(ckpt.tensors)
            params["probe.w"] = (rng.standard_normal((side_cfg.d_model, n_classes)) / np.sqrt(side_cfg.d_model)).astype(np.float32)
            params["probe.b"] = np.zeros(n_classes, dtype=np.float32)
            sched = TrainSchedule(total_steps=1, lr_peak=lr, weight_decay=cfg.weight_decay)
            state = OptimizerState()
            n = len(dataset.train)
            for _ in range(cfg.epochs):
                order = rng.permutation(n)
                for start in range(0, n, bs):
                    idx = order[start : start + bs]
                    toks, lens = _pad([dataset.train[i][0] for i in idx], cfg.max_len)
                    y = np.array([dataset.train[i][1] for i in idx])
                    P = as_params(params, requires_grad=True)
                    with Tape() as tape:
                        logits = _probe_logits(P, P["probe.w"], P["probe.b"], ckpt.arch, toks, lens)
                        loss = ce_loss(logits, y)
                    grads = ad.backward(tape, loss)
                    for t, g in grads.items():
                        params[t.name] = adamw_update(t.name, params[t.name], g.data, state, lr, sched)
            P = as_params(params)
            pred = _probe_logits(P, P["probe.w"], P["probe.b"], ckpt.arch, dev_toks, dev_lens).data.argmax(-1)
            acc = float(np.mean(pred == dev_y))
            grid[f"lr={lr:g},bs={bs}"] = acc
            if acc > best[0]:
                best = (acc, lr, bs)
    return ProbeResult(best[0], best[1], best[2], n_classes, grid, side)


# ---------------------------------------------------------------------------
# analytic flops


@dataclass
class FlopsReport:
    encoder_flops: int
    decoder_flops: int
    cross_attn_flops: int
    total: int
    notes: str

    def to_dict(self) -> dict:
        return asdict(self)


FLOPS_NOTES = (
    "2 flops per multiply-accumulate; projections q/k/v/o and gated FFN per token; "
    "attention scores and mixing 2*heads*d_head*Lq*Lkv each; causal self-attention "
    "counted at the L^2/2 average; embeddings, unembedding and norms excluded"
)


def _proj_flops(cfg: ModelConfig, tokens: int) -> int:
    per_token = (
        cfg.d_model * cfg.attn_width
        + 2 * cfg.d_model * cfg.kv_width
        + cfg.attn_width * cfg.d_model
        + 3 * cfg.d_model * cfg.ffn_hidden
    )
    return 2 * tokens * per_token


def _attn_flops(heads: int, d_head: int, lq: int, lkv: int, causal: bool) -> int:
    f = 2 * (2 * heads * d_head * lq * lkv)
    return f // 2 if causal else f


def stack_flops(cfg: ModelConfig, length: int, causal: bool) -> int:
    per_layer = _proj_flops(cfg, length) + _attn_flops(cfg.q_heads, cfg.d_head, length, length, causal)
    return cfg.num_layers * per_layer


def cross_flops(enc: ModelConfig, dec: ModelConfig, in_len: int, out_len: int) -> int:
    if out_len == 0:
        return 0
    q_o = 2 * out_len * 2 * dec.d_model * dec.attn_width
    k_v = 2 * in_len * 2 * enc.d_model * dec.kv_width
    return dec.num_layers * (q_o + k_v + _attn_flops(dec.q_heads, dec.d_head, out_len, in_len, False))


def estimate_flops(arch: ArchSpec, in_len: int, out_len: int) -> FlopsReport:
    """Closed-form inference flops.

    Encoder-decoder: encoder over ``in_len`` (bidirectional), decoder
    self-attention over ``out_len`` (causal), cross-attention ``out_len`` x
    ``in_len``. Decoder-only: one causal pass over ``in_len + out_len``.
    """
    if in_len < 0 or out_len < 0:
        raise ContractError("lengths must be non-negative")
    if arch.is_encdec:
        e = stack_flops(arch.encoder, in_len, causal=False)
        d = stack_flops(arch.decoder, out_len, causal=True)
        x = cross_flops(arch.encoder, arch.decoder, in_len, out_len)
    else:
        e, x = 0, 0
        d = stack_flops(arch.decoder, in_len + out_len, causal=True)
    notes = f"in_len={in_len} out_len={out_len}; " + FLOPS_NOTES
    return FlopsReport(e, d, x, e + d + x, notes)


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    median_ms: float
    p90_ms: float
    queries: int
    max_new: int
    batch_size: int = 1


def measure_latency(
    ckpt: NamedCheckpoint,
    prompts: Sequence[Sequence[int]],
    max_new: int = 16,
    batch_size: int = 1,
    warmup: int = 2,
) -> LatencyReport:
    """Wall-clock ms/query of cached greedy decoding, always generating ``max_new`` tokens.

    The first ``warmup`` queries are run but excluded from the statistics.
    """
    if batch_size != 1:
        raise ContractError("only batch size 1 is supported")
    if warmup < 2:
        raise ContractError("at least 2 warmup iterations are required")
    if not prompts:
        raise InputError("no prompts given")
    for i in range(warmup):
        greedy_decode(ckpt, prompts[i % len(prompts)], max_new, stop_at_eos=False)
    times = []
    for p in prompts:
        t0 = time.perf_counter()
        greedy_decode(ckpt, p, max_new, stop_at_eos=False)
        times.append((time.perf_counter() - t0) * 1000.0)
    return LatencyReport(float(np.median(times)), float(np.percentile(times, 90)), len(times), max_new, batch_size)
