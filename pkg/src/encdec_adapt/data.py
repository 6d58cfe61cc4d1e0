"""Corpus preparation: byte vocabulary, PrefixLM / UL2 examples, teacher sidecars, batching.

Every stage is a pure function of (corpus, config, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .checkpoint import NamedCheckpoint
from .config import ArchKind
from .errors import ConfigError, FormatError, InputError


class Vocab:
    """Fixed token ids.

    ====================  ==========
    bytes 0x00..0xFF      0 .. 255
    PAD, BOS, EOS         256, 257, 258
    sentinels <s0>..<s99> 259 .. 358
    modes [R], [S], [X]   359, 360, 361
    ====================  ==========
    """

    PAD = 256
    BOS = 257
    EOS = 258
    SENTINEL0 = 259
    NUM_SENTINELS = 100
    MODE = {"R": 359, "S": 360, "X": 361}
    SIZE = 362

    @classmethod
    def sentinel(cls, i: int) -> int:
        if not 0 <= i < cls.NUM_SENTINELS:
            raise InputError(f"sentinel index {i} out of range")
        return cls.SENTINEL0 + i

    @classmethod
    def is_sentinel(cls, tok: int) -> bool:
        return cls.SENTINEL0 <= tok < cls.SENTINEL0 + cls.NUM_SENTINELS

    @staticmethod
    def encode(text: str) -> list[int]:
        return list(text.encode("utf-8"))

    @staticmethod
    def decode(ids: Iterable[int]) -> str:
        return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


VOCAB_SIZE = Vocab.SIZE
MODE_CODES = {"prefixlm": 0, "R": 1, "S": 2, "X": 3}
CODE_MODES = {v: k for k, v in MODE_CODES.items()}

# Desk-scale input-output lengths: PrefixLM 1:1, UL2 at twice the PrefixLM length.
PREFIXLM_LENGTHS = (256, 256)
UL2_LENGTHS = (512, 512)


# ---------------------------------------------------------------------------
# example types


@dataclass
class TeacherTopK:
    """Top-k teacher distribution per target position: ids and probs are (T_out, k)."""

    ids: np.ndarray
    probs: np.ndarray


@dataclass
class PrefixLMExample:
    input_tokens: list[int]
    target_tokens: list[int]
    teacher_topk: TeacherTopK | None = None


@dataclass
class UL2Example:
    mode: str
    corrupted_input: list[int]
    target: list[int]
    truncated: bool = False


@dataclass(frozen=True)
class DenoiserConfig:
    """One UL2 denoiser. For mode S, ``corruption_rate`` is the suffix fraction."""

    mode: str
    mean_span_length: float
    corruption_rate: float

    def __post_init__(self) -> None:
        if self.mode not in ("R", "S", "X"):
            raise ConfigError(f"unknown denoiser mode {self.mode!r}")
        if self.mean_span_length <= 0:
            raise ConfigError("mean_span_length must be positive")
        if not 0.0 < self.corruption_rate < 1.0:
            raise ConfigError("corruption_rate must lie in (0, 1)")


UL2_DEFAULT_MIXTURE: tuple[tuple[DenoiserConfig, float], ...] = (
    (DenoiserConfig("R", 3.0, 0.15), 1.0),
    (DenoiserConfig("R", 8.0, 0.15), 1.0),
    (DenoiserConfig("S", 1.0, 0.25), 1.0),
    (DenoiserConfig("X", 3.0, 0.5), 1.0),
    (DenoiserConfig("X", 8.0, 0.5), 1.0),
    (DenoiserConfig("X", 64.0, 0.15), 1.0),
    (DenoiserConfig("X", 64.0, 0.5), 1.0),
)


# ---------------------------------------------------------------------------
# PrefixLM


def prefixlm_split(sequence: Sequence[int]) -> PrefixLMExample:
    """First floor(n/2) tokens become the input, the rest the target."""
    seq = list(sequence)
    if len(seq) < 2:
        raise InputError(f"PrefixLM split needs at least 2 tokens, got {len(seq)}")
    half = len(seq) // 2
    return PrefixLMExample(seq[:half], seq[half:])


# ---------------------------------------------------------------------------
# UL2


def _span_lengths(budget: int, mean: float, rng: np.random.Generator) -> tuple[list[int], bool]:
    lengths: list[int] = []
    remaining = budget
    p = min(1.0, 1.0 / mean)
    while remaining > 0:
        if len(lengths) == Vocab.NUM_SENTINELS:
            return lengths, True
        n = int(min(rng.geometric(p), remaining))
        lengths.append(n)
        remaining -= n
    return lengths, False


def ul2_corrupt(sequence: Sequence[int], denoiser: DenoiserConfig, rng_seed: int) -> UL2Example:
    """Corrupt one sequence with a single denoiser.

    R/X: ``round(n * rate)`` tokens are covered by non-overlapping spans whose
    lengths follow a geometric law with mean ``mean_span_length`` (clipped to the
    remaining budget). Spans are replaced left to right by <s0>, <s1>, ...; the
    target is ``<s0> span0 <s1> span1 ... EOS``. At most 100 spans are drawn;
    hitting the cap sets ``truncated``.

    S: the final ``round(n * rate)`` tokens become the target and the input is
    ``[S]`` followed by the prefix.
    """
    seq = list(sequence)
    n = len(seq)
    if n < 4:
        raise InputError(f"UL2 corruption needs at least 4 tokens, got {n}")
    mode_tok = Vocab.MODE[denoiser.mode]
    budget = int(np.clip(round(n * denoiser.corruption_rate), 1, n - 1))
    if denoiser.mode == "S":
        return UL2Example("S", [mode_tok] + seq[: n - budget], seq[n - budget :])

    rng = np.random.default_rng(rng_seed)
    lengths, truncated = _span_lengths(budget, denoiser.mean_span_length, rng)
    nonnoise = n - sum(lengths)
    # Interior gaps need one kept token each; merge trailing spans until they fit.
    while len(lengths) > 1 and nonnoise < len(lengths) - 1:
        tail = lengths.pop()
        lengths[-1] += tail
    m = len(lengths)
    extra = nonnoise - (m - 1)
    bars = np.sort(rng.choice(extra + m, size=m, replace=False))
    parts = np.diff(np.concatenate([[-1], bars, [extra + m]])) - 1
    gaps = [int(g) + (1 if 0 < i < m else 0) for i, g in enumerate(parts)]

    corrupted = [mode_tok]
    target: list[int] = []
    pos = 0
    for i, span in enumerate(lengths):
        corrupted.extend(seq[pos : pos + gaps[i]])
        pos += gaps[i]
        corrupted.append(Vocab.sentinel(i))
        target.append(Vocab.sentinel(i))
        target.extend(seq[pos : pos + span])
        pos += span
    corrupted.extend(seq[pos:])
    target.append(Vocab.EOS)
    return UL2Example(denoiser.mode, corrupted, target, truncated)


def ul2_decorrupt(example: UL2Example) -> list[int]:
    """Splice target spans back over the sentinels to recover the original sequence."""
    body = example.corrupted_input[1:]
    if example.mode == "S":
        return body + list(example.target)
    spans: dict[int, list[int]] = {}
    current: int | None = None
    for tok in example.target:
        if tok == Vocab.EOS:
            break
        if Vocab.is_sentinel(tok):
            current = tok
            spans[current] = []
        elif current is not None:
            spans[current].append(tok)
    out: list[int] = []
    for tok in body:
        out.extend(spans[tok] if Vocab.is_sentinel(tok) else [tok])
    return out


def corrupted_fraction(example: UL2Example) -> float:
    original = ul2_decorrupt(example)
    kept = len(example.corrupted_input) - 1 - sum(Vocab.is_sentinel(t) for t in example.corrupted_input)
    return 1.0 - kept / len(original)


def example_seed(rng_seed: int, index: int) -> int:
    """Per-example corruption seed, independent of denoiser choice."""
    return int(np.random.SeedSequence([rng_seed, index]).generate_state(1)[0])


def ul2_mixture(
    corpus: Iterable[Sequence[int]],
    mixture: Sequence[tuple[DenoiserConfig, float]] = UL2_DEFAULT_MIXTURE,
    rng_seed: int = 0,
) -> Iterator[UL2Example]:
    """Corrupt each sequence with a denoiser drawn from the weighted mixture."""
    if not mixture:
        raise ConfigError("empty denoiser mixture")
    weights = np.array([w for _, w in mixture], dtype=np.float64)
    if np.any(weights <= 0):
        raise ConfigError("mixture weights must be positive")
    weights = weights / weights.sum()
    chooser = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x5E1EC7]))
    for i, seq in enumerate(corpus):
        k = int(chooser.choice(len(mixture), p=weights))
        yield ul2_corrupt(seq, mixture[k][0], example_seed(rng_seed, i))


# ---------------------------------------------------------------------------
# teacher sidecars


def _topk_desc(p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    probs = np.take_along_axis(p, order, axis=-1)
    return order.astype(np.int32), np.maximum(probs, np.finfo(np.float32).tiny).astype(np.float32)


def teacher_record(
    teacher: NamedCheckpoint,
    examples: Sequence[PrefixLMExample],
    k: int = 16,
    vocab_size: int = VOCAB_SIZE,
    batch_size: int = 32,
) -> list[PrefixLMExample]:
    """Attach the teacher's top-k next-token distribution to every target position.

    Position ``t`` is conditioned on the input plus targets before ``t``.
    """
    from .model import as_params, decoder_hidden, output_logits

    if teacher.arch.kind is not ArchKind.DECODER_ONLY:
        raise ConfigError("teacher must be a decoder-only checkpoint")
    if teacher.arch.decoder.vocab_size != vocab_size:
        raise ConfigError(f"teacher vocab {teacher.arch.decoder.vocab_size} != data vocab {vocab_size}")
    if k < 1:
        raise ConfigError("k must be at least 1")
    k = min(k, vocab_size)
    P = as_params(teacher)
    cfg = teacher.arch.decoder
    out: list[PrefixLMExample] = [None] * len(examples)  # type: ignore[list-item]
    by_shape: dict[tuple[int, int], list[int]] = {}
    for i, ex in enumerate(examples):
        if not ex.input_tokens:
            raise InputError("teacher_record needs a non-empty input")
        by_shape.setdefault((len(ex.input_tokens), len(ex.target_tokens)), []).append(i)
    for (n_in, n_out), idxs in by_shape.items():
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            seqs = np.array([examples[i].input_tokens + examples[i].target_tokens for i in chunk])
            logits = output_logits(P, decoder_hidden(P, cfg, seqs[:, :-1])).data
            rows = logits[:, n_in - 1 : n_in - 1 + n_out].astype(np.float64)
            rows -= rows.max(axis=-1, keepdims=True)
            p = np.exp(rows)
            p /= p.sum(axis=-1, keepdims=True)
            ids, probs = _topk_desc(p, k)
            for j, i in enumerate(chunk):
                ex = examples[i]
                out[i] = PrefixLMExample(list(ex.input_tokens), list(ex.target_tokens), TeacherTopK(ids[j], probs[j]))
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded training batch.

    For encoder-decoder batches ``enc_tokens``/``enc_lengths`` hold the input
    side; decoder-only batches leave them None. ``dec_tokens`` is what the
    decoder reads (targets shifted right behind BOS), ``targets`` what it predicts.
    """

    dec_tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    enc_tokens: np.ndarray | None = None
    enc_lengths: np.ndarray | None = None
    dec_lengths: np.ndarray | None = None
    teacher_ids: np.ndarray | None = None
    teacher_probs: np.ndarray | None = None
    teacher_mask: np.ndarray | None = None
    modes: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.dec_tokens.shape[0])

    @property
    def num_target_tokens(self) -> int:
        return int(self.loss_mask.sum())

    @property
    def num_tokens(self) -> int:
        n = int(self.dec_lengths.sum()) if self.dec_lengths is not None else self.dec_tokens.size
        if self.enc_lengths is not None:
            n += int(self.enc_lengths.sum())
        return n


def _io_pair(ex: PrefixLMExample | UL2Example) -> tuple[list[int], list[int], str]:
    if isinstance(ex, PrefixLMExample):
        return list(ex.input_tokens), list(ex.target_tokens), "prefixlm"
    return list(ex.corrupted_input), list(ex.target), ex.mode


def pack_batches(
    examples: Sequence[PrefixLMExample | UL2Example],
    batch_size: int,
    max_in: int,
    max_out: int,
) -> list[Batch]:
    """Right-pad with PAD to the longest example of each batch.

    Inputs longer than ``max_in`` and targets longer than ``max_out`` are
    truncated from the right.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        B = len(chunk)
        pairs = [_io_pair(ex) for ex in chunk]
        t_in = max(1, min(max_in, max(len(p[0]) for p in pairs)))
        t_out = max(1, min(max_out, max(len(p[1]) for p in pairs)))
        enc = np.full((B, t_in), Vocab.PAD, dtype=np.int64)
        dec = np.full((B, t_out), Vocab.PAD, dtype=np.int64)
        tgt = np.full((B, t_out), Vocab.PAD, dtype=np.int64)
        mask = np.zeros((B, t_out), dtype=np.float32)
        enc_len = np.zeros(B, dtype=np.int64)
        dec_len = np.zeros(B, dtype=np.int64)
        has_teacher = any(isinstance(e, PrefixLMExample) and e.teacher_topk is not None for e in chunk)
        t_ids = t_probs = t_mask = None
        if has_teacher:
            k = max(e.teacher_topk.ids.shape[1] for e in chunk if isinstance(e, PrefixLMExample) and e.teacher_topk is not None)
            t_ids = np.zeros((B, t_out, k), dtype=np.int64)
            t_probs = np.zeros((B, t_out, k), dtype=np.float32)
            t_mask = np.zeros((B, t_out), dtype=np.float32)
        modes = []
        for b, (ex, (inp, out, mode)) in enumerate(zip(chunk, pairs)):
            inp, out = inp[:t_in], out[:t_out]
            enc[b, : len(inp)] = inp
            tgt[b, : len(out)] = out
            dec[b, : len(out)] = [Vocab.BOS] + out[:-1]
            mask[b, : len(out)] = 1.0
            enc_len[b], dec_len[b] = len(inp), len(out)
            modes.append(mode)
            if has_teacher and isinstance(ex, PrefixLMExample) and ex.teacher_topk is not None:
                n = len(out)
                kk = ex.teacher_topk.ids.shape[1]
                t_ids[b, :n, :kk] = ex.teacher_topk.ids[:n]
                t_probs[b, :n, :kk] = ex.teacher_topk.probs[:n]
                t_mask[b, :n] = 1.0
        batches.append(Batch(dec, tgt, mask, enc, enc_len, dec_len, t_ids, t_probs, t_mask, modes))
    return batches


def pack_lm_batches(sequences: Sequence[Sequence[int]], batch_size: int, max_len: int) -> list[Batch]:
    """Causal-LM batches for decoder-only pretraining: read s[:-1], predict s[1:]."""
    batches = []
    for start in range(0, len(sequences), batch_size):
        chunk = [list(s)[: max_len + 1] for s in sequences[start : start + batch_size]]
        B = len(chunk)
        T = max(len(s) - 1 for s in chunk)
        toks = np.full((B, T), Vocab.PAD, dtype=np.int64)
        tgt = np.full((B, T), Vocab.PAD, dtype=np.int64)
        mask = np.zeros((B, T), dtype=np.float32)
        lens = np.zeros(B, dtype=np.int64)
        for b, s in enumerate(chunk):
            n = len(s) - 1
            toks[b, :n] = s[:-1]
            tgt[b, :n] = s[1:]
            mask[b, :n] = 1.0
            lens[b] = n
        batches.append(Batch(toks, tgt, mask, dec_lengths=lens, modes=["lm"] * B))
    return batches


def as_decoder_only(batch: Batch) -> Batch:
    """Rewrite an encoder-decoder batch as input+target sequences for a decoder-only model.

    Loss covers exactly the target positions, so losses are comparable with the
    encoder-decoder view of the same examples.
    """
    assert batch.enc_tokens is not None and batch.enc_lengths is not None and batch.dec_lengths is not None
    B = batch.size
    seqs = []
    for b in range(B):
        li, lo = int(batch.enc_lengths[b]), int(batch.dec_lengths[b])
        seqs.append((list(batch.enc_tokens[b, :li]) + list(batch.targets[b, :lo]), li, lo))
    T = max(len(s) for s, _, _ in seqs) - 1
    toks = np.full((B, T), Vocab.PAD, dtype=np.int64)
    tgt = np.full((B, T), Vocab.PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float32)
    lens = np.zeros(B, dtype=np.int64)
    k = None if batch.teacher_ids is None else batch.teacher_ids.shape[-1]
    t_ids = None if k is None else np.zeros((B, T, k), dtype=np.int64)
    t_probs = None if k is None else np.zeros((B, T, k), dtype=np.float32)
    t_mask = None if k is None else np.zeros((B, T), dtype=np.float32)
    for b, (s, li, lo) in enumerate(seqs):
        n = len(s) - 1
        toks[b, :n] = s[:-1]
        tgt[b, :n] = s[1:]
        mask[b, li - 1 : li - 1 + lo] = 1.0
        lens[b] = n
        if k is not None:
            t_ids[b, li - 1 : li - 1 + lo] = batch.teacher_ids[b, :lo]
            t_probs[b, li - 1 : li - 1 + lo] = batch.teacher_probs[b, :lo]
            t_mask[b, li - 1 : li - 1 + lo] = batch.teacher_mask[b, :lo]
    return Batch(toks, tgt, mask, dec_lengths=lens, teacher_ids=t_ids, teacher_probs=t_probs, teacher_mask=t_mask, modes=list(batch.modes))


# ---------------------------------------------------------------------------
# corpus


def read_corpus(paths: Sequence[str | Path]) -> list[str]:
    lines: list[str] = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            lines.extend(line.rstrip("\n") for line in fh if line.strip())
    return lines


def chunk_corpus(lines: Sequence[str], seq_len: int) -> list[list[int]]:
    """Concatenate byte-tokenized lines (EOS after each) and cut fixed-length windows."""
    stream: list[int] = []
    for line in lines:
        stream.extend(Vocab.encode(line))
        stream.append(Vocab.EOS)
    return [stream[i : i + seq_len] for i in range(0, len(stream) - seq_len + 1, seq_len)]


def synthetic_corpus(n_tokens: int, seed: int = 0, n_topics: int = 8, words_per_topic: int = 60) -> list[str]:
    """Topic-conditioned Markov text over a random pseudo-word lexicon.

    Each line draws a topic; words come from that topic's bigram chain mixed
    with shared function words. Predicting the later part of a line benefits
    from seeing the earlier part, which gives the encoder something to carry.
    """
    rng = np.random.default_rng(seed)
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))

    def word() -> str:
        return "".join(rng.choice(letters, size=int(rng.integers(2, 8))))

    shared = [word() for _ in range(12)]
    topics = [[word() for _ in range(words_per_topic)] for _ in range(n_topics)]
    succ = []
    for _ in range(n_topics):
        nxt = rng.integers(0, words_per_topic, size=(words_per_topic, 4))
        prob = rng.dirichlet(np.full(4, 0.5), size=words_per_topic)
        succ.append((nxt, prob))

    lines: list[str] = []
    total = 0
    while total < n_tokens:
        t = int(rng.integers(n_topics))
        nxt, prob = succ[t]
        w = int(rng.integers(words_per_topic))
        out = []
        for _ in range(int(rng.integers(8, 20))):
            if rng.random() < 0.2:
                out.append(shared[int(rng.integers(len(shared)))])
            out.append(topics[t][w])
            w = int(nxt[w, rng.choice(4, p=prob[w])])
        line = " ".join(out) + "."
        lines.append(line)
        total += len(line) + 1
    return lines


# ---------------------------------------------------------------------------
# prepared-dataset record files
#
#   header : b"EDDS" u32 version
#   record : u32 nbytes (of the rest of the record)
#            u8 mode (0 prefixlm, 1 R, 2 S, 3 X)
#            u32 n_in, u32 n_out, n_in x u32 ids, n_out x u32 ids
#            u8 has_sidecar [u32 k, n_out*k x u32 ids, n_out*k x f32 probs]
#   all integers little-endian

DATASET_MAGIC = b"EDDS"
DATASET_VERSION = 1


def _encode_record(ex: PrefixLMExample | UL2Example) -> bytes:
    inp, out, mode = _io_pair(ex)
    parts = [
        struct.pack("<BII", MODE_CODES[mode], len(inp), len(out)),
        np.asarray(inp, dtype="<u4").tobytes(),
        np.asarray(out, dtype="<u4").tobytes(),
    ]
    side = ex.teacher_topk if isinstance(ex, PrefixLMExample) else None
    if side is None:
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BI", 1, side.ids.shape[1]))
        parts.append(np.asarray(side.ids, dtype="<u4").tobytes())
        parts.append(np.asarray(side.probs, dtype="<f4").tobytes())
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def write_records(path: str | Path, examples: Iterable[PrefixLMExample | UL2Example]) -> int:
    n = 0
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<I", DATASET_VERSION))
        for ex in examples:
            fh.write(_encode_record(ex))
            n += 1
    tmp.replace(path)
    return n


def read_records(path: str | Path) -> list[PrefixLMExample | UL2Example]:
    buf = Path(path).read_bytes()
    if len(buf) < 8 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a prepared dataset (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    pos, out = 8, []
    while pos < len(buf):
        if pos + 4 > len(buf):
            raise FormatError(f"{path}: truncated record header at byte {pos}")
        (nbytes,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + nbytes
        if end > len(buf) or nbytes < 10:
            raise FormatError(f"{path}: truncated record at byte {pos}")
        code, n_in, n_out = struct.unpack_from("<BII", buf, pos)
        p = pos + 9
        need = p + 4 * (n_in + n_out) + 1
        if need > end or code not in CODE_MODES:
            raise FormatError(f"{path}: malformed record at byte {pos}")
        inp = np.frombuffer(buf, "<u4", n_in, p).astype(int).tolist()
        p += 4 * n_in
        tgt = np.frombuffer(buf, "<u4", n_out, p).astype(int).tolist()
        p += 4 * n_out
        has_side = buf[p]
        p += 1
        mode = CODE_MODES[code]
        if mode == "prefixlm":
            side = None
            if has_side:
                (k,) = struct.unpack_from("<I", buf, p)
                p += 4
                if p + 8 * n_out * k != end:
                    raise FormatError(f"{path}: sidecar size mismatch at byte {pos}")
                ids = np.frombuffer(buf, "<u4", n_out * k, p).astype(np.int32).reshape(n_out, k)
                p += 4 * n_out * k
                probs = np.frombuffer(buf, "<f4", n_out * k, p).astype(np.float32).reshape(n_out, k)
                p += 4 * n_out * k
                side = TeacherTopK(ids, probs)
            out.append(PrefixLMExample(inp, tgt, side))
        else:
            out.append(UL2Example(mode, inp, tgt))
        if p != end:
            raise FormatError(f"{path}: record length mismatch at byte {pos}")
        pos = end
    return out
