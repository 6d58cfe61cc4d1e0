import math

import numpy as np
import pytest

import oracles
from encdec_adapt.checkpoint import init_checkpoint
from encdec_adapt.config import FULL_PRESETS, ArchSpec, ModelConfig, arch_from_preset, preset
from encdec_adapt.data import Vocab, prefixlm_split
from encdec_adapt.errors import ContractError, InputError
from encdec_adapt.evalbench import (
    LabeledDataset,
    ProbeConfig,
    estimate_flops,
    finetune_classifier,
    greedy_decode,
    measure_latency,
    perplexity,
    shard_batches,
)
from encdec_adapt.surgery import AdaptationPlan, Mode, adapt_balanced, adapt_unbalanced


def _eos_lover(cfg):
    # Zero layers: logits are sqrt(d) * emb[t] . emb[v]; a dominant EOS row wins for every t.
    ck = init_checkpoint(ArchSpec.decoder_only(cfg.replace(num_layers=0)), seed=0)
    emb = np.abs(ck["emb.tok"])
    emb[Vocab.EOS] = 10.0
    return ck.replace({"emb.tok": emb})


# -- greedy decoding ---------------------------------------------------------


@pytest.mark.parametrize("which", ["decoder", "encdec"])
def test_cached_decode_matches_uncached(which, toy_decoder, toy_encdec):
    ck = toy_decoder if which == "decoder" else toy_encdec
    rng = np.random.default_rng(0)
    for _ in range(25):
        prompt = rng.integers(0, 362, rng.integers(1, 12)).tolist()
        assert greedy_decode(ck, prompt, 12) == greedy_decode(ck, prompt, 12, use_cache=False)


def test_max_new_one(toy_encdec):
    assert len(greedy_decode(toy_encdec, [5, 6, 7], 1)) == 1
    with pytest.raises(ContractError):
        greedy_decode(toy_encdec, [5], 0)


def test_eos_favoring_model_stops_immediately():
    ck = _eos_lover(preset("toy"))
    assert greedy_decode(ck, [1, 2, 3], 10) == [Vocab.EOS]
    assert greedy_decode(adapt_balanced(ck), [1, 2, 3], 10) == [Vocab.EOS]
    assert greedy_decode(ck, [1, 2, 3], 4, stop_at_eos=False) == [Vocab.EOS] * 4


def test_decode_rejects_bad_prompt(toy_decoder):
    with pytest.raises(InputError):
        greedy_decode(toy_decoder, [400], 3)


# -- perplexity ---------------------------------------------------------------------


def test_uniform_logits_give_vocab_perplexity(toy_decoder):
    flat = toy_decoder.replace({"emb.tok": np.zeros_like(toy_decoder["emb.tok"])})
    seqs = [list(range(i, i + 20)) for i in range(6)]
    assert abs(perplexity(flat, seqs, "prefixlm") - 362) < 1e-3
    assert abs(perplexity(adapt_balanced(flat), seqs, "ul2") - 362) < 1e-3


def test_empty_shard_rejected(toy_decoder):
    with pytest.raises(InputError):
        perplexity(toy_decoder, [])


def test_decoder_only_prefixlm_perplexity_matches_oracle(toy_decoder):
    rng = np.random.default_rng(1)
    seqs = [rng.integers(0, 256, n).tolist() for n in (9, 14, 20)]
    nll = []
    for s in seqs:
        ex = prefixlm_split(s)
        logits = oracles.decoder_only_logits(toy_decoder.tensors, toy_decoder.arch.decoder.to_dict(), np.array(s[:-1]))
        lp = oracles.log_softmax(logits)
        k = len(ex.input_tokens)
        nll += [-lp[i - 1, s[i]] for i in range(k, len(s))]
    expect = math.exp(np.mean(nll))
    assert abs(perplexity(toy_decoder, seqs, "prefixlm", batch_size=2) / expect - 1) < 1e-4


def test_shard_batches_objectives():
    seqs = [list(range(30))] * 3
    assert shard_batches(seqs, "lm")[0].enc_tokens is None
    assert shard_batches(seqs, "ul2")[0].enc_tokens is not None
    with pytest.raises(ContractError):
        shard_batches(seqs, "mlm")


# -- probe ------------------------------------------------------------------------------


def _presence_task(rng, n, random_labels=False):
    rows = []
    for _ in range(n):
        toks = rng.integers(100, 120, 10).tolist()
        y = int(rng.integers(0, 2))
        if y:
            toks[int(rng.integers(0, 10))] = 97
        rows.append((toks, int(rng.integers(0, 2)) if random_labels else y))
    return rows


PROBE = ProbeConfig(learning_rates=(1e-2,), batch_sizes=(16,), epochs=4, max_len=32)


def test_probe_learns_token_presence(toy_decoder):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(_presence_task(rng, 320), _presence_task(rng, 200))
    res = finetune_classifier(toy_decoder, ds, PROBE)
    assert res.best_accuracy >= 0.9 and res.side == "decoder"


def test_probe_random_labels_near_chance(toy_decoder):
    rng = np.random.default_rng(1)
    ds = LabeledDataset(_presence_task(rng, 160, True), _presence_task(rng, 200, True))
    res = finetune_classifier(toy_decoder, ds, PROBE)
    assert abs(res.best_accuracy - 0.5) <= 0.1


def test_probe_uses_encoder_side(toy_encdec):
    rng = np.random.default_rng(2)
    ds = LabeledDataset(_presence_task(rng, 32), _presence_task(rng, 20))
    res = finetune_classifier(toy_encdec, ds, ProbeConfig((1e-3,), (16,), 1, 32))
    assert res.side == "encoder" and res.num_classes == 2 and set(res.grid) == {"lr=0.001,bs=16"}


def test_probe_single_class_rejected(toy_decoder):
    ds = LabeledDataset([([1, 2], 0), ([3, 4], 0)], [([1], 0)])
    with pytest.raises(ContractError):
        finetune_classifier(toy_decoder, ds, PROBE)


def test_labeled_tsv(tmp_path):
    (tmp_path / "t.tsv").write_text("ab\tyes\ncd\tno\n")
    (tmp_path / "d.tsv").write_text("x\tno\n")
    ds = LabeledDataset.from_tsv(tmp_path / "t.tsv", tmp_path / "d.tsv")
    assert ds.labels == ["no", "yes"] and ds.train[0] == ([97, 98], 1) and ds.dev == [([120], 0)]


# -- flops -------------------------------------------------------------------------------


def test_flops_zero_lengths():
    assert estimate_flops(arch_from_preset("S-S"), 0, 0).total == 0
    assert estimate_flops(arch_from_preset("S"), 0, 0).total == 0


def test_flops_one_layer_hand_audit():
    cfg = ModelConfig(1, 8, 16, 2, 1, 4)
    # per token: q 8*8, k/v 2*8*4, o 8*8, ffn 3*8*8 MACs; 3 tokens; causal scores+mix halved
    proj = 2 * 3 * (64 + 64 + 64 + 192)
    attn = 2 * (2 * 2 * 4 * 3 * 3) // 2
    assert estimate_flops(ArchSpec.decoder_only(cfg), 2, 1).total == proj + attn


def test_flops_encdec_one_layer_hand_audit():
    cfg = ModelConfig(1, 8, 16, 2, 1, 4)
    ed = ArchSpec.encoder_decoder(cfg, cfg)
    rep = estimate_flops(ed, 3, 2)
    assert rep.encoder_flops == 2 * 3 * 384 + 2 * 2 * 2 * 4 * 9
    assert rep.decoder_flops == 2 * 2 * 384 + 2 * 2 * 2 * 4 * 4 // 2
    assert rep.cross_attn_flops == 2 * 2 * 2 * 64 + 2 * 3 * 2 * 8 * 4 + 2 * 2 * 2 * 4 * 6
    assert rep.total == rep.encoder_flops + rep.decoder_flops + rep.cross_attn_flops


@pytest.mark.parametrize("name", FULL_PRESETS)
def test_flops_ratio_band(name):
    ratio = estimate_flops(arch_from_preset(f"{name}-{name}"), 512, 512).total / estimate_flops(arch_from_preset(name), 512, 512).total
    assert 1.0 < ratio < 1.3


def test_encoder_flops_independent_of_output_length():
    arch = arch_from_preset("B-S")
    assert estimate_flops(arch, 128, 1).encoder_flops == estimate_flops(arch, 128, 400).encoder_flops
    with pytest.raises(ContractError):
        estimate_flops(arch, -1, 2)


# -- latency ------------------------------------------------------------------------------


def test_latency_fields_and_validation(toy_decoder):
    rep = measure_latency(toy_decoder, [[1, 2, 3]] * 4, max_new=3)
    assert rep.queries == 4 and rep.max_new == 3 and rep.batch_size == 1
    assert 0 < rep.median_ms <= rep.p90_ms
    with pytest.raises(ContractError):
        measure_latency(toy_decoder, [[1]], batch_size=2)
    with pytest.raises(ContractError):
        measure_latency(toy_decoder, [[1]], warmup=1)
    with pytest.raises(InputError):
        measure_latency(toy_decoder, [])


def test_latency_grows_with_output_length(toy_encdec):
    prompts = [[5, 6, 7, 8]] * 8
    short = measure_latency(toy_encdec, prompts, max_new=2)
    long = measure_latency(toy_encdec, prompts, max_new=24)
    assert long.median_ms > short.median_ms


def test_unbalanced_faster_than_balanced():
    big = ModelConfig(4, 128, 512, 4, 4, 32, max_seq=128)
    small = ModelConfig(1, 32, 64, 2, 2, 16, max_seq=128)
    enc = init_checkpoint(ArchSpec.decoder_only(big), seed=0)
    dec = init_checkpoint(ArchSpec.decoder_only(small), seed=1)
    balanced = adapt_balanced(enc)
    unbalanced = adapt_unbalanced(AdaptationPlan(enc, dec, Mode.UNBALANCED))
    prompts = [list(range(40, 72))] * 6
    tb = measure_latency(balanced, prompts, max_new=16).median_ms
    tu = measure_latency(unbalanced, prompts, max_new=16).median_ms
    assert tu < tb
