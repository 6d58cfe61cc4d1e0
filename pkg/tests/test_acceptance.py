"""Acceptance criteria, one test each. Every test reports a PASS/FAIL line before asserting."""

import json
import time

import numpy as np
import pytest

from acceptance_report import report
from cases import decoder_loss_case, encdec_loss_case, primitive_case
from encdec_adapt import autodiff as ad
from encdec_adapt.checkpoint import init_checkpoint, is_xattn
from encdec_adapt.config import FULL_PRESETS, ArchSpec, MaskKind, arch_from_preset, preset
from encdec_adapt.data import DenoiserConfig, corrupted_fraction, prefixlm_split, ul2_corrupt, ul2_decorrupt, UL2_DEFAULT_MIXTURE
from encdec_adapt.errors import FormatError, ValidationError
from encdec_adapt.evalbench import estimate_flops, greedy_decode
from encdec_adapt.experiments import (
    DeskSetup,
    build_bases,
    convergence_trial,
    encoder_mask_ablation,
    seeds_passing,
    summarize_curve,
    warmup_trial,
)
from encdec_adapt.model import count_params, decoder_only_hidden, encdec_forward, encoder_hidden
from encdec_adapt.pipeline import make_batches
from encdec_adapt.serialization import load_checkpoint, read_manifest, save_checkpoint
from encdec_adapt.surgery import AdaptationPlan, Mode, adapt_balanced, adapt_unbalanced, expand_gqa_to_mha
from encdec_adapt.trainer import OptimizerState, TrainSchedule, ce_loss, kd_loss, train_step

import oracles

SEEDS = range(20)
SETUP = DeskSetup()


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for kind in ad.primitive_kinds():
        worst[kind] = max(ad.grad_check(*primitive_case(kind, np.random.default_rng(s)), epsilon=1e-3) for s in SEEDS)
    worst["decoder-only 2L"] = max(ad.grad_check(*decoder_loss_case(s), epsilon=1e-4) for s in SEEDS)
    worst["encdec 1+1L"] = max(ad.grad_check(*encdec_loss_case(s), epsilon=1e-4) for s in SEEDS)
    secs = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and secs < 120
    report(1, "gradient fidelity", ok, f"max rel err {top:.2e} over {len(worst)} checks x 20 seeds in {secs:.0f}s")
    assert top < 1e-4, {k: v for k, v in worst.items() if v >= 1e-4}
    assert secs < 120


def test_c02_surgery_fidelity():
    t0 = time.perf_counter()
    src = init_checkpoint(ArchSpec.decoder_only(preset("S-desk")), seed=7)
    ed = adapt_balanced(src)
    enc_equal = all(np.array_equal(ed["enc." + n[4:]], src[n]) for n in src if n.startswith("dec."))
    xattn_equal = all(
        np.array_equal(ed[f"dec.{i}.xattn.{p}"], src[f"dec.{i}.attn.{p}"])
        for i in range(src.arch.decoder.num_layers)
        for p in "qkvo"
    )
    rng = np.random.default_rng(0)
    diff = max(
        np.abs(encoder_hidden(ed, t, MaskKind.CAUSAL) - decoder_only_hidden(src, t)).max()
        for t in (rng.integers(0, 362, rng.integers(1, 64)) for _ in range(20))
    )
    secs = time.perf_counter() - t0
    ok = enc_equal and xattn_equal and diff < 1e-6 and secs < 60
    report(2, "surgery fidelity", ok, f"encoder copy {enc_equal}, xattn copy {xattn_equal}, causal diff {diff:.1e}, {secs:.1f}s")
    assert ok


@pytest.mark.parametrize("layout", ["S", "B", "8q/4kv"])
def test_c03_gqa_to_mha(layout):
    cfg = preset("B-desk").replace(q_heads=8, kv_heads=4, d_head=12) if layout == "8q/4kv" else preset(layout)
    cfg = cfg.replace(max_seq=64)
    ed = adapt_balanced(init_checkpoint(ArchSpec.decoder_only(cfg), seed=3))
    mha = expand_gqa_to_mha(ed, "all")
    rng = np.random.default_rng(0)
    diff = 0.0
    for _ in range(100):
        inp, tgt = rng.integers(0, 362, rng.integers(1, 12)), rng.integers(0, 362, rng.integers(1, 8))
        diff = max(diff, float(np.abs(encdec_forward(ed, inp, tgt) - encdec_forward(mha, inp, tgt)).max()))
    report(3, f"GQA->MHA preservation ({layout})", diff < 1e-6, f"max abs diff {diff:.1e} over 100 inputs")
    assert diff < 1e-6


def test_c04_warmup_freeze():
    enc = init_checkpoint(ArchSpec.decoder_only(preset("B-desk")), seed=1)
    dec = init_checkpoint(ArchSpec.decoder_only(preset("S-desk")), seed=2)
    ck0 = adapt_unbalanced(AdaptationPlan(enc, dec, Mode.UNBALANCED, warmup_steps_K=5, init_seed=0))
    from encdec_adapt.data import chunk_corpus, synthetic_corpus

    seqs = chunk_corpus(synthetic_corpus(60_000, seed=4), 64)
    batches = make_batches(ck0.arch, seqs[:48], "prefixlm", 8, 64)
    sched = TrainSchedule(total_steps=10, lr_peak=3e-3)
    state, ck = OptimizerState(), ck0
    during = True
    for step in range(5):
        prev = ck
        ck = train_step(ck, batches[step], sched, state, step).checkpoint
        during &= all(np.array_equal(ck[n], prev[n]) != is_xattn(n) for n in ck)
    prev = ck
    ck = train_step(ck, batches[5], sched, state, 5).checkpoint
    after = all(not np.array_equal(ck[n], prev[n]) for n in ck)
    report(4, "warmup-freeze contract (K=5)", during and after, f"only xattn moved in steps 0-4: {during}; all moved at step 5: {after}")
    assert during and after


def test_c05_objective_pipelines():
    rng = np.random.default_rng(0)
    split_ok = roundtrip_ok = True
    for i in range(1000):
        seq = rng.integers(0, 256, rng.integers(2, 400)).tolist()
        ex = prefixlm_split(seq)
        split_ok &= len(ex.input_tokens) + len(ex.target_tokens) == len(seq) and len(ex.input_tokens) == len(seq) // 2
        if len(seq) >= 4:
            d = UL2_DEFAULT_MIXTURE[i % len(UL2_DEFAULT_MIXTURE)][0]
            roundtrip_ok &= ul2_decorrupt(ul2_corrupt(seq, d, i)) == seq
    r = DenoiserConfig("R", 3.0, 0.15)
    rate = float(np.mean([corrupted_fraction(ul2_corrupt(rng.integers(0, 256, 512).tolist(), r, i)) for i in range(10_000)]))
    ok = split_ok and roundtrip_ok and abs(rate - r.corruption_rate) <= 0.02
    report(5, "objective pipelines", ok, f"split {split_ok}, UL2 round trip {roundtrip_ok}, R rate {rate:.4f} vs {r.corruption_rate}")
    assert ok


def test_c06_distillation():
    rng = np.random.default_rng(0)
    V = 362
    worst = 0.0
    for _ in range(5):
        p = rng.dirichlet(np.ones(V), size=6)
        s = 3 * rng.standard_normal((6, V))
        ids = np.argsort(-p, axis=-1)
        got = kd_loss(s, ids, np.take_along_axis(p, ids, -1), rng.integers(0, V, 6), lam=1.0).item()
        worst = max(worst, abs(got - oracles.dense_kl(p, s)))
    s = rng.standard_normal((4, 9, V)).astype(np.float32)
    t = rng.integers(0, V, (4, 9))
    ids = rng.integers(0, V, (4, 9, 16))
    exact = kd_loss(s, ids, rng.random((4, 9, 16)), t, lam=0.0).item() == ce_loss(s, t).item()
    ok = worst < 1e-6 and exact
    report(6, "distillation correctness", ok, f"|kd - dense KL| max {worst:.1e}; lambda=0 equals ce exactly: {exact}")
    assert ok


def test_c09_kv_cache_equivalence(toy_decoder, toy_encdec):
    rng = np.random.default_rng(0)
    same = 0
    for ck in (toy_decoder, toy_encdec):
        for _ in range(50):
            prompt = rng.integers(0, 362, rng.integers(1, 24)).tolist()
            same += greedy_decode(ck, prompt, 16) == greedy_decode(ck, prompt, 16, use_cache=False)
    report(9, "KV-cache equivalence", same == 100, f"{same}/100 decodes identical")
    assert same == 100


def test_c10_efficiency_accounting():
    ratios = {
        n: estimate_flops(arch_from_preset(f"{n}-{n}"), 512, 512).total / estimate_flops(arch_from_preset(n), 512, 512).total
        for n in FULL_PRESETS
    }
    band = all(0.6 <= r <= 1.4 for r in ratios.values())
    conv = "exclude-embeddings-and-cross-attention"
    doubled = {n: count_params(arch_from_preset(f"{n}-{n}"), conv)["total"] == 2 * count_params(arch_from_preset(n), conv)["total"] for n in FULL_PRESETS}
    s_count = count_params(arch_from_preset("S"), conv)["total"]
    ok = band and all(doubled.values()) and s_count == 14_696_960
    detail = ", ".join(f"{n} {r:.3f}" for n, r in ratios.items()) + f"; 2x identity {all(doubled.values())}; S={s_count:,}"
    report(10, "efficiency accounting", ok, detail)
    assert ok


def test_c12_serialization(tmp_path, toy_encdec):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_encdec, path)
    back = load_checkpoint(path)
    bitwise = all(back[n].tobytes() == toy_encdec[n].tobytes() for n in toy_encdec) and list(back.tensors) == list(toy_encdec.tensors)
    raw = path.read_bytes()
    _, start, _ = read_manifest(path)
    rng = np.random.default_rng(0)
    silent, typed = 0, 0
    injections = [("truncate", int(c)) for c in rng.integers(0, len(raw), 100)]
    injections += [("flip", int(c)) for c in rng.integers(start, len(raw), 200)]
    for kind, pos in injections:
        if kind == "truncate":
            path.write_bytes(raw[:pos])
        else:
            b = bytearray(raw)
            b[pos] ^= 1 << int(rng.integers(0, 8))
            path.write_bytes(bytes(b))
        try:
            got = load_checkpoint(path)
        except (FormatError, ValidationError):
            typed += 1
            continue
        except Exception:  # any untyped failure counts as a misload
            silent += 1
            continue
        silent += not all(got[n].tobytes() == toy_encdec[n].tobytes() for n in toy_encdec)
    ok = bitwise and silent == 0
    report(12, "serialization", ok, f"round trip bitwise {bitwise}; {typed} typed errors, {silent} silent misloads in {len(injections)} injections")
    assert ok


# -- desk-scale training criteria ---------------------------------------------------------------


@pytest.fixture(scope="session")
def bases():
    return build_bases(SETUP)


def test_c07_convergence_trend(bases):
    trials = [convergence_trial(bases.base, seed, 300, SETUP, 15) for seed in range(3)]
    flags = [t.ratio <= 0.6 for t in trials]
    n = seeds_passing(flags)
    detail = "; ".join(f"seed {t.seed}: target {t.target_loss:.3f} at step {t.target_step}, adapted reach {t.adapted_reach_step} (ratio {t.ratio:.2f})" for t in trials)
    report(7, "desk convergence trend", n == 3, f"{n}/3 seeds; {detail}")
    assert n == 3


def test_c08_unbalanced_warmup(bases):
    trials = [warmup_trial(bases.teacher, bases.base, seed, 150, 5, SETUP, 15) for seed in range(3)]
    n = seeds_passing([t.warmup_wins for t in trials])
    detail = "; ".join(f"seed {t.seed}: K=5 {t.final_loss_with_warmup:.4f} vs K=0 {t.final_loss_without:.4f}" for t in trials)
    report(8, "unbalanced warmup viability", n >= 2, f"{n}/3 seeds; {detail}")
    assert n >= 2


def test_c11_causal_encoder_ablation(bases, tmp_path):
    res = encoder_mask_ablation(bases.base, 30, 0, SETUP, 15)
    recorded = set(res.losses) == {"bidirectional", "causal"} and all(len(c) == 2 for c in res.curves.values())
    differ = res.losses["bidirectional"] != res.losses["causal"]
    (tmp_path / "ablation.json").write_text(json.dumps({"losses": res.losses, "curves": res.curves}))
    detail = (f"bidirectional {res.losses['bidirectional']:.4f}, causal {res.losses['causal']:.4f}; lower: {res.better}; "
              f"curves bi [{summarize_curve(res.curves['bidirectional'])}] causal [{summarize_curve(res.curves['causal'])}]")
    report(11, "causal-encoder ablation harness", recorded and differ, detail)
    assert recorded and differ
