"""Command-line entry point: ``encdec <subcommand> ...``.

Exit status is 0 on success, 2 for invalid flags (argparse prints usage) and 1
for runtime failures, with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import init_checkpoint
from .config import FULL_PRESETS, arch_from_preset
from .data import Vocab, chunk_corpus, read_corpus, synthetic_corpus, write_records
from .errors import EncDecError
from .evalbench import (
    LabeledDataset,
    ProbeConfig,
    estimate_flops,
    finetune_classifier,
    greedy_decode,
    measure_latency,
    perplexity,
)
from .model import CONVENTIONS, count_params
from .pipeline import (
    DataConfig,
    RunConfig,
    blob_sha1,
    make_batches,
    reproducibility_record,
    run,
    with_encoder_mask,
    write_json,
)
from .serialization import load_checkpoint, read_manifest, save_checkpoint
from .surgery import AdaptationPlan, Mode, adapt, expand_gqa_to_mha, merge_uniform

# ---------------------------------------------------------------------------
# helpers


def _record(path: str | Path | None, args: argparse.Namespace, inputs: Sequence[str], seeds: dict[str, int]) -> None:
    if path is None:
        return
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    write_json(path, reproducibility_record(cfg, inputs, seeds, args.command))


def _sidecar(out: str | Path) -> Path:
    out = Path(out)
    return out / "repro.json" if out.is_dir() else out.with_name(out.name + ".repro.json")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _sequences(args: argparse.Namespace) -> list[list[int]]:
    if args.corpus:
        lines = read_corpus(args.corpus)
    else:
        lines = synthetic_corpus(args.synthetic_tokens, seed=args.data_seed)
    return chunk_corpus(lines, args.seq_len)


def _add_data_flags(p: argparse.ArgumentParser, default_tokens: int = 200_000) -> None:
    p.add_argument("--corpus", nargs="*", default=[], help="text files, one document per line")
    p.add_argument("--synthetic-tokens", type=int, default=default_tokens, help="used when --corpus is absent")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=128)


def _prompts(args: argparse.Namespace) -> list[list[int]]:
    if args.prompts:
        return [Vocab.encode(line.rstrip("\n")) for line in open(args.prompts, encoding="utf-8") if line.strip()]
    rng = np.random.default_rng(args.seed)
    seqs = chunk_corpus(synthetic_corpus(50 * args.prompt_len * args.num_prompts, seed=args.seed), args.prompt_len)
    idx = rng.choice(len(seqs), size=min(args.num_prompts, len(seqs)), replace=False)
    return [seqs[i] for i in idx]


def param_table(arch) -> dict[str, dict[str, int]]:
    return {conv: count_params(arch, conv) for conv in CONVENTIONS}


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain_decoder(args: argparse.Namespace) -> int:
    cfg = RunConfig(
        model=args.preset,
        objectives=["lm"],
        schedule={"total_steps": args.steps, "lr_peak": args.lr, "eval_every": args.eval_every},
        data=DataConfig(
            train_paths=list(args.corpus), synthetic_tokens=0 if args.corpus else args.synthetic_tokens,
            seq_len=args.seq_len, batch_size=args.batch_size, seed=args.data_seed,
            teacher_checkpoint=args.teacher,
        ),
        seed=args.seed,
        output_dir=args.out,
        allow_huge=args.i_know_this_is_huge,
    )
    if cfg.arch().is_encdec:
        raise EncDecError("pretrain-decoder needs a decoder-only preset")
    cfg.validate()
    res = run(cfg, on_log=lambda r: print(f"step {r.step} train {r.train_loss:.4f} eval {r.eval_loss:.4f}"))
    print(f"wrote {Path(args.out) / 'checkpoint.edsg'} (eval loss {res.metrics[-1].eval_loss:.4f})")
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    enc = load_checkpoint(args.encoder_src)
    dec = load_checkpoint(args.decoder_src) if args.decoder_src else enc
    plan = AdaptationPlan(
        enc, dec, Mode(args.mode), args.warmup_k, args.seed,
        cross_attn_init_scale=args.xattn_scale, zero_init_xattn_o=args.zero_xattn_o,
    )
    out = adapt(plan)
    if args.encoder_mask:
        out = with_encoder_mask(out, args.encoder_mask)
    out.validate()
    save_checkpoint(out, args.out)
    inputs = [args.encoder_src] + ([args.decoder_src] if args.decoder_src else [])
    _record(_sidecar(args.out), args, inputs, {"init": args.seed})
    print(f"wrote {args.out}: {len(out)} tensors, {out.num_params():,} parameters")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.out_dir:
        cfg.output_dir = args.out_dir
    if args.i_know_this_is_huge:
        cfg.allow_huge = True
    cfg.validate()
    res = run(cfg, on_log=lambda r: print(f"step {r.step} [{r.objective}] train {r.train_loss:.4f} eval {r.eval_loss:.4f}"))
    print(f"final eval loss {res.metrics[-1].eval_loss:.6f}; outputs in {cfg.output_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.task == "perplexity":
        seqs = _sequences(args)[: args.max_sequences]
        batches = make_batches(ckpt.arch, seqs, args.objective, args.batch_size, args.seq_len, seed=args.seed)
        result = {"task": "perplexity", "objective": args.objective, "sequences": len(seqs),
                  "perplexity": perplexity(ckpt, batches)}
    else:
        prompts = _prompts(args)
        outs = [greedy_decode(ckpt, p, args.max_new) for p in prompts]
        result = {"task": "decode", "outputs": [{"prompt": Vocab.decode(p), "tokens": o, "text": Vocab.decode(o)}
                                               for p, o in zip(prompts, outs)]}
    _emit(result)
    _record(args.record, args, [args.checkpoint, *args.corpus], {"seed": args.seed})
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = LabeledDataset.from_tsv(args.train, args.dev)
    cfg = ProbeConfig(tuple(args.lrs), tuple(args.batch_sizes), args.epochs, args.max_len, seed=args.seed)
    with ad.deterministic():
        res = finetune_classifier(ckpt, ds, cfg)
    _emit({**asdict(res), "labels": ds.labels})
    _record(args.record, args, [args.checkpoint, args.train, args.dev], {"seed": args.seed})
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    arch = load_checkpoint(args.checkpoint).arch if args.checkpoint else arch_from_preset(args.preset)
    rep = estimate_flops(arch, args.in_len, args.out_len)
    _emit({"preset": args.preset, **rep.to_dict()})
    _record(args.record, args, [args.checkpoint] if args.checkpoint else [], {})
    return 0


def cmd_latency(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    prompts = _prompts(args)
    rep = measure_latency(ckpt, prompts, args.max_new, warmup=args.warmup)
    _emit(asdict(rep))
    _record(args.record, args, [args.checkpoint], {"seed": args.seed})
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    out = merge_uniform(load_checkpoint(args.a), load_checkpoint(args.b))
    save_checkpoint(out, args.out)
    _record(_sidecar(args.out), args, [args.a, args.b], {})
    print(f"wrote {args.out}")
    return 0


def cmd_expand_mha(args: argparse.Namespace) -> int:
    out = expand_gqa_to_mha(load_checkpoint(args.checkpoint), args.scope)
    save_checkpoint(out, args.out)
    _record(_sidecar(args.out), args, [args.checkpoint], {})
    print(f"wrote {args.out}")
    return 0


def _print_configs(arch) -> None:
    stacks = [("encoder", arch.encoder), ("decoder", arch.decoder)] if arch.is_encdec else [("decoder", arch.decoder)]
    print(f"kind: {arch.kind.value}")
    if arch.is_encdec:
        print(f"encoder_mask: {arch.encoder_mask.value}  shared_embeddings: {arch.shared_embeddings}")
    for role, c in stacks:
        print(f"{role}: layers={c.num_layers} d_model={c.d_model} d_ffn={c.d_ffn} "
              f"heads(q/kv)={c.q_heads}/{c.kv_heads} d_head={c.d_head} vocab={c.vocab_size}")


def _print_param_table(arch) -> None:
    cols = ("encoder", "decoder", "cross_attention", "embedding", "total")
    print(f"{'convention':<40}" + "".join(f"{c:>18}" for c in cols))
    for conv, counts in param_table(arch).items():
        print(f"{conv:<40}" + "".join(f"{counts[c]:>18,}" for c in cols))


def cmd_inspect(args: argparse.Namespace) -> int:
    target = args.target
    if Path(target).is_file():
        manifest, start, raw = read_manifest(target)
        ckpt = load_checkpoint(target)
        arch = ckpt.arch
        print(f"file: {target}  sha1(blob): {blob_sha1(target)}  bytes: {len(raw)}  payload offset: {start}")
        meta = {k: v for k, v in manifest["metadata"].items() if k != "arch"}
        print("metadata: " + json.dumps(meta, sort_keys=True))
        print(f"{'name':<28}{'dtype':>9}{'shape':>16}{'offset':>12}{'bytes':>12}")
        for e in manifest["tensors"]:
            print(f"{e['name']:<28}{e['dtype']:>9}{'x'.join(map(str, e['shape'])):>16}{e['offset']:>12}{e['length']:>12}")
    else:
        arch = arch_from_preset(target)
        print(f"preset: {target}")
    _print_configs(arch)
    _print_param_table(arch)
    return 0


def cmd_prep_data(args: argparse.Namespace) -> int:
    from .data import UL2_DEFAULT_MIXTURE, prefixlm_split, teacher_record, ul2_mixture

    seqs = _sequences(args)
    if args.objective == "prefixlm":
        examples = [prefixlm_split(s) for s in seqs]
        if args.teacher:
            examples = teacher_record(load_checkpoint(args.teacher), examples, k=args.topk)
    else:
        examples = list(ul2_mixture(seqs, UL2_DEFAULT_MIXTURE, args.seed))
    n = write_records(args.out, examples)
    _record(_sidecar(args.out), args, [*args.corpus, *([args.teacher] if args.teacher else [])],
            {"data": args.data_seed, "corruption": args.seed})
    print(f"wrote {n} records to {args.out}")
    return 0


def cmd_init(args: argparse.Namespace) -> int:
    ckpt = init_checkpoint(arch_from_preset(args.preset), seed=args.seed, objective="init")
    save_checkpoint(ckpt, args.out)
    _record(_sidecar(args.out), args, [], {"init": args.seed})
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="encdec", description="Decoder-only to encoder-decoder adaptation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-decoder", help="train a decoder-only base model")
    p.add_argument("--preset", default="S-desk")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher", help="decoder-only checkpoint to distill from (top-k KD)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--i-know-this-is-huge", action="store_true")
    _add_data_flags(p)
    p.set_defaults(func=cmd_pretrain_decoder)

    p = sub.add_parser("adapt", help="initialize an encoder-decoder from decoder-only checkpoints")
    p.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    p.add_argument("--encoder-src", required=True)
    p.add_argument("--decoder-src")
    p.add_argument("--warmup-k", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--xattn-scale", type=float, default=1.0)
    p.add_argument("--zero-xattn-o", action="store_true")
    p.add_argument("--encoder-mask", choices=["bidirectional", "causal"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--i-know-this-is-huge", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity or greedy decoding")
    p.add_argument("checkpoint")
    p.add_argument("--task", choices=["perplexity", "decode"], required=True)
    p.add_argument("--objective", choices=["lm", "prefixlm", "ul2"], default="prefixlm")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-sequences", type=int, default=64)
    p.add_argument("--prompts", help="text file, one prompt per line")
    p.add_argument("--num-prompts", type=int, default=4)
    p.add_argument("--prompt-len", type=int, default=32)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record")
    _add_data_flags(p, default_tokens=20_000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="last-token classifier finetuning with grid search")
    p.add_argument("checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--lrs", type=float, nargs="+", default=list(ProbeConfig.learning_rates))
    p.add_argument("--batch-sizes", type=int, nargs="+", default=list(ProbeConfig.batch_sizes))
    p.add_argument("--epochs", type=int, default=ProbeConfig.epochs)
    p.add_argument("--max-len", type=int, default=ProbeConfig.max_len)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("flops", help="analytic inference flops")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default="S", help=f"e.g. one of {list(FULL_PRESETS)} or ENC-DEC such as 2B-2B")
    g.add_argument("--checkpoint")
    p.add_argument("--in-len", type=int, required=True)
    p.add_argument("--out-len", type=int, default=0)
    p.add_argument("--record")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("latency", help="wall-clock greedy decoding latency")
    p.add_argument("checkpoint")
    p.add_argument("--prompts")
    p.add_argument("--num-prompts", type=int, default=10)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("merge", help="uniform average of two checkpoints")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("expand-mha", help="replicate GQA kv heads into full multi-head attention")
    p.add_argument("checkpoint")
    p.add_argument("--scope", choices=["encoder", "all"], default="encoder")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_expand_mha)

    p = sub.add_parser("inspect", help="print manifest, configs and parameter counts")
    p.add_argument("target", help="checkpoint file or preset name")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("prep-data", help="write objective records (optionally with teacher sidecars)")
    p.add_argument("--objective", choices=["prefixlm", "ul2"], default="prefixlm")
    p.add_argument("--teacher")
    p.add_argument("--topk", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_prep_data)

    p = sub.add_parser("init", help="write a randomly initialized checkpoint")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (EncDecError, OSError, ValueError) as e:
        print(f"encdec {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
