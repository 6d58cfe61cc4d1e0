"""Greedy-decoding latency of randomly initialized balanced and unbalanced models."""

import argparse
import json

from encdec_adapt.checkpoint import init_checkpoint
from encdec_adapt.config import ArchSpec, preset
from encdec_adapt.data import chunk_corpus, synthetic_corpus
from encdec_adapt.evalbench import measure_latency
from encdec_adapt.surgery import AdaptationPlan, Mode, adapt_balanced, adapt_unbalanced


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--encoder", default="L-desk")
    ap.add_argument("--decoder", default="S-desk")
    ap.add_argument("--prompts", type=int, default=10)
    ap.add_argument("--prompt-len", type=int, default=64)
    ap.add_argument("--max-new", type=int, default=16)
    args = ap.parse_args()
    enc = init_checkpoint(ArchSpec.decoder_only(preset(args.encoder)), seed=0)
    dec = init_checkpoint(ArchSpec.decoder_only(preset(args.decoder)), seed=1)
    prompts = chunk_corpus(synthetic_corpus(args.prompts * args.prompt_len * 2, seed=0), args.prompt_len)[: args.prompts]
    models = {
        f"{args.encoder} decoder-only": enc,
        f"{args.encoder}-{args.encoder}": adapt_balanced(enc),
        f"{args.encoder}-{args.decoder}": adapt_unbalanced(AdaptationPlan(enc, dec, Mode.UNBALANCED)),
    }
    for name, ck in models.items():
        rep = measure_latency(ck, prompts, args.max_new)
        print(json.dumps({"model": name, "median_ms": round(rep.median_ms, 2), "p90_ms": round(rep.p90_ms, 2), "max_new": rep.max_new}))


if __name__ == "__main__":
    main()
