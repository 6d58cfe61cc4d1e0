"""Unbalanced (larger encoder, smaller decoder) adaptation with and without the cross-attention warmup."""

import argparse
import json
from dataclasses import asdict, replace

from encdec_adapt.experiments import DeskSetup, build_bases, warmup_trial


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--eval-every", type=int, default=15)
    ap.add_argument("--corpus-tokens", type=int, default=DeskSetup.corpus_tokens)
    args = ap.parse_args()
    setup = replace(DeskSetup(), corpus_tokens=args.corpus_tokens)
    bases = build_bases(setup)
    wins = 0
    for seed in range(args.seeds):
        t = warmup_trial(bases.teacher, bases.base, seed, args.steps, args.k, setup, args.eval_every)
        wins += t.warmup_wins
        print(json.dumps({**asdict(t), "warmup_wins": t.warmup_wins}), flush=True)
    print(json.dumps({"seeds_where_warmup_wins": wins, "seeds": args.seeds}))


if __name__ == "__main__":
    main()
