"""Bidirectional vs causal encoder self-attention after balanced adaptation."""

import argparse
import json
from dataclasses import replace

from encdec_adapt.experiments import DeskSetup, build_bases, encoder_mask_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=120)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=15)
    ap.add_argument("--corpus-tokens", type=int, default=DeskSetup.corpus_tokens)
    args = ap.parse_args()
    setup = replace(DeskSetup(), corpus_tokens=args.corpus_tokens)
    res = encoder_mask_ablation(build_bases(setup).base, args.steps, args.seed, setup, args.eval_every)
    print(json.dumps({"losses": res.losses, "lower": res.better, "curves": res.curves}, indent=2))


if __name__ == "__main__":
    main()
