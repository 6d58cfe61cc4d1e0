"""Balanced adaptation vs training from scratch on the desk corpus.

Prints one JSON line per seed with both eval-loss curves and the step ratio.
"""

import argparse
import json
from dataclasses import replace

from encdec_adapt.experiments import DeskSetup, build_bases, convergence_trial


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--eval-every", type=int, default=15)
    ap.add_argument("--corpus-tokens", type=int, default=DeskSetup.corpus_tokens)
    ap.add_argument("--base-steps", type=int, default=DeskSetup.base_steps)
    args = ap.parse_args()
    setup = replace(DeskSetup(), corpus_tokens=args.corpus_tokens, base_steps=args.base_steps, teacher_steps=args.base_steps)
    bases = build_bases(setup)
    print(json.dumps({"bases_seconds": round(bases.seconds, 1), "base_final_eval": bases.base_curve[-1].eval_loss}))
    for seed in range(args.seeds):
        print(json.dumps(convergence_trial(bases.base, seed, args.steps, setup, args.eval_every).to_dict()), flush=True)


if __name__ == "__main__":
    main()
