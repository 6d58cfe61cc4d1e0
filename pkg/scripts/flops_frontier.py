"""Analytic inference flops of balanced and unbalanced encoder-decoder layouts vs decoder-only."""

import argparse

from encdec_adapt.config import FULL_PRESETS, arch_from_preset
from encdec_adapt.evalbench import estimate_flops
from encdec_adapt.model import count_params


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--in-len", type=int, default=512)
    ap.add_argument("--out-len", type=int, default=512)
    args = ap.parse_args()
    rows = [(n, n) for n in FULL_PRESETS] + [("9B", "2B"), ("L", "S"), ("XL", "B")]
    print(f"{'layout':<8}{'params (no emb/xattn)':>24}{'encdec flops':>18}{'dec-only flops':>18}{'ratio':>8}")
    for enc, dec in rows:
        name = f"{enc}-{dec}"
        ed = estimate_flops(arch_from_preset(name), args.in_len, args.out_len).total
        do = estimate_flops(arch_from_preset(enc), args.in_len, args.out_len).total
        p = count_params(arch_from_preset(name), "exclude-embeddings-and-cross-attention")["total"]
        print(f"{name:<8}{p:>24,}{ed:>18.3e}{do:>18.3e}{ed / do:>8.3f}")


if __name__ == "__main__":
    main()
