"""Regenerate golden.npz: python tests/golden/make_golden.py

Logits are recorded from the package after the oracle cross-check below
passes; the oracle copy is kept alongside for audit.
"""

import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402
from encdec_adapt.checkpoint import init_checkpoint  # noqa: E402
from encdec_adapt.config import ArchSpec, ModelConfig  # noqa: E402
from encdec_adapt.model import decoder_only_forward, encdec_forward  # noqa: E402
from encdec_adapt.surgery import AdaptationPlan, adapt_unbalanced  # noqa: E402

GOLDEN_CFG = ModelConfig(2, 64, 128, 4, 2, 16, max_seq=64)
GOLDEN_ENC_CFG = ModelConfig(1, 24, 48, 4, 2, 8, max_seq=64)
TOKENS = np.array([257, 72, 101, 108, 108, 111, 44, 32, 119, 111, 114, 108, 100, 33, 258])
ENC_IN = np.array([5, 6, 7, 8, 9, 10])
DEC_IN = np.array([257, 11, 12, 13])


def build():
    dec = init_checkpoint(ArchSpec.decoder_only(GOLDEN_CFG), seed=0)
    enc = init_checkpoint(ArchSpec.decoder_only(GOLDEN_ENC_CFG), seed=1)
    ed = adapt_unbalanced(AdaptationPlan(enc, dec, "unbalanced", init_seed=3))
    return dec, ed


def main():
    dec, ed = build()
    lo = decoder_only_forward(dec, TOKENS)
    le = encdec_forward(ed, ENC_IN, DEC_IN)
    ro = oracles.decoder_only_logits(dec.tensors, GOLDEN_CFG.to_dict(), TOKENS)
    re = oracles.encdec_logits(ed.tensors, GOLDEN_ENC_CFG.to_dict(), GOLDEN_CFG.to_dict(), ENC_IN, DEC_IN, shared=False)
    assert np.abs(lo - ro).max() < 1e-4 and np.abs(le - re).max() < 1e-4
    np.savez(HERE / "golden.npz", decoder_only=lo, encdec=le, decoder_only_oracle=ro, encdec_oracle=re)
    print("wrote", HERE / "golden.npz")


if __name__ == "__main__":
    main()
