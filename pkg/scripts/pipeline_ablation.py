"""Held-out logit MSE of the quantized skew-forged model across the ablation grid.

Calibration sources: EBSS (tau=1.2), uniform random tokens, and ancestral
samples from the model itself. The held-out set is a separate ancestral
sample, or an EBSS set with ``--heldout ebss``. Each cell averages over
--seeds calibration draws.

    python3 scripts/pipeline_ablation.py --seeds 5 --heldout ancestral
"""

import argparse
import itertools

import numpy as np

from moeqlab.ebss import EBSSConfig, ebss_generate, random_calibration, sample_sequences
from moeqlab.model import ModelConfig, forge_model
from moeqlab.pipeline import QuantOptions, corpus_perplexity, logit_mse, quantize_model


def calibration(source, model, seed, n, length):
    if source == "ebss":
        return ebss_generate(model, EBSSConfig(4, length, n, 1.2, seed)).sequences
    if source == "random":
        return random_calibration(model.config.vocab_size, n, length, seed)
    return sample_sequences(model, n, length, seed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--skew", type=float, default=3.0)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--heldout", choices=("ancestral", "ebss"), default="ancestral")
    args = ap.parse_args()

    model = forge_model(ModelConfig(256, 16, 2, 32, 1, 8, 2, 64), args.model_seed, args.skew)
    held = calibration(args.heldout, model, 10_000, 16, 32)
    print(f"FP held-out PPL {corpus_perplexity(model, held):.2f}")
    rtn = quantize_model(model, None, QuantOptions("rtn", args.bits))
    print(f"{'rtn':>6} {'-':>5} {'-':>8}  {logit_mse(model, rtn.dequantized_weights(), held) * 1e3:8.3f}")
    for method, agq, source in itertools.product(("gptq", "awq"), (False, True), ("ebss", "random", "ancestral")):
        mse = []
        for s in range(args.seeds):
            cal = calibration(source, model, s, 16, 32)
            qm = quantize_model(model, cal, QuantOptions(method, args.bits, agq))
            mse.append(logit_mse(model, qm.dequantized_weights(), held))
        print(f"{method:>6} {'agq' if agq else '-':>5} {source:>9}  {np.mean(mse) * 1e3:8.3f}")
    print("(logit MSE x 1e3)")


if __name__ == "__main__":
    main()
