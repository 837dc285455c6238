"""Layer-wise reconstruction loss of RTN, GPTQ and AWQ on correlated activations.

    python3 scripts/gptq_vs_rtn.py --trials 100 --bits 3 4
"""

import argparse

import numpy as np

from moeqlab.quant import QuantSpec, awq_scale_search, dequantize, gptq_quantize, hessian, quant_loss, rtn_quantize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--bits", type=int, nargs="+", default=[3, 4])
    ap.add_argument("--tokens", type=int, default=64)
    ap.add_argument("--dim", type=int, default=16)
    args = ap.parse_args()

    mix = np.random.default_rng(0).standard_normal((args.dim, args.dim))
    for bits in args.bits:
        spec = QuantSpec(bits)
        losses = np.zeros((args.trials, 3))
        for t in range(args.trials):
            rng = np.random.default_rng(1000 + t)
            x = rng.standard_normal((args.tokens, args.dim)) @ mix
            w = rng.standard_normal((args.dim, args.dim))
            losses[t] = (
                quant_loss(w, dequantize(rtn_quantize(w, spec)), x),
                quant_loss(w, dequantize(gptq_quantize(w, hessian(x), spec)), x),
                awq_scale_search(w, x, spec).loss,
            )
        mean = losses.mean(axis=0)
        print(f"{bits}-bit  rtn {mean[0]:10.3f}  gptq {mean[1]:10.3f}  awq {mean[2]:10.3f}  "
              f"gptq<=rtn {int(np.sum(losses[:, 1] <= losses[:, 0]))}/{args.trials}")


if __name__ == "__main__":
    main()
