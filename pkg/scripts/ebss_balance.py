"""Expert balance of EBSS calibration sets against the balance-free search.

For each sampling seed, generates one calibration set per tau and reports
the routed-usage imbalance sigma and mean perplexity. tau=1e9 effectively
switches the balance term off.

    python3 scripts/ebss_balance.py --seeds 20 --taus 0.6 1.2 1e9
"""

import argparse

import numpy as np

from moeqlab.ebss import EBSSConfig, ebss_generate
from moeqlab.model import ModelConfig, forge_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--skew", type=float, default=3.0)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--taus", type=float, nargs="+", default=[0.6, 1.2, 1e9])
    ap.add_argument("--w", type=int, default=4)
    ap.add_argument("--length", type=int, default=32)
    ap.add_argument("--n", type=int, default=16, help="sequences per calibration set")
    args = ap.parse_args()

    cfg = ModelConfig(256, 16, 2, 32, 1, 8, 2, 64)
    model = forge_model(cfg, args.model_seed, args.skew)
    sigma = np.zeros((args.seeds, len(args.taus)))
    ppl = np.zeros_like(sigma)
    for s in range(args.seeds):
        for j, tau in enumerate(args.taus):
            cal = ebss_generate(model, EBSSConfig(args.w, args.length, args.n, tau, s))
            sigma[s, j], ppl[s, j] = cal.sigma, cal.mean_ppl

    print(f"{'tau':>10} {'sigma':>8} {'ppl':>8}")
    for j, tau in enumerate(args.taus):
        print(f"{tau:>10g} {sigma[:, j].mean():8.4f} {ppl[:, j].mean():8.2f}")
    ref = len(args.taus) - 1
    for j, tau in enumerate(args.taus[:-1]):
        wins = int(np.sum(sigma[:, j] < sigma[:, ref]))
        print(f"tau={tau:g} below tau={args.taus[ref]:g} in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
