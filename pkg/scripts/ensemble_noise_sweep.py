#!/usr/bin/env python3
"""How much does the two-step ensemble gain over its members as they get noisier?

For each oracle noise level, runs the two-step pipeline with each of
three NoisyOracle members alone and with all three together, then
reports region Dice. Everything is in memory; no files are written.

    python3 scripts/ensemble_noise_sweep.py --dims 160,160,128 --noise 1.5 2.0 2.5
"""

import argparse
import time

from segtool.ensemble import EnsembleConfig, two_step_ensemble
from segtool.metrics import evaluate_case
from segtool.phantom import make_phantom
from segtool.predictors import NoisyOraclePredictor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", default="160,200,144")
    ap.add_argument("--noise", type=float, nargs="+", default=[1.5, 2.0, 2.5])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tta", default="flip,zoom")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    dims = tuple(int(d) for d in args.dims.split(","))
    tta = tuple(t for t in args.tta.split(",") if t)
    image, labels = make_phantom(dims, seed=args.seed)

    print(f"{'noise':>5}  {'member':<10} {'ET':>6} {'TC':>6} {'WT':>6}")
    for noise in args.noise:
        members = [NoisyOraclePredictor(labels, noise_std=noise, seed=args.seed * 100 + k) for k in range(3)]
        runs = [(f"oracle{k}", [m]) for k, m in enumerate(members)] + [("ensemble", members)]
        for name, preds in runs:
            t0 = time.perf_counter()
            res = two_step_ensemble(image, EnsembleConfig(preds, tta=tta, jobs=args.jobs))
            d = evaluate_case(name, res.labels, labels).dice
            print(f"{noise:>5.2f}  {name:<10} {d['ET']:>6.2f} {d['TC']:>6.2f} {d['WT']:>6.2f}"
                  f"   ({time.perf_counter() - t0:.1f} s)", flush=True)


if __name__ == "__main__":
    main()
