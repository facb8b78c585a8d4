"""Abortion-attitude population study.

Needs the 379 x 4 binary data file (not shipped):
    python scripts/run_setting1.py --data abortion.csv --n 50 100 --coverage
"""

import argparse
import logging
import time

import numpy as np

from latentweights.data import ItemResponseMatrix
from latentweights.diagnostics import cronbach_alpha, margin_residuals
from latentweights.latent import fit_2pl_em
from latentweights.simulation import (
    MonteCarloOptions, build_population_abortion, load_abortion_csv, run_monte_carlo,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True)
    ap.add_argument("--n", type=int, nargs="+", default=[50, 100])
    ap.add_argument("--M", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=2026)
    ap.add_argument("--coverage", action="store_true")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    y = load_abortion_csv(args.data)
    mat = ItemResponseMatrix(y.astype(int))
    fit = fit_2pl_em(mat)
    pop = build_population_abortion(args.data, seed=args.seed)
    two = [c.R for c in margin_residuals(mat, fit, 2)]
    three = [c.R for c in margin_residuals(mat, fit, 3)]
    print(f"N={pop.N}  Y_2={pop.total:.0f}  mean p={pop.p.mean():.3f}  "
          f"alpha={cronbach_alpha(mat):.3f}  corr(theta, y2)={np.corrcoef(pop.theta, y[:, 1])[0, 1]:.3f}")
    print(f"expected item nonresponse %: {(100 * (1 - pop.q.mean(axis=0))).round(1).tolist()}")
    print(f"margin residuals: two-way {min(two):.2f}-{max(two):.2f}, "
          f"three-way {min(three):.2f}-{max(three):.2f}")

    opts = MonteCarloOptions(coverage=args.coverage, threads=args.threads)
    for n in args.n:
        t0 = time.perf_counter()
        res = run_monte_carlo(None, n, args.M, args.seed, opts, population=pop)
        print(f"n={n}  M={res.M}  ({time.perf_counter() - t0:.0f}s)")
        for row in res.rows():
            print(f"  {row['estimator']:8}{row['B']:9.2f}{100 * row['RB']:8.1f}%"
                  f"{row['sqrt_var']:9.2f}{row['MSE']:11.1f}")
        if args.coverage:
            print(f"  coverage {100 * res.metrics['pq'].coverage:.1f}%  "
                  f"mean sqrt(V) {res.mean_sqrt_vhat:.1f}")


if __name__ == "__main__":
    main()
