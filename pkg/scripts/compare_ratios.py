"""Compare density-ratio estimators (DDR, kernel smoothing, probabilistic classification).

Prints the median source-sample MSE against the oracle ratio for each method and n.

    python scripts/compare_ratios.py --setting S1 --d 5 --n 1000 2000 --reps 20
"""
import argparse

import numpy as np

from covshift_el import data, density_ratio as dr, harness, rng


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--setting", default="S1", choices=["S1", "S2"])
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--n", type=int, nargs="+", default=[1000, 2000, 5000])
    p.add_argument("--methods", nargs="+", default=["ddr", "ks", "pc"])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    lo, hi = harness.SIM_RATIO.clamp
    oracle = lambda x: np.clip(data.true_density_ratio(args.setting, x), lo, hi)
    print(f"{'n':>6} {'method':>6} {'median_mse':>12}")
    for n in args.n:
        errs = {m: [] for m in args.methods}
        for rep in range(args.reps):
            scen = data.ScenarioConfig(args.setting, "M1", n=n, m=n // 2, d=args.d, seed=args.seed)
            ds = data.generate_dataset(scen, rng=rng.stream(args.seed, rng.PURPOSE_DATA, n, rep))
            for m in args.methods:
                model = dr.fit(m, ds, funclass_config=harness.SIM_RATIO,
                               rng=rng.stream(args.seed, rng.PURPOSE_RATIO, n, rep))
                errs[m].append(dr.source_mse(model, oracle, ds.source_x))
        for m in args.methods:
            print(f"{n:>6} {m:>6} {np.median(errs[m]):>12.4f}")


if __name__ == "__main__":
    main()
