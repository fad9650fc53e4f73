"""How often the A=B confidence interval covers zero, across independent seeds.

Each seed runs --reps identical-arm A/B tests of the starting policy and reports
the fraction of intervals that contain 0. The nominal rate is 95%; with 500 reps
the fraction itself has a standard error near 1%, so individual seeds land below
94% fairly often.

    python3 scripts/ab_coverage.py --seeds 0 1 2 3 --reps 500 --episodes 1000
"""

import argparse

import numpy as np

from iterppo.harness.config import load_config
from iterppo.iterate import ab_compare


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--episodes", type=int, default=1000, help="episodes per arm")
    args = ap.parse_args()

    cfg = load_config()
    pi0 = cfg.policy.build(cfg.env)
    print("seed\tcoverage\tmean_difference")
    rates = []
    for seed in args.seeds:
        reps = [ab_compare(cfg.env, pi0, pi0, args.episodes, seed * 100_003 + 1 + r) for r in range(args.reps)]
        cov = np.mean([r.ci_low <= 0.0 <= r.ci_high for r in reps])
        rates.append(cov)
        print(f"{seed}\t{cov:.3f}\t{np.mean([r.difference for r in reps]):+.5f}", flush=True)
    print(f"all\t{np.mean(rates):.3f}\tbelow 0.94: {sum(r < 0.94 for r in rates)}/{len(rates)}")


if __name__ == "__main__":
    main()
