"""Ten fitted-Q iterations on toy-shop, then an A/B test of the first policy against the last.

Prints exact values per iteration as they finish and writes the iteration
checkpoints plus metric tables under --out (default runs/reference).

    python3 scripts/reference_run.py --iterations 10
"""

import argparse
from pathlib import Path

from iterppo.harness import checks
from iterppo.harness.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--out", type=Path, default=Path("runs/reference"))
    ap.add_argument("--skip-ab", action="store_true", help="stop after the loop")
    args = ap.parse_args()

    cfg = load_config()
    args.out.mkdir(parents=True, exist_ok=True)
    print("iter\tV(pi_i)\tV(pi_i+1)\toutcome_rate\tq_delta\tpolicy_delta")

    def show(rec):
        qd = "-" if rec.q_delta is None else f"{rec.q_delta:.4f}"
        print(f"{rec.iteration}\t{rec.oracle_value:.4f}\t{rec.oracle_value_next:.4f}\t{rec.outcome_rate:.4f}\t{qd}\t{rec.policy_delta:.4f}", flush=True)

    run = checks.reference_run(cfg, args.iterations, run_dir=args.out, on_record=show)
    print(checks.convergence(run, out_dir=args.out / "metrics").line())
    if not args.skip_ab:
        print(checks.ab_detection(cfg, run.policies[0], run.policies[-1], out_dir=args.out / "metrics").line())


if __name__ == "__main__":
    main()
