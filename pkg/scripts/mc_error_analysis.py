"""Standardized errors of tabular Monte Carlo Q against exact Q on toy-shop.

For every (state, response) pair visited at least --min-count times, prints the
error in units of its own standard error. If the estimator is unbiased the
z-scores look standard normal, and the sup error is driven by the rarest pairs.

    python3 scripts/mc_error_analysis.py --episodes 50000 --seeds 0 1 2
"""

import argparse

import numpy as np

from iterppo.env_synthetic import enumerate_env
from iterppo.harness.config import load_config
from iterppo.iterate import collect_batch
from iterppo.oracle import exact_policy_evaluation
from iterppo.policy import policy_matrix
from iterppo.q_eval import QFeaturizer, build_eval_dataset, split_episodes


def analyse(cfg, enum, sol, episodes, seed, min_count):
    policy = cfg.policy.build(cfg.env)
    trajs = collect_batch(cfg.env, policy, episodes, seed, stream=(7,))
    data = build_eval_dataset(trajs, cfg.env.mdp.discount)
    feat = QFeaturizer.for_env(cfg.env, "tabular")
    train = ~split_episodes(len(trajs), cfg.loop.holdout, seed)[data.episode]
    by_col = {}
    for s, a, g, keep in zip(data.states, data.actions, data.returns, train):
        if keep:
            by_col.setdefault(feat.index(s, a), (s, a, []))[2].append(g)
    rows = []
    for s, a, gs in by_col.values():
        if len(gs) < min_count:
            continue
        gs = np.asarray(gs)
        exact = sol.Q[enum.index_of(s), feat.responses.index(a)]
        se = gs.std(ddof=1) / np.sqrt(len(gs))
        err = gs.mean() - exact
        rows.append((len(gs), err, err / se if se > 0 else 0.0))
    return np.array(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--episodes", type=int, default=50_000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--min-count", type=int, default=100)
    args = ap.parse_args()

    cfg = load_config()
    enum = enumerate_env(cfg.env)
    sol = exact_policy_evaluation(enum.mdp, policy_matrix(cfg.policy.build(cfg.env), enum))
    print("seed\tpairs\tsup_err\tcount_at_sup\tmean_z\tmean_z2\tmax_abs_z")
    for seed in args.seeds:
        r = analyse(cfg, enum, sol, args.episodes, seed, args.min_count)
        worst = np.argmax(np.abs(r[:, 1]))
        print(f"{seed}\t{len(r)}\t{abs(r[worst, 1]):.4f}\t{int(r[worst, 0])}\t{r[:, 2].mean():+.3f}\t{(r[:, 2] ** 2).mean():.3f}\t{np.abs(r[:, 2]).max():.2f}")


if __name__ == "__main__":
    main()
