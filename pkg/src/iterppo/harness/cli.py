"""`iterppo` command-line driver."""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from ..env_synthetic import enumerate_env
from ..iterate import (
    IterationRecord,
    LoopState,
    ab_compare,
    collect_batch,
    has_converged,
    iter_dir,
    load_loop_state,
    outcome_rate,
    run_iteration,
)
from ..oracle import exact_policy_evaluation, value_iteration
from ..policy import PolicyParams, policy_matrix
from ..q_eval import QFeaturizer, QFunction, build_eval_dataset, fit_q
from ..single_turn_ppo import build_prompt, ppo_improve
from . import checks
from .config import ConfigError, ExperimentConfig, canonical_json, load_config, parse_config
from .io import HarnessIOError, RunLocked, RunManifest, atomic_write, read_trajectories, run_lock, write_table, write_trajectories

ITERATION_COLUMNS = (
    "iteration",
    "episodes",
    "outcome_rate",
    "value_estimate",
    "oracle_value",
    "oracle_value_next",
    "q_delta",
    "policy_delta",
    "q_holdout_rmse",
    "q_sup_error_estimate",
    "oracle_q_error",
    "ppo_mean_kl",
    "ppo_local_improvement_rate",
    "ppo_slack_proxy",
    "ppo_diverged",
)


class CliError(RuntimeError):
    """Bad invocation or missing input; exits with status 2."""


def _pkg_version(name: str) -> str:
    try:
        return version(name)
    except PackageNotFoundError:
        return "unknown"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON); defaults to the shipped toy-shop file")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--run-id", default="default", help="outputs go to RUNS_DIR/RUN_ID")
    common.add_argument("--runs-dir", type=Path, default=None, help="root for run directories (env IPPO_RUNS_DIR, default ./runs)")
    common.add_argument("--episodes", type=int, help="episodes per batch / per arm")

    p = argparse.ArgumentParser(prog="iterppo", description="Iterative PPO on synthetic suggested-response environments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{collect,fit-q,ppo,iterate,oracle,ab-test,verify}")

    c = sub.add_parser("collect", parents=[common], help="roll out a policy and log trajectories")
    c.add_argument("--policy", type=Path, help="policy checkpoint (default: the config's starting policy)")

    f = sub.add_parser("fit-q", parents=[common], help="fit Q from the run's logged trajectories")
    f.add_argument("--featurizer", choices=("tabular", "signature"))

    pp = sub.add_parser("ppo", parents=[common], help="one PPO improvement step against the run's fitted Q")
    pp.add_argument("--policy", type=Path)

    it = sub.add_parser("iterate", parents=[common], help="run the full collect / fit / improve loop")
    it.add_argument("--iterations", type=int, default=10)
    it.add_argument("--resume", nargs="?", const=True, default=None, metavar="RUN_ID", help="continue from the last persisted iteration")
    it.add_argument("--oracle-q", action="store_true", help="use the exact Q of each policy instead of the fitted one")

    sub.add_parser("oracle", parents=[common], help="enumerate the environment and solve it exactly")

    ab = sub.add_parser("ab-test", parents=[common], help="simulated A/B test between two policies")
    ab.add_argument("--policy-a", type=Path)
    ab.add_argument("--policy-b", type=Path)

    v = sub.add_parser("verify", parents=[common], help="run the theorem-check suite; nonzero exit on any failure")
    v.add_argument("--iterations", type=int, default=3, help="oracle-Q loop iterations")
    return p


# --- helpers --------------------------------------------------------------------------------


def _runs_dir(args) -> Path:
    return args.runs_dir or Path(os.environ.get("IPPO_RUNS_DIR", "runs"))


def _config(args, run_dir: Path | None = None) -> ExperimentConfig:
    saved = None if run_dir is None else run_dir / "config.json"
    if saved is not None and saved.exists() and args.config is None:
        cfg = parse_config(json.loads(saved.read_text()))
    else:
        cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.episodes is not None and args.command != "ab-test":
        over.setdefault("loop", {})["episodes"] = args.episodes
    if over:
        raw = json.loads(json.dumps(cfg.raw))
        for k, v in over.items():
            raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
        cfg = parse_config(raw)
    return cfg


def _prepare_run(run_dir: Path, cfg: ExperimentConfig) -> None:
    """Persist the config; an existing run must have been started with identical bytes."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    if path.exists():
        if path.read_bytes() != cfg.canonical_bytes:
            raise CliError(f"{path} differs from the requested config; use a new --run-id")
    else:
        atomic_write(path, cfg.canonical_bytes)


def _manifest(run_id: str, cfg: ExperimentConfig, records: Sequence[str]) -> RunManifest:
    return RunManifest(
        run_id=run_id,
        config_hash=cfg.hash,
        seeds={"master": cfg.seed, "policy_init": cfg.policy.seed, "env": cfg.env.seed},
        module_versions={"iterppo": __version__, "numpy": np.__version__, "scipy": _pkg_version("scipy")},
        records=list(records),
    )


def _policy(path: Path | None, cfg: ExperimentConfig) -> PolicyParams:
    if path is None:
        return cfg.policy.build(cfg.env)
    if not path.exists():
        raise CliError(f"missing policy checkpoint {path}")
    return PolicyParams.load(path)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


# --- subcommands ----------------------------------------------------------------------------


def cmd_collect(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    policy = _policy(args.policy, cfg)
    n = cfg.loop.episodes
    trajs = collect_batch(cfg.env, policy, n, cfg.seed, stream=(0,))
    write_trajectories(run_dir / "trajectories.jsonl", trajs)
    rate = outcome_rate(trajs)
    write_table(run_dir / "collect.tsv", [{"episodes": n, "behavior_tag": policy.tag, "outcome_rate": rate, "mean_length": float(np.mean([len(t) for t in trajs]))}])
    return f"collect: {n} episodes, outcome rate {rate:.4f} -> {run_dir / 'trajectories.jsonl'}"


def cmd_fit_q(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    trajs = read_trajectories(_need(run_dir / "trajectories.jsonl", "trajectory log (run `collect` first)"))
    data = build_eval_dataset(trajs, cfg.env.mdp.discount)
    feat = QFeaturizer.for_env(cfg.env, args.featurizer or cfg.loop.q_featurizer)
    q = fit_q(data, feat, cfg.loop.ridge, cfg.loop.holdout, seed=cfg.seed)
    q.save(run_dir / "q.json")
    write_trajectories(run_dir / "eval_dataset.jsonl", trajs, data)
    rep = q.fit_report
    write_table(run_dir / "q_fit.tsv", [{"featurizer": feat.kind, **rep.__dict__}])
    return f"fit-q: {rep.row_count} rows, holdout rmse {rep.holdout_rmse:.4f}, max holdout residual {rep.sup_error_estimate:.4f}"


def cmd_ppo(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    trajs = read_trajectories(_need(run_dir / "trajectories.jsonl", "trajectory log (run `collect` first)"))
    q = QFunction.load(_need(run_dir / "q.json", "Q checkpoint (run `fit-q` first)"))
    policy = _policy(args.policy, cfg)
    prompts = [build_prompt(t.state) for traj in trajs for t in traj]
    new, stats = ppo_improve(policy, prompts, q, cfg.loop.ppo, seed=np.random.SeedSequence(cfg.seed, spawn_key=(0, 3)))
    new.save(run_dir / "policy_ppo.json")
    write_table(run_dir / "ppo_epochs.tsv", list(stats.epochs), ("epoch", "objective", "kl", "kl_reverse", "reverted"))
    write_table(run_dir / "ppo.tsv", [stats.summary()])
    return f"ppo: objective {stats.objective_before:.4f} -> {stats.objective_after:.4f}, KL {stats.mean_kl:.4f}, local improvement {stats.local_improvement_rate:.3f}"


def _iteration_row(r: IterationRecord) -> dict:
    return {
        "iteration": r.iteration,
        "episodes": r.episodes,
        "outcome_rate": r.outcome_rate,
        "value_estimate": r.value_estimate,
        "oracle_value": r.oracle_value,
        "oracle_value_next": r.oracle_value_next,
        "q_delta": r.q_delta,
        "policy_delta": r.policy_delta,
        "q_holdout_rmse": r.q_fit.get("holdout_rmse"),
        "q_sup_error_estimate": r.q_fit.get("sup_error_estimate"),
        "oracle_q_error": r.oracle_q_error,
        "ppo_mean_kl": r.ppo.get("mean_kl"),
        "ppo_local_improvement_rate": r.ppo.get("local_improvement_rate"),
        "ppo_slack_proxy": r.ppo.get("optimization_slack_proxy"),
        "ppo_diverged": r.ppo.get("diverged"),
    }


def _write_iteration_metrics(run_dir: Path, records: Sequence[IterationRecord]) -> None:
    write_table(run_dir / "metrics" / "iterations.tsv", [_iteration_row(r) for r in records], ITERATION_COLUMNS)
    epochs = []
    for r in records:
        path = iter_dir(run_dir, r.iteration) / "ppo_epochs.json"
        for e in json.loads(path.read_text()):
            epochs.append({"iteration": r.iteration, **e})
    write_table(run_dir / "metrics" / "ppo_epochs.tsv", epochs, ("iteration", "epoch", "objective", "kl", "kl_reverse", "reverted"))
    write_table(run_dir / "plots" / "outcome_rate_vs_iteration.tsv", [{"iteration": r.iteration, "outcome_rate": r.outcome_rate} for r in records])
    write_table(
        run_dir / "plots" / "value_vs_iteration.tsv",
        [{"iteration": r.iteration, "oracle_value": r.oracle_value, "value_estimate": r.value_estimate} for r in records],
    )


def cmd_iterate(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    if args.oracle_q:
        raw = json.loads(json.dumps(cfg.raw))
        raw.setdefault("loop", {})["q_mode"] = "oracle"
        cfg = parse_config(raw)
    existing = iter_dir(run_dir, 0).exists()
    if existing and not args.resume:
        raise CliError(f"{run_dir} already has iterations; pass --resume to continue it")
    _prepare_run(run_dir, cfg)
    state = load_loop_state(run_dir, cfg.env, cfg.loop, cfg.seed, cfg.policy.build(cfg.env))
    state.enum = enumerate_env(cfg.env)
    done = state.iteration
    while state.iteration < args.iterations:
        run_iteration(state)
        _write_iteration_metrics(run_dir, state.records)
        _manifest(args.run_id, cfg, [f"iter_{r.iteration}/record.json" for r in state.records]).save(run_dir)
        if len(state.records) >= 2 and has_converged(state.records, cfg.loop.converge_tol):
            break
    if state.records:
        _write_iteration_metrics(run_dir, state.records)
        _manifest(args.run_id, cfg, [f"iter_{r.iteration}/record.json" for r in state.records]).save(run_dir)
    last = state.records[-1] if state.records else None
    ran = state.iteration - done
    if last is None:
        return "iterate: nothing to do"
    return f"iterate: ran {ran} iteration(s), {state.iteration} total; last outcome rate {last.outcome_rate:.4f}, exact V(next) {last.oracle_value_next:.4f}"


def cmd_oracle(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    enum = enumerate_env(cfg.env)
    opt = value_iteration(enum.mdp)
    pol = cfg.policy.build(cfg.env)
    pe = exact_policy_evaluation(enum.mdp, policy_matrix(pol, enum))
    enum.mdp.save(run_dir / "mdp.json")
    s0 = enum.mdp.initial
    rows = [
        {"state": s, "label": repr(enum.keys[s]), "v_star": float(opt.V[s]), "v_start_policy": float(pe.V[s])}
        for s in range(enum.n_states)
    ]
    write_table(run_dir / "oracle_states.tsv", rows)
    summary = {"states": enum.n_states, "responses": len(enum.responses), "v_star": opt.value_at(enum.mdp, s0), "v_start_policy": pe.value_at(enum.mdp, s0)}
    write_table(run_dir / "oracle.tsv", [summary])
    return f"oracle: {enum.n_states} states, V*(s0)={summary['v_star']:.5f}, V^pi0(s0)={summary['v_start_policy']:.5f}"


def _latest_policy(run_dir: Path) -> Path | None:
    i = 0
    while iter_dir(run_dir, i + 1).exists():
        i += 1
    path = iter_dir(run_dir, i) / "next_policy.json"
    return path if path.exists() else None


def cmd_ab(args, run_dir: Path, cfg: ExperimentConfig) -> str:
    a = _policy(args.policy_a, cfg)
    b_path = args.policy_b or _latest_policy(run_dir)
    if b_path is None:
        raise CliError("no --policy-b given and the run has no iterations")
    b = _policy(b_path, cfg)
    n = args.episodes or cfg.ab.episodes_per_arm
    rep = ab_compare(cfg.env, a, b, n, cfg.seed)
    write_table(run_dir / "ab.tsv", [rep.to_dict()])
    return f"ab-test: rate A {rep.rate_a:.4f}, rate B {rep.rate_b:.4f}, diff {rep.difference:+.4f}, 95% CI [{rep.ci_low:+.4f}, {rep.ci_high:+.4f}]"


def cmd_verify(args, run_dir: Path, cfg: ExperimentConfig) -> tuple[str, bool]:
    out = run_dir / "verify"
    policy = cfg.policy.build(cfg.env)
    results = [
        checks.gradient_fidelity(cfg.env, seed=cfg.seed, out_dir=out),
        checks.bellman_check(cfg.env, policy, out_dir=out),
        checks.pdl_check(cfg.env, seed=cfg.seed, policy=policy, out_dir=out),
        checks.theorem2_check(seed=cfg.seed, out_dir=out),
        checks.oracle_q_improvement(cfg, iterations=args.iterations, out_dir=out),
    ]
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    msg = f"verify: {len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else "")
    return msg, not failed


COMMANDS = {
    "collect": cmd_collect,
    "fit-q": cmd_fit_q,
    "ppo": cmd_ppo,
    "iterate": cmd_iterate,
    "oracle": cmd_oracle,
    "ab-test": cmd_ab,
    "verify": cmd_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "iterate" and isinstance(args.resume, str):
        args.run_id = args.resume
    run_dir = _runs_dir(args) / args.run_id
    try:
        cfg = _config(args, run_dir)
        with run_lock(run_dir):
            if args.command != "iterate":
                _prepare_run(run_dir, cfg)
            out = COMMANDS[args.command](args, run_dir, cfg)
    except RunLocked as exc:
        print(f"iterppo: {exc}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, HarnessIOError) as exc:
        print(f"iterppo: error: {exc}", file=sys.stderr)
        return 2
    ok = True
    if isinstance(out, tuple):
        out, ok = out
    print(out)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
