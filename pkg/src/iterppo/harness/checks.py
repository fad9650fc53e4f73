"""Numerical checks behind `verify` and the acceptance suite.

Each check returns a CheckResult with the measured quantities; when ``out_dir``
is given it also writes them as a metrics table so repeated runs can be diffed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..conv_mdp import ResponseSpace, TerminalReason
from ..env_synthetic import EnumeratedEnv, EnvConfig, EnvInstance, enumerate_env
from ..iterate import LoopConfig, LoopState, ab_compare, collect_batch, run_iteration, two_proportion_ci
from ..oracle import (
    exact_policy_evaluation,
    greedy_policy,
    kl_regularized_maximizer,
    performance_difference_check,
    random_mdp,
    random_policy,
    theorem2_bound_check,
    value_iteration,
)
from ..policy import FeatureSpec, PolicyParams, _events, init_params, logprob_gradient, policy_matrix
from ..q_eval import OracleQ, QFeaturizer, build_eval_dataset, fit_q
from ..single_turn_ppo import local_improvement_check
from .config import ExperimentConfig
from .io import write_table


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: dict[str, Any]
    rows: list[dict[str, Any]] = field(default_factory=list, repr=False)
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.summary.items())
        return f"[{tag}] {self.name}: {shown} ({self.seconds:.1f}s)"


def _fmt(v: Any) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _finish(result: CheckResult, out_dir: str | Path | None, start: float) -> CheckResult:
    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / f"{result.name}.tsv", result.rows or [result.summary])
        write_table(out / f"{result.name}_summary.tsv", [{**result.summary, "passed": result.passed}])
    return result


# --- gradients ---------------------------------------------------------------------------------


def _key_logprob(weights: np.ndarray, spec: FeatureSpec, rows: list[np.ndarray], key: int, action) -> float:
    """log pi(a | key) recomputed from scratch with an explicit per-step softmax."""
    W = weights.reshape(spec.n_rows, spec.n_events)
    total = 0.0
    for pos, (prev, e) in enumerate(_events(action, spec.vocab_size, spec.max_msg_len)):
        z = sum(W[r[key, pos, prev]] for r in rows)
        z = z - z.max()
        total += z[e] - np.log(np.exp(z).sum())
    return float(total)


def gradient_fidelity(env: EnvConfig, n_triples: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-4, out_dir=None) -> CheckResult:
    """Analytic log-prob gradients against central differences.

    Coordinates feeding the logits along the action's generation path are
    differenced one by one; three random full-vector directions cover the rest.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    spec = FeatureSpec.for_env(env, (("turn", "cmsg", "pos", "prev"), ("cclass", "pos", "prev"), ("pos", "prev")))
    rows = spec.block_rows()
    space = ResponseSpace(env.mdp.vocab_size, env.mdp.max_msg_len)
    sim = EnvInstance(env, seed)
    states = []
    while len(states) < n_triples:
        s = sim.reset()
        while not s.is_terminal:
            states.append(s)
            s = sim.step(s, space.actions[int(rng.integers(len(space)))])
    out = []
    for k in range(n_triples):
        theta = rng.normal(0.0, 1.0, spec.dim)
        params = PolicyParams(theta, spec)
        state = states[k]
        action = space.actions[int(rng.integers(len(space)))]
        key = spec.keyer.key(state)
        g = logprob_gradient(params, state, action)
        path = _events(action, spec.vocab_size, spec.max_msg_len)
        used = [r[key, pos, prev] for r in rows for pos, (prev, _) in enumerate(path)]
        touched = np.unique((np.array(used)[:, None] * spec.n_events + np.arange(spec.n_events)).ravel())
        fd = np.zeros(len(touched))
        for j, c in enumerate(touched):
            w = theta.copy()
            w[c] += h
            up = _key_logprob(w, spec, rows, key, action)
            w[c] -= 2 * h
            fd[j] = (up - _key_logprob(w, spec, rows, key, action)) / (2 * h)
        dirs = rng.standard_normal((3, spec.dim))
        fd_dir = np.array([(_key_logprob(theta + h * u, spec, rows, key, action) - _key_logprob(theta - h * u, spec, rows, key, action)) / (2 * h) for u in dirs])
        an = np.concatenate([g[touched], dirs @ g])
        num = np.concatenate([fd, fd_dir])
        rel = float(np.linalg.norm(an - num) / max(np.linalg.norm(an), np.linalg.norm(num), 1e-12))
        out.append({"triple": k, "key": key, "action": repr(action), "coords": len(touched), "rel_error": rel})
    worst = max(r["rel_error"] for r in out)
    res = CheckResult("gradient_fidelity", worst <= tol, {"triples": n_triples, "max_rel_error": worst, "tol": tol}, out)
    return _finish(res, out_dir, start)


# --- Monte Carlo evaluation -------------------------------------------------------------------


def mc_consistency(cfg: ExperimentConfig, episodes: int = 50_000, min_count: int = 100, tol: float = 0.05, enum: EnumeratedEnv | None = None, out_dir=None) -> CheckResult:
    """Tabular Monte Carlo Q of the seeded starting policy against exact Q^pi."""
    start = time.perf_counter()
    enum = enum or enumerate_env(cfg.env)
    policy = cfg.policy.build(cfg.env)
    sol = exact_policy_evaluation(enum.mdp, policy_matrix(policy, enum))
    trajs = collect_batch(cfg.env, policy, episodes, cfg.seed, stream=(7,))
    data = build_eval_dataset(trajs, cfg.env.mdp.discount)
    feat = QFeaturizer.for_env(cfg.env, "tabular")
    q = fit_q(data, feat, cfg.loop.ridge, cfg.loop.holdout, seed=cfg.seed)
    rows = []
    for s in enum.nonterminal_states():
        cols = feat.columns(enum.representatives[s])
        for a in np.flatnonzero(q.support[cols] >= min_count):
            rows.append({"state": s, "action": int(a), "count": int(q.support[cols[a]]), "q_hat": float(q.weights[cols[a]]), "q_exact": float(sol.Q[s, a]), "abs_error": float(abs(q.weights[cols[a]] - sol.Q[s, a]))})
    sup = max((r["abs_error"] for r in rows), default=0.0)
    worst = max(rows, key=lambda r: r["abs_error"]) if rows else {}
    summary = {"episodes": episodes, "pairs": len(rows), "sup_error": sup, "tol": tol, "worst_count": worst.get("count", 0)}
    return _finish(CheckResult("mc_consistency", bool(rows) and sup <= tol, summary, rows), out_dir, start)


# --- loop-based checks --------------------------------------------------------------------------


def _visited_states(trajs):
    seen = {}
    for traj in trajs:
        for t in traj:
            seen.setdefault(t.state, None)
    return list(seen)


def oracle_q_improvement(cfg: ExperimentConfig, iterations: int = 10, episodes: int | None = None, out_dir=None, margin_tol: float = 1e-6) -> CheckResult:
    """Iterative PPO with the exact Q^pi as reward: monotone values and non-negative local margins."""
    start = time.perf_counter()
    enum = enumerate_env(cfg.env)
    loop = LoopConfig.from_dict({**cfg.loop.to_dict(), "q_mode": "oracle", "episodes": episodes or cfg.loop.episodes})
    state = LoopState(Path("."), cfg.env, loop, cfg.seed, cfg.policy.build(cfg.env), enum=enum)
    rows = []
    ok = True
    for _ in range(iterations):
        old = state.policy
        res = run_iteration(state, persist=False)
        visited = _visited_states(res.trajectories)
        check = local_improvement_check(res.next_policy, old, res.q, visited, tol=margin_tol)
        rec = res.record
        step_ok = rec.oracle_value_next >= rec.oracle_value - margin_tol and check.rate >= 0.99
        ok &= step_ok
        rows.append({"iteration": rec.iteration, "value": rec.oracle_value, "value_next": rec.oracle_value_next, "visited_states": len(visited), "margin_rate": check.rate, "min_margin": float(check.margins.min()), "mean_kl": rec.ppo["mean_kl"], "ok": step_ok})
    summary = {"iterations": iterations, "min_value_gain": min(r["value_next"] - r["value"] for r in rows), "min_margin_rate": min(r["margin_rate"] for r in rows), "final_value": rows[-1]["value_next"]}
    return _finish(CheckResult("oracle_q_improvement", ok, summary, rows), out_dir, start)


@dataclass
class ReferenceRun:
    records: list
    policies: list[PolicyParams]  # pi_0 .. pi_K
    values: list[float]  # exact V of each policy
    v_star: float


def reference_run(cfg: ExperimentConfig, iterations: int = 10, run_dir: Path | None = None, on_record: Callable | None = None) -> ReferenceRun:
    enum = enumerate_env(cfg.env)
    v_star = value_iteration(enum.mdp).value_at(enum.mdp, enum.mdp.initial)
    state = LoopState(Path(run_dir or "."), cfg.env, cfg.loop, cfg.seed, cfg.policy.build(cfg.env), enum=enum)
    policies = [state.policy]
    values = []
    for _ in range(iterations):
        res = run_iteration(state, persist=run_dir is not None)
        policies.append(res.next_policy)
        if not values:
            values.append(res.record.oracle_value)
        values.append(res.record.oracle_value_next)
        if on_record:
            on_record(res.record)
    return ReferenceRun(state.records, policies, values, v_star)


def convergence(run: ReferenceRun, fraction: float = 0.95, max_k: int = 10, out_dir=None) -> CheckResult:
    start = time.perf_counter()
    target = fraction * run.v_star
    rows = [{"k": k, "value": v, "ratio": v / run.v_star} for k, v in enumerate(run.values)]
    hits = [r["k"] for r in rows if r["k"] <= max_k and r["value"] >= target]
    summary = {"v_star": run.v_star, "target": target, "first_k": hits[0] if hits else -1, "final_ratio": rows[-1]["ratio"]}
    return _finish(CheckResult("convergence", bool(hits), summary, rows), out_dir, start)


def ab_detection(cfg: ExperimentConfig, policy_a: PolicyParams, policy_b: PolicyParams, out_dir=None) -> CheckResult:
    """Improvement detected at full size, and the CI's coverage when both arms are identical."""
    start = time.perf_counter()
    rep = ab_compare(cfg.env, policy_a, policy_b, cfg.ab.episodes_per_arm, cfg.seed)
    covered = 0
    rows = []
    n = cfg.ab.coverage_episodes
    for r in range(cfg.ab.coverage_reps):
        same = ab_compare(cfg.env, policy_a, policy_a, n, cfg.seed + 1 + r)
        covered += same.ci_low <= 0.0 <= same.ci_high
        rows.append({"rep": r, "difference": same.difference, "ci_low": same.ci_low, "ci_high": same.ci_high})
    coverage = covered / cfg.ab.coverage_reps
    summary = {"rate_a": rep.rate_a, "rate_b": rep.rate_b, "difference": rep.difference, "ci_low": rep.ci_low, "ci_high": rep.ci_high, "null_coverage": coverage}
    passed = rep.difference > 0 and rep.ci_low > 0 and coverage >= 0.94
    return _finish(CheckResult("ab_detection", passed, summary, rows), out_dir, start)


# --- oracle identities --------------------------------------------------------------------------


def pdl_check(env: EnvConfig | None, n_random: int = 100, seed: int = 0, tol: float = 1e-8, policy: PolicyParams | None = None, out_dir=None) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_random):
        mdp = random_mdp(rng, n_states=5, n_actions=3)
        r = performance_difference_check(mdp, random_policy(mdp, rng), random_policy(mdp, rng), mdp.initial)
        rows.append({"instance": f"random-{k}", "value_gap": r.value_gap, "residual": r.residual})
    toy_gap = None
    if env is not None:
        enum = enumerate_env(env)
        old = policy_matrix(policy, enum) if policy is not None else enum.mdp.uniform_policy()
        new = greedy_policy(enum.mdp, exact_policy_evaluation(enum.mdp, old).Q)
        r = performance_difference_check(enum.mdp, old, new, enum.mdp.initial)
        toy_gap = r.value_gap
        rows.append({"instance": "toy-shop", "value_gap": r.value_gap, "residual": r.residual})
    worst = max(r["residual"] for r in rows)
    passed = worst <= tol and (toy_gap is None or toy_gap > 0)
    summary = {"instances": len(rows), "max_residual": worst, "toy_value_gap": toy_gap}
    return _finish(CheckResult("performance_difference", passed, summary, rows), out_dir, start)


def theorem2_check(n_instances: int = 100, seed: int = 0, max_eps: float = 0.1, out_dir=None) -> CheckResult:
    """KL-regularized improvement bound on random small MDPs with injected Q error.

    The new policy is the exact per-state maximizer for the perturbed Q, mixed
    with a random policy on half the instances so the slack term is exercised.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_instances):
        mdp = random_mdp(rng, n_states=int(rng.integers(3, 7)), n_actions=int(rng.integers(2, 5)))
        old = random_policy(mdp, rng, concentration=2.0)
        eps = max_eps * k / max(n_instances - 1, 1)
        q_true = exact_policy_evaluation(mdp, old).Q
        q_hat = q_true + rng.uniform(-eps, eps, q_true.shape) * mdp.action_mask
        beta = float(rng.choice([0.05, 0.2, 1.0]))
        new = np.array(old)
        for s in np.flatnonzero(mdp.nonterminal):
            new[s] = kl_regularized_maximizer(old[s], q_hat[s], beta, "forward")
        if k % 2:
            mix = 0.2 * rng.random()
            new = (1 - mix) * new + mix * random_policy(mdp, rng)
        r = theorem2_bound_check(mdp, old, new, q_hat, beta, mdp.initial)
        rows.append({"instance": k, "beta": beta, "eps_q": r.eps_q, "lhs": r.lhs, "rhs": r.rhs, "rhs_displayed": r.rhs_displayed, "holds": r.holds, "holds_displayed": r.holds_displayed, "max_slack": float(r.delta.max())})
    held = sum(r["holds"] for r in rows)
    summary = {"instances": n_instances, "held": held, "held_displayed_direction": sum(r["holds_displayed"] for r in rows), "min_margin": min(r["lhs"] - r["rhs"] for r in rows)}
    return _finish(CheckResult("theorem2_bound", held == n_instances, summary, rows), out_dir, start)


def bellman_check(env: EnvConfig, policy: PolicyParams, tol: float = 1e-10, out_dir=None) -> CheckResult:
    """Solver contracts on toy-shop: residuals and agreement of the two optimal solvers."""
    from ..oracle import backward_induction

    start = time.perf_counter()
    enum = enumerate_env(env)
    pe = exact_policy_evaluation(enum.mdp, policy_matrix(policy, enum))
    vi = value_iteration(enum.mdp)
    bi = backward_induction(enum.mdp)
    gap = float(np.max(np.abs(vi.Q - bi.Q)))
    summary = {"policy_residual": pe.bellman_residual, "vi_residual": vi.bellman_residual, "vi_vs_backward": gap, "v_star": vi.value_at(enum.mdp, enum.mdp.initial)}
    passed = max(pe.bellman_residual, vi.bellman_residual, gap) <= tol
    return _finish(CheckResult("bellman", passed, summary), out_dir, start)
