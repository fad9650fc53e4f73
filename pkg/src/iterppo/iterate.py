"""The batch-online loop: collect under a frozen policy, fit Q, improve, repeat."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .conv_mdp import ConversationState, ResponseSpace, TerminalReason, Trajectory, Transition, reward
from .env_synthetic import EnumeratedEnv, EnvConfig, EnvInstance
from .oracle import exact_policy_evaluation
from .policy import PolicyParams, policy_matrix, response_logprob_table, sample_response
from .q_eval import OracleQ, QFeaturizer, QFunction, build_eval_dataset, fit_q, monte_carlo_returns
from .single_turn_ppo import PpoConfig, PpoStats, build_prompt, ppo_improve


class IterationError(RuntimeError):
    pass


def _seed(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


# --- collection ----------------------------------------------------------------------------


def run_episode(env: EnvInstance, policy: PolicyParams, rng: np.random.Generator, episode_id: str) -> Trajectory:
    s = env.reset()
    steps = []
    while not s.is_terminal:
        sample = sample_response(policy, s, rng)
        nxt = env.step(s, sample.action)
        steps.append(Transition(s, sample.action, reward(nxt, s), nxt, sample.token_logprobs))
        s = nxt
    return Trajectory(tuple(steps), episode_id, policy.tag)


def collect_batch(
    env_config: EnvConfig, policy: PolicyParams, n_episodes: int, seed: int, stream: Sequence[int] = ()
) -> list[Trajectory]:
    """``n_episodes`` complete episodes; episode ``e`` uses its own env and policy streams.

    ``stream`` prefixes the per-episode seed keys so separate callers (A/B arms,
    loop iterations) never share random numbers.
    """
    if n_episodes < 1:
        raise IterationError("n_episodes must be >= 1")
    out = []
    for e in range(n_episodes):
        env = EnvInstance(env_config, _seed(seed, *stream, e, 0))
        rng = np.random.default_rng(_seed(seed, *stream, e, 1))
        try:
            out.append(run_episode(env, policy, rng, f"{seed}:{'.'.join(map(str, (*stream, e)))}"))
        except Exception as exc:
            raise IterationError(f"episode {e} failed: {exc}") from exc
    return out


def outcome_rate(trajectories: Sequence[Trajectory]) -> float:
    return float(np.mean([t.final_state.terminal is TerminalReason.OUTCOME_ACHIEVED for t in trajectories]))


# --- records and loop state -------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    policy_ref: str
    q_ref: str
    episodes: int
    outcome_rate: float
    value_estimate: float  # Monte Carlo mean of the first return
    q_delta: float | None
    policy_delta: float | None
    ppo: dict[str, Any] = field(default_factory=dict)
    q_fit: dict[str, Any] = field(default_factory=dict)
    oracle_value: float | None = None  # exact V of the collecting policy
    oracle_value_next: float | None = None  # exact V of the improved policy
    oracle_q_error: float | None = None  # true sup error over supported (s, a)

    def __post_init__(self) -> None:
        if not 0.0 <= self.outcome_rate <= 1.0:
            raise IterationError("outcome rate outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> IterationRecord:
        return cls(**d)


@dataclass(frozen=True)
class LoopConfig:
    episodes: int = 10_000
    q_featurizer: str = "signature"
    ridge: float = 1e-8
    holdout: float = 0.2
    q_mode: str = "fitted"  # "fitted" or "oracle"
    probe_size: int = 512
    converge_tol: float = 0.02
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self) -> None:
        if self.q_mode not in ("fitted", "oracle"):
            raise IterationError("q_mode must be 'fitted' or 'oracle'")
        if self.episodes < 1 or self.probe_size < 1:
            raise IterationError("episodes and probe_size must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LoopConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise IterationError(f"unknown loop config keys: {sorted(unknown)}")
        if "ppo" in d:
            d["ppo"] = PpoConfig.from_dict(d["ppo"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["ppo"] = self.ppo.to_dict()
        return d


@dataclass(frozen=True)
class Probe:
    """Fixed (state, response index) pairs used to measure Q and policy movement."""

    states: tuple[ConversationState, ...]
    actions: np.ndarray

    @classmethod
    def draw(cls, trajectories: Sequence[Trajectory], n_actions: int, size: int, seed: int) -> Probe:
        rng = np.random.default_rng(_seed(seed, 1 << 20))
        visited = [t.state for traj in trajectories for t in traj]
        pick = rng.integers(len(visited), size=size)
        return cls(tuple(visited[i] for i in pick), rng.integers(n_actions, size=size))

    def to_dict(self) -> dict[str, Any]:
        return {"states": [s.to_record() for s in self.states], "actions": self.actions.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Probe:
        return cls(tuple(ConversationState.from_record(r) for r in d["states"]), np.array(d["actions"], dtype=np.int64))


def _probe_q(q, probe: Probe) -> tuple[np.ndarray, np.ndarray]:
    vals = np.array([q.values(s)[a] for s, a in zip(probe.states, probe.actions)])
    if isinstance(q, QFunction) and q.support is not None:
        seen = np.array([q.support[q.featurizer.columns(s)[a]] > 0 for s, a in zip(probe.states, probe.actions)])
    else:
        seen = np.ones(len(vals), dtype=bool)
    return vals, seen


def q_delta(q_new, q_old, probe: Probe) -> float:
    """sup |Q_new - Q_old| over probe pairs that both estimates have data for."""
    a, sa = _probe_q(q_new, probe)
    b, sb = _probe_q(q_old, probe)
    both = sa & sb
    return float(np.max(np.abs(a - b)[both])) if both.any() else 0.0


def policy_delta(p_new: PolicyParams, p_old: PolicyParams, probe: Probe) -> float:
    """sup total-variation distance between response distributions over probe states."""
    space = ResponseSpace(p_old.spec.vocab_size, p_old.spec.max_msg_len)
    keys = np.array([p_old.spec.keyer.key(s) for s in probe.states])
    a = np.exp(response_logprob_table(p_new, space))[keys]
    b = np.exp(response_logprob_table(p_old, space))[keys]
    return float(np.max(0.5 * np.abs(a - b).sum(axis=1)))


@dataclass
class LoopState:
    run_dir: Path
    env_config: EnvConfig
    loop_config: LoopConfig
    seed: int
    policy: PolicyParams  # the policy the next iteration deploys
    records: list[IterationRecord] = field(default_factory=list)
    last_q: Any = None
    probe: Probe | None = None
    enum: EnumeratedEnv | None = None

    @property
    def iteration(self) -> int:
        return len(self.records)


# --- checkpoint store ------------------------------------------------------------------------


def iter_dir(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"iter_{i}"


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def persist_iteration(
    run_dir: Path, i: int, policy: PolicyParams, next_policy: PolicyParams, q, record: IterationRecord, probe: Probe, extra: dict[str, str] | None = None
) -> Path:
    """Write iter_i atomically: stage everything in a temp dir, then rename."""
    run_dir = Path(run_dir)
    final = iter_dir(run_dir, i)
    if final.exists():
        raise IterationError(f"{final} already exists")
    tmp = Path(tempfile.mkdtemp(prefix=f".iter_{i}-", dir=run_dir))
    try:
        policy.save(tmp / "policy.json")
        next_policy.save(tmp / "next_policy.json")
        if isinstance(q, QFunction):
            q.save(tmp / "q.json")
        else:
            _write_json(tmp / "q.json", {"format_version": 1, "kind": "oracle-q", "values": np.asarray(q.solution.Q).tolist()})
        _write_json(tmp / "record.json", record.to_dict())
        _write_json(tmp / "probe.json", probe.to_dict())
        for name, text in (extra or {}).items():
            (tmp / name).write_text(text)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def load_loop_state(run_dir: Path, env_config: EnvConfig, loop_config: LoopConfig, seed: int, initial_policy: PolicyParams) -> LoopState:
    """Rebuild the loop from whatever complete iterations are on disk."""
    run_dir = Path(run_dir)
    state = LoopState(run_dir, env_config, loop_config, seed, initial_policy)
    i = 0
    while iter_dir(run_dir, i).is_dir():
        d = iter_dir(run_dir, i)
        state.records.append(IterationRecord.from_dict(json.loads((d / "record.json").read_text())))
        state.policy = PolicyParams.load(d / "next_policy.json")
        state.probe = Probe.from_dict(json.loads((d / "probe.json").read_text()))
        qd = json.loads((d / "q.json").read_text())
        state.last_q = QFunction.from_dict(qd) if qd.get("kind") == "q" else None
        i += 1
    return state


# --- one iteration ------------------------------------------------------------------------------


def _oracle_value(enum: EnumeratedEnv, policy: PolicyParams):
    sol = exact_policy_evaluation(enum.mdp, policy_matrix(policy, enum))
    return sol, sol.value_at(enum.mdp, enum.mdp.initial)


@dataclass(frozen=True)
class IterationResult:
    record: IterationRecord
    trajectories: list[Trajectory]
    q: Any
    stats: PpoStats
    next_policy: PolicyParams


def run_iteration(state: LoopState, persist: bool = True) -> IterationResult:
    """Collect, evaluate, improve and checkpoint one iteration.

    Nothing touches ``state`` or disk until every stage has succeeded.
    """
    cfg = state.loop_config
    i = state.iteration
    policy = state.policy
    gamma = state.env_config.mdp.discount
    trajs = collect_batch(state.env_config, policy, cfg.episodes, state.seed, stream=(i, 0))
    probe = state.probe
    if probe is None:
        n_actions = len(ResponseSpace(policy.spec.vocab_size, policy.spec.max_msg_len))
        probe = Probe.draw(trajs, n_actions, cfg.probe_size, state.seed)

    enum = state.enum
    oracle_sol, oracle_v = _oracle_value(enum, policy) if enum is not None else (None, None)
    q_fit: dict[str, Any] = {}
    oracle_err = None
    if cfg.q_mode == "oracle":
        if enum is None:
            raise IterationError("oracle Q mode needs an enumerated environment")
        q = OracleQ(enum, oracle_sol)
    else:
        dataset = build_eval_dataset(trajs, gamma)
        feat = QFeaturizer.for_env(state.env_config, cfg.q_featurizer)
        q = fit_q(dataset, feat, cfg.ridge, cfg.holdout, seed=int(_seed(state.seed, i, 2).generate_state(1)[0]))
        q_fit = asdict(q.fit_report)
        if enum is not None:
            oracle_err = _supported_sup_error(q, enum, oracle_sol)

    prompts = [build_prompt(t.state) for traj in trajs for t in traj]
    next_policy, stats = ppo_improve(policy, prompts, q, cfg.ppo, seed=_seed(state.seed, i, 3))

    first_returns = [monte_carlo_returns(t.rewards, gamma)[0] for t in trajs]
    record = IterationRecord(
        iteration=i,
        policy_ref=policy.tag,
        q_ref=f"iter_{i}/q.json",
        episodes=len(trajs),
        outcome_rate=outcome_rate(trajs),
        value_estimate=float(np.mean(first_returns)),
        q_delta=None if state.last_q is None else q_delta(q, state.last_q, probe),
        policy_delta=policy_delta(next_policy, policy, probe),
        ppo=stats.summary(),
        q_fit=q_fit,
        oracle_value=oracle_v,
        oracle_value_next=None if enum is None else _oracle_value(enum, next_policy)[1],
        oracle_q_error=oracle_err,
    )
    if persist:
        persist_iteration(state.run_dir, i, policy, next_policy, q, record, probe, {"ppo_epochs.json": json.dumps(list(stats.epochs), sort_keys=True)})
    state.records.append(record)
    state.policy = next_policy
    state.last_q = q
    state.probe = probe
    return IterationResult(record, trajs, q, stats, next_policy)


def _supported_sup_error(q: QFunction, enum: EnumeratedEnv, sol) -> float:
    worst = 0.0
    for s in enum.nonterminal_states():
        rep = enum.representatives[s]
        cols = q.featurizer.columns(rep)
        seen = q.support[cols] > 0
        if seen.any():
            worst = max(worst, float(np.max(np.abs(q.weights[cols] - sol.Q[s])[seen])))
    return worst


def has_converged(records: Sequence[IterationRecord], tol: float) -> bool:
    """True when q_delta <= tol on each of the last two iterations."""
    if len(records) < 2:
        raise IterationError("convergence needs at least two records")
    last = [r.q_delta for r in records[-2:]]
    return all(d is not None and d <= tol for d in last)


# --- A/B comparison ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbReport:
    arm_a: str
    arm_b: str
    episodes_per_arm: int
    rate_a: float
    rate_b: float
    difference: float  # rate_b - rate_a
    ci_low: float
    ci_high: float

    @property
    def excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def two_proportion_ci(successes_a: int, successes_b: int, n_a: int, n_b: int, z: float = 1.959963984540054) -> tuple[float, float, float]:
    """Normal-approximation CI for p_b - p_a (unpooled standard error)."""
    pa, pb = successes_a / n_a, successes_b / n_b
    d = pb - pa
    se = float(np.sqrt(pa * (1 - pa) / n_a + pb * (1 - pb) / n_b))
    return d, d - z * se, d + z * se


def ab_compare(env_config: EnvConfig, policy_a: PolicyParams, policy_b: PolicyParams, n_per_arm: int, seed: int) -> AbReport:
    if n_per_arm < 30:
        raise IterationError("an A/B test needs at least 30 episodes per arm")
    wins = []
    for arm, pol in enumerate((policy_a, policy_b)):
        trajs = collect_batch(env_config, pol, n_per_arm, seed, stream=(1 << 30, arm))
        wins.append(sum(t.final_state.terminal is TerminalReason.OUTCOME_ACHIEVED for t in trajs))
    d, lo, hi = two_proportion_ci(wins[0], wins[1], n_per_arm, n_per_arm)
    return AbReport(policy_a.tag, policy_b.tag, n_per_arm, wins[0] / n_per_arm, wins[1] / n_per_arm, d, lo, hi)
