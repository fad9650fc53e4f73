"""Monte Carlo policy evaluation and supervised Q fitting."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .conv_mdp import Abstain, ConversationState, ResponseSpace, SuggestedAction, Trajectory
from .env_synthetic import EnumeratedEnv, EnvConfig, StateKeyer
from .oracle import OracleSolution
from .policy import PolicyParams, score_response

Q_CHECKPOINT_VERSION = 1


class QEvalError(ValueError):
    pass


def monte_carlo_returns(rewards: Sequence[float] | Trajectory, gamma: float) -> np.ndarray:
    """G_i = r_{i+1} + gamma G_{i+1}, one return per transition."""
    if not 0.0 <= gamma < 1.0:
        raise QEvalError(f"gamma must lie in [0, 1), got {gamma}")
    if isinstance(rewards, Trajectory):
        rewards = rewards.rewards
    r = np.asarray(rewards, dtype=float)
    G = np.zeros_like(r)
    acc = 0.0
    for i in range(len(r) - 1, -1, -1):
        acc = r[i] + gamma * acc
        G[i] = acc
    return G


def importance_weights(log_ratios: Sequence[float], mode: str = "suffix", w_max: float | None = None) -> np.ndarray:
    """Per-step importance weights from per-step log ratios log(pi_target / pi_behavior).

    ``suffix``: product over the actions taken *after* step i; the weighted mean
    of G_i at a fixed (s, a) is then consistent for the target's Q.
    ``prefix``: product over steps 1..i (reweights which (s, a) pairs are visited).
    ``full``: product over the whole episode.
    """
    lr = np.asarray(log_ratios, dtype=float)
    if mode == "prefix":
        logw = np.cumsum(lr)
    elif mode == "suffix":
        logw = np.concatenate([np.cumsum(lr[::-1])[::-1][1:], [0.0]]) if len(lr) else lr
    elif mode == "full":
        logw = np.full(len(lr), lr.sum())
    else:
        raise QEvalError(f"unknown weighting mode {mode!r}")
    w = np.exp(logw)
    if w_max is not None:
        w = np.minimum(w, w_max)
    return w


@dataclass(eq=False)
class EvalDataset:
    states: list[ConversationState]
    actions: list[SuggestedAction]
    returns: np.ndarray
    weights: np.ndarray
    episode: np.ndarray  # row -> episode ordinal
    source_tag: str = ""
    target_tag: str = ""
    episode_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.returns)

    def duplicated(self) -> EvalDataset:
        return EvalDataset(
            self.states * 2,
            self.actions * 2,
            np.tile(self.returns, 2),
            np.tile(self.weights, 2),
            np.tile(self.episode, 2),
            self.source_tag,
            self.target_tag,
            list(self.episode_ids),
        )


def build_eval_dataset(
    trajectories: Sequence[Trajectory],
    gamma: float,
    target_policy: PolicyParams | None = None,
    w_max: float | None = 20.0,
    weighting: str = "suffix",
) -> EvalDataset:
    """Rows ((s_i, a_i), G_i, w_i). Weights are 1 for on-policy data."""
    states: list[ConversationState] = []
    actions: list[SuggestedAction] = []
    returns: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    episode: list[np.ndarray] = []
    tags = {t.behavior_tag for t in trajectories}
    target_tag = target_policy.tag if target_policy is not None else (next(iter(tags)) if len(tags) == 1 else "")
    for n, traj in enumerate(trajectories):
        G = monte_carlo_returns(traj.rewards, gamma)
        if target_policy is None or traj.behavior_tag == target_tag:
            w = np.ones(len(traj))
        else:
            log_ratios = []
            for k, tr in enumerate(traj):
                if not tr.token_logprobs:
                    raise QEvalError(f"episode {traj.episode_id} step {k} has no behavior log-probabilities")
                log_ratios.append(score_response(target_policy, tr.state, tr.action) - tr.behavior_logprob)
            w = importance_weights(log_ratios, weighting, w_max)
        for tr in traj:
            states.append(tr.state)
            actions.append(tr.action)
        returns.append(G)
        weights.append(w)
        episode.append(np.full(len(traj), n))
    source = ",".join(sorted(tags))
    return EvalDataset(
        states,
        actions,
        np.concatenate(returns) if returns else np.zeros(0),
        np.concatenate(weights) if weights else np.zeros(0),
        np.concatenate(episode) if episode else np.zeros(0, dtype=int),
        source,
        target_tag,
        [t.episode_id for t in trajectories],
    )


# --- featurizers ------------------------------------------------------------------------


def _signatures(max_len: int) -> list[tuple[int, int, int, int]]:
    sigs = [(1, 0, 0, 0)]
    for n in range(1, max_len + 1):
        for a, b in itertools.product(range(n + 1), repeat=2):
            if a + b <= n:
                sigs.append((0, a, b, n - a - b))
    return sigs


@dataclass(frozen=True, eq=False)
class QFeaturizer:
    """One-hot features over (state key, action) or (state key, action signature).

    The signature of a suggestion is (abstain, #probe, #offer, #generic tokens).
    """

    kind: str
    keyer: StateKeyer
    responses: ResponseSpace
    probe_tokens: tuple[int, ...] = ()
    offer_tokens: tuple[int, ...] = ()
    _action_col: np.ndarray = field(init=False, repr=False)
    _n_cols: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind == "tabular":
            col = np.arange(len(self.responses))
            n = len(self.responses)
        elif self.kind == "signature":
            sigs = _signatures(self.responses.max_len)
            lookup = {s: i for i, s in enumerate(sigs)}
            col = np.array([lookup[self.signature(a)] for a in self.responses.actions])
            n = len(sigs)
        else:
            raise QEvalError(f"unknown featurizer kind {self.kind!r}")
        object.__setattr__(self, "_action_col", col)
        object.__setattr__(self, "_n_cols", n)

    @classmethod
    def for_env(cls, config: EnvConfig, kind: str = "tabular") -> QFeaturizer:
        m = config.mdp
        return cls(kind, config.keyer(), ResponseSpace(m.vocab_size, m.max_msg_len), config.probe_tokens, config.offer_tokens)

    def signature(self, action: SuggestedAction) -> tuple[int, int, int, int]:
        if isinstance(action, Abstain):
            return (1, 0, 0, 0)
        p = sum(t in self.probe_tokens for t in action.message)
        o = sum(t in self.offer_tokens for t in action.message)
        return (0, p, o, len(action.message) - p - o)

    @property
    def dim(self) -> int:
        return self.keyer.n_keys * self._n_cols

    def context_key(self, state: ConversationState) -> int:
        return self.keyer.key(state)

    def columns(self, state: ConversationState) -> np.ndarray:
        """Feature index of (state, a) for every response a."""
        return self.keyer.key(state) * self._n_cols + self._action_col

    def index(self, state: ConversationState, action: SuggestedAction) -> int:
        return int(self.keyer.key(state) * self._n_cols + self._action_col[self.responses.index(action)])

    def matrix(self, states: Sequence[ConversationState], actions: Sequence[SuggestedAction]) -> sp.csr_matrix:
        cols = np.fromiter((self.index(s, a) for s, a in zip(states, actions)), dtype=np.int64, count=len(states))
        n = len(states)
        return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, self.dim))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "horizon": self.keyer.horizon,
            "catalog": [list(m) for m in self.keyer.catalog],
            "catalog_intent": list(self.keyer.catalog_intent),
            "vocab_size": self.responses.vocab_size,
            "max_len": self.responses.max_len,
            "probe_tokens": list(self.probe_tokens),
            "offer_tokens": list(self.offer_tokens),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> QFeaturizer:
        keyer = StateKeyer(int(d["horizon"]), tuple(tuple(m) for m in d["catalog"]), tuple(d["catalog_intent"]))
        return cls(
            d["kind"], keyer, ResponseSpace(int(d["vocab_size"]), int(d["max_len"])), tuple(d["probe_tokens"]), tuple(d["offer_tokens"])
        )


# --- fitting ------------------------------------------------------------------------------


@dataclass(frozen=True)
class QFitReport:
    train_rmse: float
    holdout_rmse: float
    sup_error_estimate: float  # max absolute holdout residual (proxy for the max-norm error)
    row_count: int
    train_rows: int
    holdout_rows: int
    oracle_sup_error: float | None = None


@dataclass(eq=False)
class QFunction:
    weights: np.ndarray
    featurizer: QFeaturizer
    fit_report: QFitReport | None = None
    support: np.ndarray | None = None  # training rows per feature

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.featurizer.dim,):
            raise QEvalError(f"weights have {self.weights.shape[0]} entries but the featurizer needs {self.featurizer.dim}")

    def context_key(self, state: ConversationState) -> int:
        return self.featurizer.context_key(state)

    def predict(self, state: ConversationState, action: SuggestedAction) -> float:
        return float(self.weights[self.featurizer.index(state, action)])

    def values(self, state: ConversationState) -> np.ndarray:
        """Predictions for every response, in ResponseSpace order."""
        return self.weights[self.featurizer.columns(state)]

    def seen_count(self, state: ConversationState, action: SuggestedAction) -> int:
        return 0 if self.support is None else int(self.support[self.featurizer.index(state, action)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": Q_CHECKPOINT_VERSION,
            "kind": "q",
            "weights": self.weights.tolist(),
            "featurizer": self.featurizer.to_dict(),
            "fit_report": None if self.fit_report is None else self.fit_report.__dict__,
            "support": None if self.support is None else self.support.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> QFunction:
        if d.get("format_version") != Q_CHECKPOINT_VERSION or d.get("kind") != "q":
            raise QEvalError("not a supported Q checkpoint")
        rep = d.get("fit_report")
        sup = d.get("support")
        return cls(
            np.array(d["weights"], dtype=float),
            QFeaturizer.from_dict(d["featurizer"]),
            None if rep is None else QFitReport(**rep),
            None if sup is None else np.array(sup, dtype=np.int64),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> QFunction:
        return cls.from_dict(json.loads(Path(path).read_text()))


def split_episodes(n_episodes: int, holdout: float, seed: int) -> np.ndarray:
    """Boolean mask of held-out episodes (floor(holdout * n) of them)."""
    mask = np.zeros(n_episodes, dtype=bool)
    n_hold = int(np.floor(holdout * n_episodes))
    if n_hold:
        mask[np.random.default_rng(seed).permutation(n_episodes)[:n_hold]] = True
    return mask


def _rmse(res: np.ndarray, w: np.ndarray) -> float:
    if len(res) == 0 or w.sum() <= 0:
        return 0.0
    return float(np.sqrt(np.sum(w * res**2) / np.sum(w)))


def fit_q(dataset: EvalDataset, featurizer: QFeaturizer, ridge: float = 1e-8, holdout: float = 0.2, seed: int = 0) -> QFunction:
    """Weighted ridge regression: min (1/sum w) sum w (G - f.theta)^2 + ridge |theta|^2.

    The data term is normalized by the total weight so duplicating the dataset
    leaves the minimizer unchanged.
    """
    if len(dataset) == 0:
        raise QEvalError("cannot fit Q on an empty dataset")
    if ridge < 0:
        raise QEvalError("ridge must be non-negative")
    n_ep = int(dataset.episode.max()) + 1
    hold_ep = split_episodes(n_ep, holdout, seed)
    hold = hold_ep[dataset.episode]
    train = ~hold
    F = featurizer.matrix(dataset.states, dataset.actions)
    Ft, wt, Gt = F[train], dataset.weights[train], dataset.returns[train]
    total = wt.sum()
    if total <= 0:
        raise QEvalError("training rows carry zero total weight")
    support = np.bincount(Ft.indices, minlength=featurizer.dim)
    # features with no training rows decouple from the system and stay at zero
    used = np.flatnonzero(support)
    Fu = Ft[:, used]
    A = (Fu.T @ sp.diags(wt) @ Fu).toarray() / total
    b = Fu.T @ (wt * Gt) / total
    A[np.diag_indices_from(A)] += ridge
    try:
        if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
            raise np.linalg.LinAlgError
        theta = np.zeros(featurizer.dim)
        theta[used] = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise QEvalError("normal matrix is singular; use ridge > 0") from None
    res_t = Gt - Ft @ theta
    if hold.any():
        res_h = dataset.returns[hold] - F[hold] @ theta
        w_h = dataset.weights[hold]
    else:
        res_h, w_h = res_t, wt
    report = QFitReport(
        train_rmse=_rmse(res_t, wt),
        holdout_rmse=_rmse(res_h, w_h),
        sup_error_estimate=float(np.max(np.abs(res_h))) if len(res_h) else 0.0,
        row_count=len(dataset),
        train_rows=int(train.sum()),
        holdout_rows=int(hold.sum()),
    )
    return QFunction(theta, featurizer, report, support)


def predict(q: QFunction, state: ConversationState, action: SuggestedAction) -> float:
    return q.predict(state, action)


class OracleQ:
    """Exact Q^pi from the DP oracle, exposed through the QFunction interface."""

    def __init__(self, enum: EnumeratedEnv, solution: OracleSolution):
        self.enum = enum
        self.solution = solution

    def context_key(self, state: ConversationState) -> int:
        return self.enum.index_of(state)

    def values(self, state: ConversationState) -> np.ndarray:
        return self.solution.Q[self.enum.index_of(state)]

    def predict(self, state: ConversationState, action: SuggestedAction) -> float:
        return float(self.values(state)[self.enum.responses.index(action)])


def oracle_sup_error(q: QFunction, enum: EnumeratedEnv, solution: OracleSolution) -> float:
    """True max-norm error of ``q`` against the oracle over all non-terminal (s, a)."""
    worst = 0.0
    for s in enum.nonterminal_states():
        worst = max(worst, float(np.max(np.abs(q.values(enum.representatives[s]) - solution.Q[s]))))
    return worst
