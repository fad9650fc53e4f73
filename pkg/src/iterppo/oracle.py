"""Exact dynamic programming on explicit finite MDPs.

Reward convention: ``reward[s']`` is collected on entering ``s'`` from a
non-terminal state. Terminal states are absorbing, take no meaningful action and
have ``V = Q = 0``. A policy is an ``(S, A)`` array of action probabilities that
is zero outside ``action_mask``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

FORMAT_VERSION = 1
ROW_TOL = 1e-12


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ExplicitMdp:
    transitions: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S,)
    terminal: np.ndarray  # (S,) bool
    action_mask: np.ndarray  # (S, A) bool
    gamma: float
    initial: np.ndarray  # (S,)
    state_labels: tuple = field(default=(), repr=False)

    def __post_init__(self) -> None:
        P = self.transitions
        S, A, S2 = P.shape
        if S != S2:
            raise OracleError("transition table must be (S, A, S)")
        if self.reward.shape != (S,) or self.terminal.shape != (S,) or self.initial.shape != (S,):
            raise OracleError("reward/terminal/initial must have one entry per state")
        if self.action_mask.shape != (S, A):
            raise OracleError("action_mask must be (S, A)")
        if not 0.0 <= self.gamma < 1.0:
            raise OracleError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.action_mask.any(axis=1).all():
            raise OracleError("every state needs at least one action")
        sums = P.sum(axis=2)
        bad = np.abs(sums - 1.0) > ROW_TOL
        if (bad & self.action_mask).any():
            s, a = np.argwhere(bad & self.action_mask)[0]
            raise OracleError(f"P[{s}, {a}, :] sums to {sums[s, a]!r}, not 1")
        for s in np.flatnonzero(self.terminal):
            if not np.all(P[s, self.action_mask[s], s] == 1.0):
                raise OracleError(f"terminal state {s} must self-loop")
        if abs(self.initial.sum() - 1.0) > ROW_TOL or (self.initial < 0).any():
            raise OracleError("initial distribution must be a probability vector")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def nonterminal(self) -> np.ndarray:
        return ~self.terminal

    def expected_reward(self) -> np.ndarray:
        """(S, A) immediate reward E[R(s') | s, a], zero at terminal states."""
        r = self.transitions @ self.reward
        r[self.terminal] = 0.0
        return r

    def check_policy(self, policy: np.ndarray) -> np.ndarray:
        policy = np.asarray(policy, dtype=float)
        if policy.shape != self.action_mask.shape:
            raise OracleError(f"policy shape {policy.shape} != {self.action_mask.shape}")
        if (policy < 0).any() or (policy[~self.action_mask] != 0).any():
            raise OracleError("policy must be non-negative and zero on invalid actions")
        sums = policy.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            s = int(np.argmax(np.abs(sums - 1.0)))
            raise OracleError(f"policy row {s} sums to {sums[s]!r}")
        return policy

    def uniform_policy(self) -> np.ndarray:
        m = self.action_mask.astype(float)
        return m / m.sum(axis=1, keepdims=True)

    def distribution(self, s0) -> np.ndarray:
        """Accept a state index or a distribution; return a distribution."""
        if np.isscalar(s0):
            mu = np.zeros(self.n_states)
            mu[int(s0)] = 1.0
            return mu
        mu = np.asarray(s0, dtype=float)
        if mu.shape != (self.n_states,):
            raise OracleError("start distribution has the wrong shape")
        return mu

    # --- structured-text export ---------------------------------------------------

    def to_json(self) -> str:
        idx = np.argwhere(self.transitions > 0)
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "gamma": self.gamma,
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "reward": self.reward.tolist(),
                "terminal": self.terminal.astype(int).tolist(),
                "initial": self.initial.tolist(),
                "action_mask": self.action_mask.astype(int).tolist(),
                "transitions": [[int(s), int(a), int(t), float(self.transitions[s, a, t])] for s, a, t in idx],
                "state_labels": [str(x) for x in self.state_labels],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> ExplicitMdp:
        d = json.loads(text)
        if d.get("format_version") != FORMAT_VERSION:
            raise OracleError(f"unsupported MDP format version {d.get('format_version')!r}")
        S, A = d["n_states"], d["n_actions"]
        P = np.zeros((S, A, S))
        for s, a, t, p in d["transitions"]:
            P[s, a, t] = p
        return cls(
            P,
            np.array(d["reward"], dtype=float),
            np.array(d["terminal"], dtype=bool),
            np.array(d["action_mask"], dtype=bool),
            float(d["gamma"]),
            np.array(d["initial"], dtype=float),
            tuple(d.get("state_labels", ())),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> ExplicitMdp:
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class OracleSolution:
    V: np.ndarray
    Q: np.ndarray
    kind: str  # "policy" or "optimal"
    bellman_residual: float

    def advantage(self) -> np.ndarray:
        return self.Q - self.V[:, None]

    def value_at(self, mdp: ExplicitMdp, s0) -> float:
        return float(mdp.distribution(s0) @ self.V)


def _bellman_q(mdp: ExplicitMdp, V: np.ndarray, gamma: float) -> np.ndarray:
    Q = mdp.transitions @ (mdp.reward + gamma * V)
    Q[mdp.terminal] = 0.0
    return np.where(mdp.action_mask, Q, 0.0)


def exact_policy_evaluation(mdp: ExplicitMdp, policy: np.ndarray, gamma: float | None = None) -> OracleSolution:
    """Solve V = r_pi + gamma P_pi V on the non-terminal block.

    ``gamma`` may be overridden (e.g. 1.0 for outcome probabilities on an acyclic
    MDP); the linear system must then still be non-singular.
    """
    policy = mdp.check_policy(policy)
    g = mdp.gamma if gamma is None else float(gamma)
    P_pi = np.einsum("sa,sat->st", policy, mdp.transitions)
    r_pi = P_pi @ mdp.reward
    nt = mdp.nonterminal
    A = np.eye(int(nt.sum())) - g * P_pi[np.ix_(nt, nt)]
    try:
        v_nt = np.linalg.solve(A, r_pi[nt])
    except np.linalg.LinAlgError as exc:
        raise OracleError("policy evaluation system is singular") from exc
    V = np.zeros(mdp.n_states)
    V[nt] = v_nt
    Q = _bellman_q(mdp, V, g)
    resid = float(np.max(np.abs((policy * Q).sum(axis=1) - V)))
    return OracleSolution(V, Q, "policy", resid)


def outcome_probability(mdp: ExplicitMdp, policy: np.ndarray, s0=None) -> float:
    """Undiscounted expected total reward (probability of the outcome for 0/1 rewards)."""
    sol = exact_policy_evaluation(mdp, policy, gamma=1.0)
    return float(mdp.distribution(mdp.initial if s0 is None else s0) @ sol.V)


def greedy_policy(mdp: ExplicitMdp, Q: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Deterministic greedy policy; among near-ties the lowest action index wins."""
    Qm = np.where(mdp.action_mask, Q, -np.inf)
    best = Qm.max(axis=1, keepdims=True)
    pick = np.argmax(Qm >= best - tie_tol, axis=1)
    pol = np.zeros_like(Q, dtype=float)
    pol[np.arange(mdp.n_states), pick] = 1.0
    return pol


def value_iteration(mdp: ExplicitMdp, tol: float = 1e-13, max_iter: int = 100_000) -> OracleSolution:
    if tol <= 0:
        raise OracleError("tol must be positive")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = _bellman_q(mdp, V, mdp.gamma)
        V_new = np.where(mdp.action_mask, Q, -np.inf).max(axis=1)
        V_new[mdp.terminal] = 0.0
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta <= tol:
            break
    Q = _bellman_q(mdp, V, mdp.gamma)
    resid = float(np.max(np.abs(np.where(mdp.action_mask, Q, -np.inf).max(axis=1) - V)))
    return OracleSolution(V, Q, "optimal", resid)


def topological_order(mdp: ExplicitMdp) -> list[int]:
    """Non-terminal states ordered so successors come later; raises on cycles."""
    nt = mdp.nonterminal
    succ = (mdp.transitions * mdp.action_mask[:, :, None]).sum(axis=1) > 0
    indeg = np.zeros(mdp.n_states, dtype=int)
    for s in np.flatnonzero(nt):
        for t in np.flatnonzero(succ[s] & nt):
            if t == s:
                raise OracleError(f"non-terminal self-loop at state {s}")
            indeg[t] += 1
    order = []
    stack = [int(s) for s in np.flatnonzero(nt) if indeg[s] == 0]
    while stack:
        s = stack.pop()
        order.append(s)
        for t in np.flatnonzero(succ[s] & nt):
            indeg[t] -= 1
            if indeg[t] == 0:
                stack.append(int(t))
    if len(order) != int(nt.sum()):
        raise OracleError("MDP has cycles among non-terminal states; backward induction needs a DAG")
    return order


def backward_induction(mdp: ExplicitMdp) -> OracleSolution:
    """Optimal values on an acyclic (finite-horizon) MDP, one sweep in reverse topological order."""
    V = np.zeros(mdp.n_states)
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for s in reversed(topological_order(mdp)):
        q = mdp.transitions[s] @ (mdp.reward + mdp.gamma * V)
        Q[s] = np.where(mdp.action_mask[s], q, 0.0)
        V[s] = q[mdp.action_mask[s]].max()
    resid = float(np.max(np.abs(np.where(mdp.action_mask, _bellman_q(mdp, V, mdp.gamma), -np.inf).max(axis=1) - V)))
    return OracleSolution(V, Q, "optimal", resid)


def visitation_distribution(mdp: ExplicitMdp, policy: np.ndarray, s0, tail: float = 1e-12) -> np.ndarray:
    """d(s) = (1 - gamma) sum_t gamma^t P(s_t = s | s0, pi), truncated once gamma^t < tail."""
    policy = mdp.check_policy(policy)
    P_pi = np.einsum("sa,sat->st", policy, mdp.transitions)
    mu = mdp.distribution(s0)
    g = mdp.gamma
    d = np.zeros(mdp.n_states)
    w = 1.0 - g
    while True:
        d += w * mu
        w *= g
        if w < tail * (1.0 - g) or g == 0.0:
            break
        mu = mu @ P_pi
    return d


@dataclass(frozen=True)
class PdlResult:
    value_gap: float  # V^{new}(s0) - V^{old}(s0)
    advantage_side: float  # 1/(1-gamma) E_{d^new} E_{a~new} A^{old}
    residual: float


def performance_difference_check(mdp: ExplicitMdp, policy_old: np.ndarray, policy_new: np.ndarray, s0) -> PdlResult:
    old = exact_policy_evaluation(mdp, policy_old)
    new = exact_policy_evaluation(mdp, policy_new)
    mu = mdp.distribution(s0)
    gap = float(mu @ new.V - mu @ old.V)
    d = visitation_distribution(mdp, policy_new, mu)
    adv = (policy_new * old.advantage()).sum(axis=1)
    side = float(d @ adv) / (1.0 - mdp.gamma)
    return PdlResult(gap, side, abs(gap - side))


# --- KL-regularized improvement ---------------------------------------------------------


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for probability vectors; 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = p > 0
    if (q[m] <= 0).any():
        return float("inf")
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def kl_regularized_objective(mu: np.ndarray, pi: np.ndarray, q: np.ndarray, beta: float, direction: str = "forward") -> float:
    """L(mu) = E_mu[q] - beta * KL, with KL(pi||mu) ("forward") or KL(mu||pi) ("reverse")."""
    div = kl(pi, mu) if direction == "forward" else kl(mu, pi)
    return float(mu @ q) - beta * div


def kl_regularized_maximizer(pi: np.ndarray, q: np.ndarray, beta: float, direction: str = "forward") -> np.ndarray:
    """argmax_mu E_mu[q] - beta KL over the simplex.

    ``reverse`` (KL(mu||pi)) has the softmax solution mu ~ pi exp(q / beta).
    ``forward`` (KL(pi||mu)) has mu_a = beta pi_a / (lam - q_a) with the scalar
    lam > max q fixed by normalization; found by bracketed root finding.
    """
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    if beta <= 0:
        raise OracleError("beta must be positive for a KL-regularized maximizer")
    if direction == "reverse":
        z = np.log(np.where(pi > 0, pi, 1.0)) + q / beta
        z = np.where(pi > 0, z, -np.inf)
        z -= z.max()
        mu = np.exp(z)
        return mu / mu.sum()
    if direction != "forward":
        raise OracleError(f"unknown KL direction {direction!r}")
    if (pi <= 0).any():
        raise OracleError("forward-KL maximizer needs a full-support reference policy")
    qmax = q.max()
    amax = int(np.argmax(q))

    def excess(lam: float) -> float:
        return float(np.sum(beta * pi / (lam - q))) - 1.0

    lo = qmax + beta * pi[amax]
    hi = qmax + beta
    if excess(lo) <= 0.0:
        lam = lo
    elif excess(hi) >= 0.0:
        # constant q puts the root exactly at hi; rounding can push it a hair past
        lam = hi
    else:
        lam = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    mu = beta * pi / (lam - q)
    return mu / mu.sum()


@dataclass(frozen=True, eq=False)
class Theorem2Result:
    lhs: float
    rhs: float  # uses KL(pi_old || pi_new), the direction the per-state argument establishes
    rhs_displayed: float  # uses KL(pi_new || pi_old), as in the final displayed inequality
    eps_q: float
    delta: np.ndarray
    kl_forward: np.ndarray  # per-state KL(pi_old || pi_new)
    kl_reverse: np.ndarray  # per-state KL(pi_new || pi_old)
    visitation: np.ndarray

    @property
    def holds(self) -> bool:
        return self.lhs >= self.rhs - 1e-12

    @property
    def holds_displayed(self) -> bool:
        return self.lhs >= self.rhs_displayed - 1e-12


def optimization_slack(pi_old: np.ndarray, pi_new: np.ndarray, q_hat: np.ndarray, beta: float) -> float:
    """delta_s = sup_mu L_s(mu) - L_s(pi_new) for the forward-KL objective at one state."""
    mu = kl_regularized_maximizer(pi_old, q_hat, beta, "forward")
    best = kl_regularized_objective(mu, pi_old, q_hat, beta, "forward")
    return max(0.0, best - kl_regularized_objective(pi_new, pi_old, q_hat, beta, "forward"))


def theorem2_bound_check(
    mdp: ExplicitMdp, policy_old: np.ndarray, policy_new: np.ndarray, q_hat: np.ndarray, beta: float, s0
) -> Theorem2Result:
    """Evaluate both sides of the approximate KL-regularized improvement bound."""
    old = exact_policy_evaluation(mdp, policy_old)
    new = exact_policy_evaluation(mdp, policy_new)
    mu0 = mdp.distribution(s0)
    lhs = float(mu0 @ new.V - mu0 @ old.V)
    nt = mdp.nonterminal
    mask = mdp.action_mask & nt[:, None]
    eps_q = float(np.max(np.abs(q_hat - old.Q)[mask]))
    S = mdp.n_states
    delta = np.zeros(S)
    kl_f = np.zeros(S)
    kl_r = np.zeros(S)
    for s in np.flatnonzero(nt):
        m = mdp.action_mask[s]
        p_old, p_new, q = policy_old[s, m], policy_new[s, m], q_hat[s, m]
        delta[s] = optimization_slack(p_old, p_new, q, beta)
        kl_f[s] = kl(p_old, p_new)
        kl_r[s] = kl(p_new, p_old)
    d = visitation_distribution(mdp, policy_new, mu0)
    scale = 1.0 / (1.0 - mdp.gamma)
    rhs = scale * float(d @ (beta * kl_f - delta - 2 * eps_q))
    rhs_disp = scale * float(d @ (beta * kl_r - delta - 2 * eps_q))
    return Theorem2Result(lhs, rhs, rhs_disp, eps_q, delta, kl_f, kl_r, d)


# --- random instances for verification ----------------------------------------------


def random_mdp(
    rng: np.random.Generator,
    n_states: int = 5,
    n_actions: int = 3,
    gamma: float = 0.9,
    n_terminal: int = 1,
    sparsity: float = 0.0,
) -> ExplicitMdp:
    """Random MDP with ``n_terminal`` absorbing states at the end of the index range."""
    S, A = n_states, n_actions
    P = rng.random((S, A, S)) ** 2
    if sparsity > 0:
        P *= rng.random((S, A, S)) >= sparsity
        P[:, :, -1] += 1e-3
    P /= P.sum(axis=2, keepdims=True)
    terminal = np.zeros(S, dtype=bool)
    terminal[S - n_terminal :] = True
    mask = np.ones((S, A), dtype=bool)
    for s in np.flatnonzero(terminal):
        P[s] = 0.0
        P[s, :, s] = 1.0
    reward = rng.random(S)
    initial = np.zeros(S)
    initial[0] = 1.0
    return ExplicitMdp(P, reward, terminal, mask, gamma, initial)


def random_policy(mdp: ExplicitMdp, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    pol = rng.dirichlet(np.full(mdp.n_actions, concentration), size=mdp.n_states)
    pol = np.where(mdp.action_mask, pol + 1e-6, 0.0)
    return pol / pol.sum(axis=1, keepdims=True)
