"""Policy improvement as a single-turn, token-level problem.

The frozen Q estimate scores each complete response at its end event; every
intermediate token reward is zero. The update is clipped PPO on per-token
ratios with an exact per-context KL penalty.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from .conv_mdp import ConversationState, MdpError, ResponseSpace
from .oracle import optimization_slack
from .policy import PolicyParams, ResponsePaths, backprop_table, response_logprob_table


class PpoError(ValueError):
    pass


class QModel(Protocol):
    """Anything that scores every response of a state (fitted or oracle Q)."""

    def context_key(self, state: ConversationState) -> Any: ...

    def values(self, state: ConversationState) -> np.ndarray: ...


# --- prompts --------------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptContext:
    serialized_state: str
    origin_state_id: str = ""

    @property
    def state(self) -> ConversationState:
        return parse_prompt(self)


def build_prompt(state: ConversationState, origin_state_id: str = "") -> PromptContext:
    """Canonical text encoding of the whole history, suggestions included."""
    if state.is_terminal:
        raise MdpError("cannot build a prompt from a terminal state")
    return PromptContext(json.dumps(state.to_record(), sort_keys=True, separators=(",", ":")), origin_state_id)


def parse_prompt(prompt: PromptContext) -> ConversationState:
    return ConversationState.from_record(json.loads(prompt.serialized_state))


# --- config and stats ---------------------------------------------------------------------

BASELINES = ("none", "mean", "learned-value")


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    kl_coef: float = 0.01
    kl_direction: str = "reverse"  # "reverse" = KL(new||old); "forward" = KL(old||new)
    learning_rate: float = 0.05
    minibatch_size: int = 4096
    epochs_per_batch: int = 4
    baseline_mode: str = "mean"
    group_size: int = 4
    kl_ceiling: float = 2.0
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.clip_epsilon > 0:
            raise PpoError("clip_epsilon must be positive")
        if self.kl_coef < 0:
            raise PpoError("kl_coef must be non-negative")
        if self.learning_rate < 0:
            raise PpoError("learning_rate must be non-negative")
        if self.minibatch_size < 1 or self.epochs_per_batch < 1 or self.group_size < 1:
            raise PpoError("minibatch_size, epochs_per_batch and group_size must be positive")
        if self.baseline_mode not in BASELINES:
            raise PpoError(f"baseline_mode must be one of {BASELINES}")
        if self.kl_direction not in ("forward", "reverse"):
            raise PpoError("kl_direction must be 'forward' or 'reverse'")
        if self.optimizer not in ("adam", "sgd"):
            raise PpoError("optimizer must be 'adam' or 'sgd'")
        if not self.kl_ceiling > 0:
            raise PpoError("kl_ceiling must be positive")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PpoConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PpoError(f"unknown PPO config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass(frozen=True)
class PpoStats:
    objective_before: float
    objective_after: float
    mean_kl: float  # exact response-level KL(old || new), averaged over prompts
    mean_kl_reverse: float
    optimization_slack_proxy: float
    local_improvement_rate: float
    true_slack: float  # mean exact forward-KL slack over prompt states, for the trained beta
    n_samples: int
    epochs_run: int
    diverged: bool
    epochs: tuple[dict[str, float], ...] = field(default=(), repr=False)

    def summary(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("epochs")
        return d


# --- scalar pieces ------------------------------------------------------------------------------


def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """min(r A, clip(r, 1-eps, 1+eps) A), elementwise."""
    r = np.asarray(ratio, dtype=float)
    A = np.asarray(advantage, dtype=float)
    if not (np.isfinite(r).all() and np.isfinite(A).all()) or not np.isfinite(clip_epsilon):
        raise PpoError("clipped_surrogate needs finite inputs")
    if (r <= 0).any():
        raise PpoError("ratios must be positive")
    out = np.minimum(r * A, np.clip(r, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * A)
    return float(out) if out.ndim == 0 else out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _context_kl(logp_a: np.ndarray, logp_b: np.ndarray) -> np.ndarray:
    """KL(a || b) along the last axis."""
    return np.sum(np.exp(logp_a) * (logp_a - logp_b), axis=-1)


def _response_tables(policy: PolicyParams, space: ResponseSpace) -> np.ndarray:
    return np.exp(response_logprob_table(policy, space))


def _state_keys(policy: PolicyParams, states: Sequence[ConversationState]) -> np.ndarray:
    return np.fromiter((policy.spec.keyer.key(s) for s in states), dtype=np.int64, count=len(states))


def _space(policy: PolicyParams) -> ResponseSpace:
    return ResponseSpace(policy.spec.vocab_size, policy.spec.max_msg_len)


def kl_regularized_objective(
    policy_new: PolicyParams,
    policy_old: PolicyParams,
    states: Sequence[ConversationState],
    q: QModel,
    beta: float,
    direction: str = "forward",
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
) -> float:
    """E_s[E_{a~new} Q(s,a) - beta KL] over ``states``.

    Without ``rng`` both terms are computed exactly by enumerating every response.
    With ``rng`` the Q term is a Monte Carlo average over responses drawn from the
    new policy and the KL is the sum of exact per-token KLs along responses drawn
    from the policy the KL expectation is taken under.
    """
    if beta < 0:
        raise PpoError("beta must be non-negative")
    if direction not in ("forward", "reverse"):
        raise PpoError("direction must be 'forward' or 'reverse'")
    if not states:
        raise PpoError("no states to evaluate")
    space = _space(policy_old)
    keys = _state_keys(policy_old, states)
    qv = np.array([q.values(s) for s in states])
    lp_new = response_logprob_table(policy_new, space)[keys]
    lp_old = response_logprob_table(policy_old, space)[keys]
    if rng is None:
        value = np.sum(np.exp(lp_new) * qv, axis=1)
        if direction == "forward":
            div = np.sum(np.exp(lp_old) * (lp_old - lp_new), axis=1)
        else:
            div = np.sum(np.exp(lp_new) * (lp_new - lp_old), axis=1)
        return float(np.mean(value - beta * div))
    paths = ResponsePaths.build(space)
    sampler_lp = lp_old if direction == "forward" else lp_new
    tok_a, tok_b = policy_old.logprob_table(), policy_new.logprob_table()
    if direction == "reverse":
        tok_a, tok_b = tok_b, tok_a
    ctx_kl = _context_kl(tok_a, tok_b)  # (K, L, P)
    total = 0.0
    for i in range(len(states)):
        a_new = _draw(rng, np.exp(lp_new[i]), n_samples)
        a_kl = _draw(rng, np.exp(sampler_lp[i]), n_samples)
        pos = np.broadcast_to(np.arange(space.max_len), (n_samples, space.max_len))
        kl_tok = ctx_kl[keys[i], pos, paths.prev[a_kl]] * paths.valid[a_kl]
        total += qv[i, a_new].mean() - beta * kl_tok.sum(axis=1).mean()
    return total / len(states)


def _draw(rng: np.random.Generator, probs: np.ndarray, n: int) -> np.ndarray:
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    return np.minimum(idx, len(probs) - 1)


@dataclass(frozen=True)
class ImprovementCheck:
    margins: np.ndarray
    violations: int
    tol: float

    @property
    def rate(self) -> float:
        return float(np.mean(self.margins >= -self.tol)) if len(self.margins) else 1.0


def local_improvement_check(
    policy_new: PolicyParams, policy_old: PolicyParams, q: QModel, states: Sequence[ConversationState], tol: float = 1e-6
) -> ImprovementCheck:
    """Per-state E_{a~new}[Q(s,a)] - E_{a~old}[Q(s,a)], exact over the response set."""
    for s in states:
        if s.is_terminal:
            raise MdpError("local_improvement_check needs non-terminal states")
    if not states:
        return ImprovementCheck(np.zeros(0), 0, tol)
    space = _space(policy_old)
    keys = _state_keys(policy_old, states)
    diff = _response_tables(policy_new, space)[keys] - _response_tables(policy_old, space)[keys]
    qv = np.array([q.values(s) for s in states])
    margins = np.sum(diff * qv, axis=1)
    return ImprovementCheck(margins, int(np.sum(margins < -tol)), tol)


# --- the PPO loop -------------------------------------------------------------------------------


@dataclass
class _Batch:
    key: np.ndarray  # (n,)
    prev: np.ndarray  # (n, L)
    event: np.ndarray  # (n, L)
    valid: np.ndarray  # (n, L)
    old_logp: np.ndarray  # (n, L)
    adv: np.ndarray  # (n,)
    reward: np.ndarray  # (n,)

    def take(self, idx: np.ndarray) -> _Batch:
        return _Batch(*(getattr(self, f)[idx] for f in ("key", "prev", "event", "valid", "old_logp", "adv", "reward")))

    def __len__(self) -> int:
        return len(self.key)


def _baseline(rewards: np.ndarray, groups: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return np.zeros_like(rewards)
    sums = np.bincount(groups, weights=rewards)
    counts = np.bincount(groups)
    return (sums / counts)[groups]


def _build_batch(
    policy: PolicyParams, states: list[ConversationState], prompt_ids: np.ndarray, q: QModel, config: PpoConfig, rng: np.random.Generator
) -> _Batch:
    space = _space(policy)
    paths = ResponsePaths.build(space)
    table = _response_tables(policy, space)
    n_prompts = len(prompt_ids)
    G = config.group_size
    keys = _state_keys(policy, states)
    resp = np.empty((n_prompts, G), dtype=np.int64)
    reward = np.empty((n_prompts, G))
    for j, pid in enumerate(prompt_ids):
        resp[j] = _draw(rng, table[keys[pid]], G)
        reward[j] = q.values(states[pid])[resp[j]]
    key = np.repeat(keys[prompt_ids], G)
    resp = resp.ravel()
    reward = reward.ravel()
    if config.baseline_mode == "mean":
        groups = np.repeat(prompt_ids, G)  # identical prompts pool their samples
    else:
        ctx = {}
        groups = np.repeat([ctx.setdefault(q.context_key(states[p]), len(ctx)) for p in prompt_ids], G)
    adv = reward - _baseline(reward, groups, config.baseline_mode)
    prev, event, valid = paths.prev[resp], paths.event[resp], paths.valid[resp]
    pos = np.arange(space.max_len)[None, :]
    old_logp = policy.logprob_table()[key[:, None], pos, prev, event] * valid
    return _Batch(key, prev, event, valid, old_logp, adv, reward)


class _Adam:
    def __init__(self, dim: int, lr: float, betas: tuple[float, float], eps: float):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def _objective_and_grad(
    policy: PolicyParams, old_logp_table: np.ndarray, weights: np.ndarray, mb: _Batch, config: PpoConfig, need_grad: bool = True
) -> tuple[float, float, np.ndarray | None]:
    """Mean over samples of sum_t clipped surrogate - beta * sum_t KL(context)."""
    cur = policy.with_weights(weights)
    logp = cur.logprob_table()
    n, L = mb.prev.shape
    pos = np.broadcast_to(np.arange(L), (n, L))
    new_lp = logp[mb.key[:, None], pos, mb.prev, mb.event]
    ratio = np.exp(np.where(mb.valid, new_lp - mb.old_logp, 0.0))
    A = mb.adv[:, None]
    eps = config.clip_epsilon
    surr = np.minimum(ratio * A, np.clip(ratio, 1 - eps, 1 + eps) * A) * mb.valid
    if config.kl_direction == "forward":
        ctx_kl = _context_kl(old_logp_table, logp)
    else:
        ctx_kl = _context_kl(logp, old_logp_table)
    kl_tok = ctx_kl[mb.key[:, None], pos, mb.prev] * mb.valid
    surrogate = float(surr.sum() / n)
    penalty = float(kl_tok.sum() / n)
    if not need_grad:
        return surrogate, penalty, None
    # d surr / d logp_token: r A where the unclipped branch is active
    active = (ratio * A <= np.clip(ratio, 1 - eps, 1 + eps) * A) & mb.valid
    coef = np.where(active, ratio * A, 0.0) / n
    Gt = np.zeros(logp.shape)
    p = np.exp(logp)
    k, pp, pv, ev = mb.key[:, None], pos, mb.prev, mb.event
    sel = mb.valid
    k, pp, pv, ev, c = np.broadcast_to(k, (n, L))[sel], pp[sel], pv[sel], ev[sel], coef[sel]
    np.add.at(Gt, (k, pp, pv, ev), c)
    ctx_weight = np.zeros(logp.shape[:3])
    np.add.at(ctx_weight, (k, pp, pv), c)
    Gt -= ctx_weight[..., None] * p
    if config.kl_coef > 0:
        visits = np.zeros(logp.shape[:3])
        np.add.at(visits, (k, pp, pv), 1.0 / n)
        if config.kl_direction == "forward":
            dkl = p - np.exp(old_logp_table)
        else:
            dkl = p * (logp - old_logp_table - ctx_kl[..., None])
        Gt -= config.kl_coef * visits[..., None] * dkl
    return surrogate, penalty, backprop_table(policy, Gt)


def _exact_kls(old: PolicyParams, new: PolicyParams, keys: np.ndarray) -> tuple[float, float]:
    space = _space(old)
    a = response_logprob_table(old, space)[keys]
    b = response_logprob_table(new, space)[keys]
    fwd = np.sum(np.exp(a) * (a - b), axis=1)
    rev = np.sum(np.exp(b) * (b - a), axis=1)
    return float(fwd.mean()), float(rev.mean())


def ppo_improve(
    policy: PolicyParams, prompts: Sequence[PromptContext], q: QModel, config: PpoConfig, seed: int | np.random.SeedSequence = 0
) -> tuple[PolicyParams, PpoStats]:
    """One policy-improvement step against the frozen ``q``."""
    if not prompts:
        raise PpoError("ppo_improve needs at least one prompt")
    rng = np.random.default_rng(seed)
    uniq: dict[str, int] = {}
    prompt_ids = np.array([uniq.setdefault(p.serialized_state, len(uniq)) for p in prompts], dtype=np.int64)
    states = [ConversationState.from_record(json.loads(s)) for s in uniq]
    for s in states:
        if s.is_terminal:
            raise MdpError("prompts must be non-terminal states")

    old_logp_table = policy.logprob_table()
    batch = _build_batch(policy, states, prompt_ids, q, config, rng)
    n = len(batch)
    w = policy.weights.copy()
    adam = _Adam(len(w), config.learning_rate, config.adam_betas, config.adam_eps)
    prompt_keys = _state_keys(policy, states)[prompt_ids]

    def full_objective(weights: np.ndarray) -> float:
        s, pen, _ = _objective_and_grad(policy, old_logp_table, weights, batch, config, need_grad=False)
        return s - config.kl_coef * pen

    start = full_objective(w)
    history = [start]
    epochs: list[dict[str, float]] = []
    diverged = False
    run = 0
    for epoch in range(config.epochs_per_batch):
        w_epoch = w.copy()
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            mb = batch.take(order[lo : lo + config.minibatch_size])
            _, _, g = _objective_and_grad(policy, old_logp_table, w, mb, config)
            if config.optimizer == "adam":
                w = w + adam.step(g)
            else:
                w = w + config.learning_rate * g
        kl_f, kl_r = _exact_kls(policy, policy.with_weights(w), prompt_keys)
        if kl_f > config.kl_ceiling or not np.isfinite(w).all():
            w = w_epoch
            diverged = True
            epochs.append({"epoch": epoch, "objective": history[-1], "kl": kl_f, "kl_reverse": kl_r, "reverted": 1.0})
            break
        obj = full_objective(w)
        history.append(obj)
        run += 1
        epochs.append({"epoch": epoch, "objective": obj, "kl": kl_f, "kl_reverse": kl_r, "reverted": 0.0})

    new = policy.with_weights(w)
    kl_f, kl_r = _exact_kls(policy, new, prompt_keys)
    check = local_improvement_check(new, policy, q, states)
    beta = config.kl_coef
    if beta > 0:
        space = _space(policy)
        t_old, t_new = _response_tables(policy, space), _response_tables(new, space)
        skeys = _state_keys(policy, states)
        slack = [optimization_slack(t_old[k], t_new[k], q.values(s), beta) for k, s in zip(skeys, states)]
        true_slack = float(np.mean(slack))
    else:
        true_slack = float("nan")
    stats = PpoStats(
        objective_before=start,
        objective_after=history[-1],
        mean_kl=kl_f,
        mean_kl_reverse=kl_r,
        optimization_slack_proxy=float(max(history) - history[-1]),
        local_improvement_rate=check.rate,
        true_slack=true_slack,
        n_samples=n,
        epochs_run=run,
        diverged=diverged,
        epochs=tuple(epochs),
    )
    return new, stats
