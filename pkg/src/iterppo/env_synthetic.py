"""Synthetic Suggested-Response environment with a latent customer intent.

Each step has two stages of randomness. The business turns the agent's
suggestion into an actual message (accept, edit one token, rewrite under the
suggestion's influence, write something unrelated, or stop). The customer then
moves between latent intent levels depending on the class of that message
(probe / offer / generic), may report the outcome, and replies from an
intent-conditioned message table or goes silent.

:func:`enumerate_env` builds the exact belief MDP over agent-observable
histories, which :mod:`iterppo.oracle` solves.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .conv_mdp import (
    ABSTAIN,
    Abstain,
    AbsorbingStateError,
    ConversationState,
    MdpConfig,
    MdpError,
    Message,
    Respond,
    ResponseSpace,
    SuggestedAction,
    append_business_reply,
    append_customer_turn,
    initial_state,
)
from .oracle import ExplicitMdp

INTENTS = ("cold", "warm", "hot")
CLASSES = ("probe", "offer", "generic")
BEHAVIORS = ("accept", "edit", "influenced", "unrelated", "stop")
STOP = len(CLASSES)  # index of "business stopped" in class distributions
PROB_TOL = 1e-12


class EnvConfigError(ValueError):
    pass


class EnumerationTooLarge(RuntimeError):
    pass


def _table(rows) -> tuple[tuple[Message, float], ...]:
    return tuple((tuple(int(t) for t in m), float(p)) for m, p in rows)


def _check_dist(name: str, probs) -> None:
    probs = np.asarray(probs, dtype=float)
    if (probs < 0).any() or abs(probs.sum() - 1.0) > PROB_TOL:
        raise EnvConfigError(f"{name} must be a probability vector (sum={probs.sum()!r})")


@dataclass(frozen=True, eq=False)
class EnvConfig:
    mdp: MdpConfig
    probe_tokens: tuple[int, ...]
    offer_tokens: tuple[int, ...]
    adoption_probs: tuple[float, ...]  # accept, edit, influenced, unrelated, stop
    influence: float  # per-token chance an influenced rewrite copies a suggestion token
    business_drafts: tuple[tuple[Message, float], ...]
    initial_intent: tuple[float, ...]
    intent_transition: np.ndarray  # (intent, message class, next intent)
    outcome_prob_by_intent: np.ndarray  # (next intent, message class)
    openers: tuple[tuple[tuple[Message, float], ...], ...]  # per intent
    customer_messages: tuple[tuple[tuple[Message, float], ...], ...]  # per intent
    customer_stop: tuple[float, ...]  # per intent
    seed: int = 0
    enumeration_budget: int = 2_000_000
    name: str = ""

    def __post_init__(self) -> None:
        V = self.mdp.vocab_size
        if set(self.probe_tokens) & set(self.offer_tokens):
            raise EnvConfigError("probe and offer token sets overlap")
        for t in self.probe_tokens + self.offer_tokens:
            if not 0 <= t < V:
                raise EnvConfigError(f"class token {t} outside the vocabulary")
        if len(self.adoption_probs) != len(BEHAVIORS):
            raise EnvConfigError(f"adoption_probs needs {len(BEHAVIORS)} entries")
        _check_dist("adoption_probs", self.adoption_probs)
        if not 0.0 <= self.influence <= 1.0:
            raise EnvConfigError("influence must lie in [0, 1]")
        _check_dist("business_drafts", [p for _, p in self.business_drafts])
        _check_dist("initial_intent", self.initial_intent)
        T = np.asarray(self.intent_transition, dtype=float)
        O = np.asarray(self.outcome_prob_by_intent, dtype=float)
        n_i, n_c = len(INTENTS), len(CLASSES)
        if T.shape != (n_i, n_c, n_i):
            raise EnvConfigError(f"intent_transition must have shape {(n_i, n_c, n_i)}")
        for i, k in itertools.product(range(n_i), range(n_c)):
            _check_dist(f"intent_transition[{INTENTS[i]}][{CLASSES[k]}]", T[i, k])
        if O.shape != (n_i, n_c) or (O < 0).any() or (O > 1).any():
            raise EnvConfigError("outcome_prob_by_intent must be (intent, class) probabilities")
        object.__setattr__(self, "intent_transition", T)
        object.__setattr__(self, "outcome_prob_by_intent", O)
        if len(self.openers) != n_i or len(self.customer_messages) != n_i or len(self.customer_stop) != n_i:
            raise EnvConfigError("openers, customer_messages and customer_stop need one entry per intent")
        for i in range(n_i):
            _check_dist(f"openers[{INTENTS[i]}]", [p for _, p in self.openers[i]])
            _check_dist(f"customer_messages[{INTENTS[i]}]", [p for _, p in self.customer_messages[i]])
            if not 0.0 <= self.customer_stop[i] <= 1.0:
                raise EnvConfigError("customer_stop entries must be probabilities")
        for m, _ in self._all_messages():
            if len(m) == 0:
                raise EnvConfigError("table messages must be non-empty (silence is modeled separately)")
            self.mdp.check_message(m)

    def _all_messages(self):
        yield from self.business_drafts
        for tab in self.openers + self.customer_messages:
            yield from tab

    # --- (de)serialization --------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EnvConfig:
        m = d["mdp"]
        return cls(
            mdp=MdpConfig(float(m["discount"]), int(m["horizon_cap"]), int(m["vocab_size"]), int(m["max_msg_len"])),
            probe_tokens=tuple(d["probe_tokens"]),
            offer_tokens=tuple(d["offer_tokens"]),
            adoption_probs=tuple(float(x) for x in d["adoption_probs"]),
            influence=float(d["influence"]),
            business_drafts=_table(d["business_drafts"]),
            initial_intent=tuple(float(x) for x in d["initial_intent"]),
            intent_transition=np.array(d["intent_transition"], dtype=float),
            outcome_prob_by_intent=np.array(d["outcome_prob_by_intent"], dtype=float),
            openers=tuple(_table(t) for t in d["openers"]),
            customer_messages=tuple(_table(t) for t in d["customer_messages"]),
            customer_stop=tuple(float(x) for x in d["customer_stop"]),
            seed=int(d.get("seed", 0)),
            enumeration_budget=int(d.get("enumeration_budget", 2_000_000)),
            name=str(d.get("name", "")),
        )

    def to_dict(self) -> dict[str, Any]:
        def tab(rows):
            return [[list(m), p] for m, p in rows]

        return {
            "name": self.name,
            "mdp": {
                "discount": self.mdp.discount,
                "horizon_cap": self.mdp.horizon_cap,
                "vocab_size": self.mdp.vocab_size,
                "max_msg_len": self.mdp.max_msg_len,
            },
            "probe_tokens": list(self.probe_tokens),
            "offer_tokens": list(self.offer_tokens),
            "adoption_probs": list(self.adoption_probs),
            "influence": self.influence,
            "business_drafts": tab(self.business_drafts),
            "initial_intent": list(self.initial_intent),
            "intent_transition": self.intent_transition.tolist(),
            "outcome_prob_by_intent": self.outcome_prob_by_intent.tolist(),
            "openers": [tab(t) for t in self.openers],
            "customer_messages": [tab(t) for t in self.customer_messages],
            "customer_stop": list(self.customer_stop),
            "seed": self.seed,
            "enumeration_budget": self.enumeration_budget,
        }

    @classmethod
    def load(cls, path: str | Path) -> EnvConfig:
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d.get("env", d))

    def replace(self, **changes) -> EnvConfig:
        d = self.to_dict()
        d.update(changes)
        return EnvConfig.from_dict(d)

    # --- derived quantities -------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return self.mdp.vocab_size

    def message_class(self, msg: Message) -> int:
        """probe / offer by majority of designated tokens, generic on ties or neither."""
        n_probe = sum(t in self.probe_tokens for t in msg)
        n_offer = sum(t in self.offer_tokens for t in msg)
        if n_probe > n_offer:
            return 0
        if n_offer > n_probe:
            return 1
        return 2

    def customer_catalog(self) -> tuple[Message, ...]:
        seen: dict[Message, None] = {}
        for tab in self.openers + self.customer_messages:
            for m, p in tab:
                if p > 0:
                    seen.setdefault(m, None)
        return tuple(seen)

    def keyer(self) -> StateKeyer:
        catalog = self.customer_catalog()
        owners = []
        for m in catalog:
            who = {i for i in range(len(INTENTS)) for tab in (self.openers[i], self.customer_messages[i]) for mm, p in tab if mm == m and p > 0}
            owners.append(next(iter(who)) if len(who) == 1 else -1)
        return StateKeyer(self.mdp.horizon_cap, catalog, tuple(owners))


def load_toy_shop() -> EnvConfig:
    """The checked-in reference configuration (vocab 12, L=2, horizon 3)."""
    text = resources.files("iterppo").joinpath("configs/toy_shop.json").read_text()
    return EnvConfig.from_dict(json.loads(text)["env"])


def toy_shop_path() -> Path:
    return Path(str(resources.files("iterppo").joinpath("configs/toy_shop.json")))


@dataclass(frozen=True)
class StateKeyer:
    """Agent-observable summary of a state: (turn index, latest customer message)."""

    horizon: int
    catalog: tuple[Message, ...]
    catalog_intent: tuple[int, ...]  # -1 where a message is shared between intents
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_lookup", {m: i for i, m in enumerate(self.catalog)})

    @property
    def n_messages(self) -> int:
        return len(self.catalog) + 1  # + unknown

    @property
    def n_keys(self) -> int:
        return self.horizon * self.n_messages

    def message_index(self, msg: Message) -> int:
        return self._lookup.get(msg, len(self.catalog))

    def message_intent(self, msg_idx: int) -> int:
        """Intent revealed by a catalog message; ``len(INTENTS)`` when ambiguous or unknown."""
        if msg_idx >= len(self.catalog) or self.catalog_intent[msg_idx] < 0:
            return len(INTENTS)
        return self.catalog_intent[msg_idx]

    def key(self, state: ConversationState) -> int:
        turn = min(max(state.turn_index, 1), self.horizon)
        return (turn - 1) * self.n_messages + self.message_index(state.latest.customer_msg)

    def decode(self, key: int) -> tuple[int, int]:
        return key // self.n_messages + 1, key % self.n_messages


# --- sampling --------------------------------------------------------------------------


def _draw(rng: np.random.Generator, probs) -> int:
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if u < acc:
            return i
    return len(probs) - 1


def _draw_msg(rng: np.random.Generator, table) -> Message:
    return table[_draw(rng, [p for _, p in table])][0]


class EnvInstance:
    """One simulated conversation stream; owns an RNG and the hidden customer intent."""

    def __init__(self, config: EnvConfig, seed: int | np.random.SeedSequence | None = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.intent: int | None = None

    def clone(self, seed) -> EnvInstance:
        return EnvInstance(self.config, seed)

    def reset(self) -> ConversationState:
        cfg = self.config
        self.intent = _draw(self.rng, cfg.initial_intent)
        return initial_state(_draw_msg(self.rng, cfg.openers[self.intent]))

    def business_respond(self, state: ConversationState, action: SuggestedAction) -> Message:
        if state.is_terminal:
            raise AbsorbingStateError("business_respond on a terminal state")
        cfg = self.config
        rng = self.rng
        behavior = BEHAVIORS[_draw(rng, cfg.adoption_probs)]
        if behavior == "stop":
            return ()
        if isinstance(action, Abstain) or behavior == "unrelated":
            return _draw_msg(rng, cfg.business_drafts)
        a = action.message
        V = cfg.vocab_size
        if behavior == "accept":
            return a
        if behavior == "edit":
            pos = int(rng.integers(len(a)))
            tok = int(rng.integers(V - 1))
            if tok >= a[pos]:
                tok += 1
            return a[:pos] + (tok,) + a[pos + 1 :]
        out = []
        for _ in range(len(a)):
            if rng.random() < cfg.influence:
                out.append(a[int(rng.integers(len(a)))])
            else:
                out.append(int(rng.integers(V)))
        return tuple(out)

    def customer_respond(self, state: ConversationState, business_msg: Message) -> tuple[Message, bool]:
        if state.is_terminal:
            raise AbsorbingStateError("customer_respond on a terminal state")
        if state.latest.business_msg != tuple(business_msg):
            raise MdpError("customer_respond expects the state closed by this business message")
        if self.intent is None:
            raise MdpError("environment was not reset")
        cfg = self.config
        k = cfg.message_class(business_msg)
        j = _draw(self.rng, cfg.intent_transition[self.intent, k])
        self.intent = j
        outcome = self.rng.random() < cfg.outcome_prob_by_intent[j, k]
        if not outcome and self.rng.random() < cfg.customer_stop[j]:
            return (), False
        return _draw_msg(self.rng, cfg.customer_messages[j]), bool(outcome)

    def step(self, state: ConversationState, action: SuggestedAction) -> ConversationState:
        m = self.business_respond(state, action)
        s = append_business_reply(state, action, m)
        if s.is_terminal:
            return s
        c, o = self.customer_respond(s, m)
        return append_customer_turn(s, c, o, self.config.mdp.horizon_cap)


# --- exact kernels ----------------------------------------------------------------------


def business_message_distribution(config: EnvConfig, action: SuggestedAction) -> dict[Message, float]:
    """Exact P(m | s, a) by enumerating every branch of the adoption model."""
    out: dict[Message, float] = {}

    def add(m: Message, p: float) -> None:
        if p > 0:
            out[m] = out.get(m, 0.0) + p

    acc, edit, infl, unrel, stop = config.adoption_probs
    add((), stop)
    if isinstance(action, Abstain):
        for m, p in config.business_drafts:
            add(m, (1.0 - stop) * p)
        return out
    a = action.message
    V = config.vocab_size
    add(a, acc)
    for pos in range(len(a)):
        for tok in range(V):
            if tok != a[pos]:
                add(a[:pos] + (tok,) + a[pos + 1 :], edit / (len(a) * (V - 1)))
    tok_p = np.full(V, (1.0 - config.influence) / V)
    for t in a:
        tok_p[t] += config.influence / len(a)
    for m in itertools.product(range(V), repeat=len(a)):
        add(m, infl * float(np.prod(tok_p[list(m)])))
    for m, p in config.business_drafts:
        add(m, unrel * p)
    return out


def class_distribution(config: EnvConfig, action: SuggestedAction) -> np.ndarray:
    """P(class(m) | a) over (probe, offer, generic, stop)."""
    out = np.zeros(len(CLASSES) + 1)
    for m, p in business_message_distribution(config, action).items():
        out[STOP if len(m) == 0 else config.message_class(m)] += p
    return out


@dataclass(frozen=True, eq=False)
class EnumeratedEnv:
    """Explicit belief MDP plus the bridge back to conversation states."""

    config: EnvConfig
    mdp: ExplicitMdp
    responses: ResponseSpace
    keys: tuple  # per state: (turn, customer msg, belief) or a terminal label
    representatives: tuple  # per state: a positive-probability ConversationState (None for terminals)
    omniscient: bool
    _index: dict = field(repr=False)

    OUTCOME = "OUTCOME"
    END = "END"

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    def nonterminal_states(self) -> list[int]:
        return [int(s) for s in np.flatnonzero(self.mdp.nonterminal)]

    def index_of(self, state: ConversationState) -> int:
        """Oracle state of an agent-observable history (belief filter over the history)."""
        if self.omniscient:
            raise MdpError("histories do not identify omniscient states")
        if state.is_terminal:
            return self._index[self.OUTCOME if state.terminal.value == "OutcomeAchieved" else self.END]
        return self._index[belief_key(self.config, state)]

    def successors(self, s: int, a: int) -> dict[int, float]:
        row = self.mdp.transitions[s, a]
        return {int(t): float(row[t]) for t in np.flatnonzero(row)}

    def rows(self) -> list[tuple[ConversationState | None, tuple[SuggestedAction, ...], list[dict[int, float]]]]:
        """(state, available actions, successor distribution per action) for every state."""
        out = []
        for s in range(self.n_states):
            acts = tuple(a for a, ok in zip(self.responses.actions, self.mdp.action_mask[s]) if ok)
            succ = [self.successors(s, i) for i in np.flatnonzero(self.mdp.action_mask[s])]
            out.append((self.representatives[s], acts, succ))
        return out


def _round_belief(b: np.ndarray) -> tuple[float, ...]:
    return tuple(float(x) for x in np.round(b, 12) + 0.0)


def _customer_branches(config: EnvConfig, belief: np.ndarray, k: int, split: bool):
    """Yield (prob, outcome, customer msg, posterior) after a business message of class k.

    With ``split`` the next intent is kept explicit (one branch per intent).
    """
    T = config.intent_transition[:, k, :]
    nxt = belief @ T
    p_out = config.outcome_prob_by_intent[:, k]
    stop = np.asarray(config.customer_stop)
    groups = [np.eye(len(INTENTS))[j] * nxt for j in range(len(INTENTS))] if split else [nxt]
    for w in groups:
        p_o = float(w @ p_out)
        if p_o > 0:
            yield p_o, True, None, None
        quiet = w * (1.0 - p_out)
        p_stop = float(quiet @ stop)
        if p_stop > 0:
            yield p_stop, False, (), None
        speak = quiet * (1.0 - stop)
        msgs: dict[Message, np.ndarray] = {}
        for j in range(len(INTENTS)):
            for m, p in config.customer_messages[j]:
                if p > 0 and speak[j] > 0:
                    msgs.setdefault(m, np.zeros(len(INTENTS)))[j] += speak[j] * p
        for m, joint in msgs.items():
            total = float(joint.sum())
            yield total, False, m, joint / total


def _initial_branches(config: EnvConfig, split: bool):
    b0 = np.asarray(config.initial_intent)
    groups = [np.eye(len(INTENTS))[j] * b0 for j in range(len(INTENTS))] if split else [b0]
    for w in groups:
        msgs: dict[Message, np.ndarray] = {}
        for j in range(len(INTENTS)):
            for m, p in config.openers[j]:
                if p > 0 and w[j] > 0:
                    msgs.setdefault(m, np.zeros(len(INTENTS)))[j] += w[j] * p
        for m, joint in msgs.items():
            total = float(joint.sum())
            yield total, m, joint / total


def belief_key(config: EnvConfig, state: ConversationState) -> tuple:
    """Exact posterior over the latent intent given an observable, non-terminal history."""
    b0 = np.asarray(config.initial_intent, dtype=float)
    first = state.turns[0].customer_msg
    b = b0 * np.array([dict(config.openers[j]).get(first, 0.0) for j in range(len(INTENTS))])
    if b.sum() <= 0:
        raise MdpError(f"opener {first} has zero probability")
    b /= b.sum()
    for prev, turn in zip(state.turns[:-1], state.turns[1:]):
        k = config.message_class(prev.business_msg)
        nxt = b @ config.intent_transition[:, k, :]
        quiet = nxt * (1.0 - config.outcome_prob_by_intent[:, k]) * (1.0 - np.asarray(config.customer_stop))
        lik = np.array([dict(config.customer_messages[j]).get(turn.customer_msg, 0.0) for j in range(len(INTENTS))])
        b = quiet * lik
        if b.sum() <= 0:
            raise MdpError("history has zero probability under the environment")
        b /= b.sum()
    return (state.turn_index, state.latest.customer_msg, _round_belief(b))


def _realizing_pair(config: EnvConfig, responses: ResponseSpace, k: int) -> tuple[SuggestedAction, Message]:
    for a in responses.actions:
        for m, p in business_message_distribution(config, a).items():
            if p > 0 and len(m) > 0 and config.message_class(m) == k:
                return a, m
    raise MdpError(f"no business message of class {CLASSES[k]} is reachable")


def enumerate_env(config: EnvConfig, omniscient: bool = False) -> EnumeratedEnv:
    """Exact finite MDP over (turn, latest customer message, intent belief).

    In ``omniscient`` mode the belief is replaced by the true intent (debugging only).
    """
    mcfg = config.mdp
    V, L, H = mcfg.vocab_size, mcfg.max_msg_len, mcfg.horizon_cap
    bound = V**L * H
    if bound > config.enumeration_budget:
        raise EnumerationTooLarge(
            f"vocab_size^max_msg_len x horizon_cap = {V}^{L} x {H} = {bound} exceeds the budget {config.enumeration_budget}"
        )
    responses = ResponseSpace(V, L)
    A = len(responses)
    cls = np.array([class_distribution(config, a) for a in responses.actions])  # (A, 4)
    pairs = {k: _realizing_pair(config, responses, k) for k in range(len(CLASSES)) if cls[:, k].any()}

    keys: list = [EnumeratedEnv.OUTCOME, EnumeratedEnv.END]
    index = {k: i for i, k in enumerate(keys)}
    reps: list = [None, None]
    beliefs: list = [None, None]
    initial: dict[int, float] = {}

    def intern(key, belief, rep) -> int:
        if key not in index:
            index[key] = len(keys)
            keys.append(key)
            beliefs.append(belief)
            reps.append(rep)
        return index[key]

    for p, m, b in _initial_branches(config, omniscient):
        s = intern((1, m, _round_belief(b)), b, initial_state(m))
        initial[s] = initial.get(s, 0.0) + p

    # successor rows over message classes (+ stop), built breadth-first
    class_rows: dict[int, np.ndarray] = {}
    frontier = list(initial)
    while frontier:
        nxt_frontier = []
        for s in frontier:
            turn = keys[s][0]
            rows: dict[int, dict[int, float]] = {}
            for k in range(len(CLASSES)):
                row: dict[int, float] = {}
                if k not in pairs:
                    rows[k] = row
                    continue
                a, m = pairs[k]
                mid = append_business_reply(reps[s], a, m)
                for p, outcome, c, post in _customer_branches(config, beliefs[s], k, omniscient):
                    if outcome:
                        t = index[EnumeratedEnv.OUTCOME]
                    elif len(c) == 0 or turn >= H:
                        t = index[EnumeratedEnv.END]
                    else:
                        key = (turn + 1, c, _round_belief(post))
                        new = key not in index
                        t = intern(key, post, append_customer_turn(mid, c, False, H))
                        if new:
                            nxt_frontier.append(t)
                    row[t] = row.get(t, 0.0) + p
                rows[k] = row
            class_rows[s] = rows
        frontier = nxt_frontier

    S = len(keys)
    P = np.zeros((S, A, S))
    end = index[EnumeratedEnv.END]
    for s, rows in class_rows.items():
        M = np.zeros((len(CLASSES) + 1, S))
        for k, row in rows.items():
            for t, p in row.items():
                M[k, t] += p
        M[STOP, end] = 1.0
        P[s] = cls @ M
    for s in (0, 1):
        P[s, :, s] = 1.0
    # renormalize away floating drift from the branch sums
    P /= P.sum(axis=2, keepdims=True)
    reward = np.zeros(S)
    reward[index[EnumeratedEnv.OUTCOME]] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[[0, 1]] = True
    mask = np.ones((S, A), dtype=bool)
    mask[terminal, 1:] = False
    init = np.zeros(S)
    for s, p in initial.items():
        init[s] = p
    init /= init.sum()
    mdp = ExplicitMdp(P, reward, terminal, mask, mcfg.discount, init, tuple(keys))
    return EnumeratedEnv(config, mdp, responses, tuple(keys), tuple(reps), omniscient, index)
