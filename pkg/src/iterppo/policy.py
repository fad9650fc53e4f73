"""Token-level linear-softmax policy over suggested responses.

Generation events are the ``V`` vocabulary tokens plus END (index ``V``). END as
the first event is the reserved ABSTAIN decision; END later closes the response;
after ``L`` tokens generation stops without an END event.

The logit of event ``e`` in context (state key, position, previous token) is a
sum over indicator-feature blocks, each block owning one weight row per value of
its context components. A snapshot precomputes the full logits table so
sampling, scoring and exact response enumeration are table lookups.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .conv_mdp import (
    ABSTAIN,
    Abstain,
    ConversationState,
    MdpError,
    Message,
    Respond,
    ResponseSpace,
    SuggestedAction,
)
from .env_synthetic import INTENTS, EnumeratedEnv, StateKeyer

CHECKPOINT_VERSION = 1
COMPONENTS = ("turn", "cmsg", "cclass", "pos", "prev")
DEFAULT_BLOCKS = (("turn", "cmsg", "pos", "prev"),)


class PolicyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSpec:
    keyer: StateKeyer
    vocab_size: int
    max_msg_len: int
    blocks: tuple[tuple[str, ...], ...] = DEFAULT_BLOCKS

    def __post_init__(self) -> None:
        blocks = tuple(tuple(b) for b in self.blocks)
        for b in blocks:
            for c in b:
                if c not in COMPONENTS:
                    raise PolicyError(f"unknown feature component {c!r}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_events(self) -> int:
        return self.vocab_size + 1

    @property
    def end(self) -> int:
        return self.vocab_size

    @property
    def start(self) -> int:
        """``prev`` value at position 0."""
        return self.vocab_size

    def cardinality(self, comp: str) -> int:
        return {
            "turn": self.keyer.horizon,
            "cmsg": self.keyer.n_messages,
            "cclass": len(INTENTS) + 1,
            "pos": self.max_msg_len,
            "prev": self.vocab_size + 1,
        }[comp]

    @property
    def n_rows(self) -> int:
        return sum(int(np.prod([self.cardinality(c) for c in b])) for b in self.blocks)

    @property
    def dim(self) -> int:
        return self.n_rows * self.n_events

    @property
    def table_shape(self) -> tuple[int, int, int]:
        return (self.keyer.n_keys, self.max_msg_len, self.vocab_size + 1)

    def block_rows(self) -> list[np.ndarray]:
        """Per block, the weight row used by every (key, pos, prev) context."""
        n_keys, L, P = self.table_shape
        key = np.arange(n_keys)
        turn = key // self.keyer.n_messages
        cmsg = key % self.keyer.n_messages
        cclass = np.array([self.keyer.message_intent(int(m)) for m in cmsg])
        values = {
            "turn": turn[:, None, None],
            "cmsg": cmsg[:, None, None],
            "cclass": cclass[:, None, None],
            "pos": np.arange(L)[None, :, None],
            "prev": np.arange(P)[None, None, :],
        }
        out = []
        offset = 0
        for b in self.blocks:
            idx = np.zeros((1, 1, 1), dtype=np.int64)
            for c in b:
                idx = idx * self.cardinality(c) + values[c]
            out.append(np.broadcast_to(idx + offset, (n_keys, L, P)).copy())
            offset += int(np.prod([self.cardinality(c) for c in b]))
        return out

    def context(self, state: ConversationState, prefix: Message) -> tuple[int, int, int]:
        if len(prefix) >= self.max_msg_len:
            raise PolicyError(f"prefix {prefix} already has max_msg_len tokens")
        prev = self.start if len(prefix) == 0 else prefix[-1]
        return self.keyer.key(state), len(prefix), prev

    def to_dict(self) -> dict[str, Any]:
        return {
            "horizon": self.keyer.horizon,
            "catalog": [list(m) for m in self.keyer.catalog],
            "catalog_intent": list(self.keyer.catalog_intent),
            "vocab_size": self.vocab_size,
            "max_msg_len": self.max_msg_len,
            "blocks": [list(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureSpec:
        keyer = StateKeyer(int(d["horizon"]), tuple(tuple(m) for m in d["catalog"]), tuple(d["catalog_intent"]))
        return cls(keyer, int(d["vocab_size"]), int(d["max_msg_len"]), tuple(tuple(b) for b in d["blocks"]))

    @classmethod
    def for_env(cls, env_config, blocks=DEFAULT_BLOCKS) -> FeatureSpec:
        m = env_config.mdp
        return cls(env_config.keyer(), m.vocab_size, m.max_msg_len, tuple(tuple(b) for b in blocks))


@dataclass(frozen=True)
class ResponsePaths:
    """Generation events of every response in a ResponseSpace, padded to ``L`` slots."""

    prev: np.ndarray  # (n_responses, L)
    event: np.ndarray  # (n_responses, L)
    valid: np.ndarray  # (n_responses, L) bool

    @classmethod
    def build(cls, space: ResponseSpace) -> ResponsePaths:
        V, L = space.vocab_size, space.max_len
        n = len(space)
        prev = np.full((n, L), V, dtype=np.int64)
        event = np.zeros((n, L), dtype=np.int64)
        valid = np.zeros((n, L), dtype=bool)
        for i, a in enumerate(space.actions):
            for j, (p, e) in enumerate(_events(a, V, L)):
                prev[i, j], event[i, j], valid[i, j] = p, e, True
        return cls(prev, event, valid)


def _events(action: SuggestedAction, V: int, L: int) -> list[tuple[int, int]]:
    """(prev, event) per generation step."""
    if isinstance(action, Abstain):
        return [(V, V)]
    msg = action.message
    if len(msg) > L:
        raise PolicyError(f"action of length {len(msg)} exceeds max_msg_len={L}")
    out = []
    prev = V
    for t in msg:
        if not 0 <= t < V:
            raise PolicyError(f"token {t} outside the vocabulary")
        out.append((prev, t))
        prev = t
    if len(msg) < L:
        out.append((prev, V))
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class PolicyParams:
    weights: np.ndarray
    spec: FeatureSpec
    temperature: float = 1.0
    bias: np.ndarray | None = None  # persona token bias over events
    persona_id: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.spec.dim,):
            raise PolicyError(f"weights have shape {w.shape}, feature spec needs ({self.spec.dim},)")
        if not np.isfinite(w).all():
            raise PolicyError("weights must be finite")
        if not self.temperature > 0:
            raise PolicyError("temperature must be positive")
        object.__setattr__(self, "weights", w)

    @property
    def W(self) -> np.ndarray:
        return self.weights.reshape(self.spec.n_rows, self.spec.n_events)

    def logits_table(self) -> np.ndarray:
        if "logits" not in self._cache:
            z = sum(self.W[rows] for rows in self._rows())
            if self.bias is not None:
                z = z + self.bias
            z = z / self.temperature
            if not np.isfinite(z).all():
                raise PolicyError("non-finite logits")
            self._cache["logits"] = z
        return self._cache["logits"]

    def logprob_table(self) -> np.ndarray:
        if "logp" not in self._cache:
            self._cache["logp"] = _log_softmax(self.logits_table())
        return self._cache["logp"]

    def prob_table(self) -> np.ndarray:
        if "p" not in self._cache:
            self._cache["p"] = np.exp(self.logprob_table())
        return self._cache["p"]

    def _rows(self) -> list[np.ndarray]:
        key = ("rows", id(self.spec))
        if key not in self._cache:
            self._cache[key] = self.spec.block_rows()
        return self._cache[key]

    def with_weights(self, weights: np.ndarray) -> PolicyParams:
        return PolicyParams(np.array(weights, dtype=float), self.spec, self.temperature, self.bias, self.persona_id)

    # --- persistence -------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": CHECKPOINT_VERSION,
            "kind": "policy",
            "weights": self.weights.tolist(),
            "feature_spec": self.spec.to_dict(),
            "temperature": self.temperature,
            "bias": None if self.bias is None else self.bias.tolist(),
            "persona_id": self.persona_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PolicyParams:
        if d.get("format_version") != CHECKPOINT_VERSION or d.get("kind") != "policy":
            raise PolicyError("not a supported policy checkpoint")
        bias = d.get("bias")
        return cls(
            np.array(d["weights"], dtype=float),
            FeatureSpec.from_dict(d["feature_spec"]),
            float(d["temperature"]),
            None if bias is None else np.array(bias, dtype=float),
            d.get("persona_id", ""),
        )

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @property
    def tag(self) -> str:
        """Content hash used as the behavior tag of collected trajectories."""
        if "tag" not in self._cache:
            h = hashlib.sha256(self.to_bytes()).hexdigest()[:16]
            self._cache["tag"] = f"policy:{h}" + (f"+{self.persona_id}" if self.persona_id else "")
        return self._cache["tag"]

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> PolicyParams:
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(spec: FeatureSpec, seed: int = 0, scale: float = 0.0) -> PolicyParams:
    """Seeded starting policy; ``scale=0`` gives the uniform policy."""
    rng = np.random.default_rng(seed)
    return PolicyParams(scale * rng.standard_normal(spec.dim), spec)


def _check_state(state: ConversationState) -> None:
    if state.is_terminal:
        raise MdpError("the policy is undefined on terminal states")


def token_distribution(params: PolicyParams, state: ConversationState, prefix: Message = ()) -> np.ndarray:
    _check_state(state)
    k, pos, prev = params.spec.context(state, tuple(prefix))
    return params.prob_table()[k, pos, prev]


@dataclass(frozen=True)
class ResponseSample:
    action: SuggestedAction
    token_logprobs: tuple[float, ...]

    @property
    def total_logprob(self) -> float:
        return float(sum(self.token_logprobs))


def sample_response(
    params: PolicyParams, state: ConversationState, rng: np.random.Generator, greedy: bool = False
) -> ResponseSample:
    """Autoregressive sampling; ``greedy`` is the zero-temperature (argmax) decoding mode."""
    _check_state(state)
    spec = params.spec
    key = spec.keyer.key(state)
    probs = params.prob_table()[key]
    logp = params.logprob_table()[key]
    tokens: list[int] = []
    lps: list[float] = []
    prev = spec.start
    for pos in range(spec.max_msg_len):
        p = probs[pos, prev]
        if greedy:
            e = int(np.argmax(p))
        else:
            e = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
            e = min(e, spec.end)
        lps.append(float(logp[pos, prev, e]))
        if e == spec.end:
            break
        tokens.append(e)
        prev = e
    action = Respond(tuple(tokens)) if tokens else ABSTAIN
    return ResponseSample(action, tuple(lps))


def token_logprobs(params: PolicyParams, state: ConversationState, action: SuggestedAction) -> tuple[float, ...]:
    _check_state(state)
    spec = params.spec
    key = spec.keyer.key(state)
    logp = params.logprob_table()[key]
    return tuple(float(logp[pos, prev, e]) for pos, (prev, e) in enumerate(_events(action, spec.vocab_size, spec.max_msg_len)))


def score_response(params: PolicyParams, state: ConversationState, action: SuggestedAction) -> float:
    """Exact log pi(a | s) under the autoregressive factorization."""
    return float(sum(token_logprobs(params, state, action)))


def logprob_gradient(params: PolicyParams, state: ConversationState, action: SuggestedAction) -> np.ndarray:
    """d/dtheta log pi(a | s): sum over steps of (phi(chosen) - E_p phi) / temperature."""
    _check_state(state)
    spec = params.spec
    key = spec.keyer.key(state)
    probs = params.prob_table()[key]
    G = np.zeros(spec.table_shape + (spec.n_events,))
    for pos, (prev, e) in enumerate(_events(action, spec.vocab_size, spec.max_msg_len)):
        G[key, pos, prev] -= probs[pos, prev]
        G[key, pos, prev, e] += 1.0
    return backprop_table(params, G)


def backprop_table(params: PolicyParams, G: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. the logits table onto the weight vector."""
    spec = params.spec
    gW = np.zeros((spec.n_rows, spec.n_events))
    flat = G.reshape(-1, spec.n_events)
    for rows in params._rows():
        np.add.at(gW, rows.ravel(), flat)
    return gW.ravel() / params.temperature


# --- exact response-level distributions ---------------------------------------------


def response_logprob_table(params: PolicyParams, space: ResponseSpace) -> np.ndarray:
    """(n_keys, n_responses) log pi(response | key) for every response in ``space``."""
    key = ("resp", space.vocab_size, space.max_len)
    if key not in params._cache:
        paths = params._cache.get(("paths",) + key[1:])
        if paths is None:
            paths = ResponsePaths.build(space)
            params._cache[("paths",) + key[1:]] = paths
        logp = params.logprob_table()  # (K, L, P, E)
        L = space.max_len
        pos = np.broadcast_to(np.arange(L), paths.prev.shape)
        per = logp[:, pos, paths.prev, paths.event]  # (K, n, L)
        params._cache[key] = np.where(paths.valid[None], per, 0.0).sum(axis=2)
    return params._cache[key]


def response_distribution(params: PolicyParams, state: ConversationState, space: ResponseSpace) -> np.ndarray:
    _check_state(state)
    return np.exp(response_logprob_table(params, space)[params.spec.keyer.key(state)])


def policy_matrix(params: PolicyParams, enum: EnumeratedEnv) -> np.ndarray:
    """(S, A) response probabilities at every oracle state; terminals take action 0."""
    table = np.exp(response_logprob_table(params, enum.responses))
    pol = np.zeros((enum.n_states, len(enum.responses)))
    for s in range(enum.n_states):
        rep = enum.representatives[s]
        if rep is None:
            pol[s, 0] = 1.0
        else:
            row = table[params.spec.keyer.key(rep)]
            pol[s] = row / row.sum()
    return pol


# --- persona exploration --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PersonaSpec:
    persona_id: str
    temperature_multiplier: float = 1.0
    token_bias: np.ndarray | None = None

    @classmethod
    def identity(cls) -> PersonaSpec:
        return cls("identity")


def persona_wrap(params: PolicyParams, persona: PersonaSpec) -> PolicyParams:
    """Behavior policy: logits shifted by the persona's token bias and rescaled by its temperature."""
    if not persona.temperature_multiplier > 0 or not np.isfinite(persona.temperature_multiplier):
        raise PolicyError("temperature multiplier must be a positive finite number")
    bias = params.bias
    if persona.token_bias is not None:
        tb = np.asarray(persona.token_bias, dtype=float)
        if tb.shape != (params.spec.n_events,):
            raise PolicyError(f"token bias needs {params.spec.n_events} entries")
        if not np.isfinite(tb).all():
            raise PolicyError("persona token bias must be finite")
        bias = tb if bias is None else bias + tb
    wrapped = PolicyParams(
        params.weights, params.spec, params.temperature * persona.temperature_multiplier, bias, persona.persona_id
    )
    wrapped.logits_table()  # fail early on non-finite logits
    return wrapped
