"""Multi-turn Suggested-Response MDP objects.

A conversation state is the full history ``c_1, o_1, a_1, m_1, ..., c_i, o_i``
where only the latest turn is open (no suggestion and no business reply yet).
Messages are token tuples over a small vocabulary; the empty tuple means the
speaker stopped responding.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterator, NamedTuple, Union

Message = tuple[int, ...]

EMPTY: Message = ()


class MdpError(ValueError):
    """Malformed MDP object."""


class AbsorbingStateError(MdpError):
    """An append was attempted on a terminal state."""


class TerminalReason(str, enum.Enum):
    OUTCOME_ACHIEVED = "OutcomeAchieved"
    BUSINESS_STOPPED = "BusinessStopped"
    CUSTOMER_STOPPED = "CustomerStopped"
    HORIZON_REACHED = "HorizonReached"


@dataclass(frozen=True)
class Abstain:
    """The agent makes no suggestion this turn."""

    def __repr__(self) -> str:
        return "ABSTAIN"


ABSTAIN = Abstain()


@dataclass(frozen=True)
class Respond:
    message: Message

    def __post_init__(self) -> None:
        if len(self.message) == 0:
            raise MdpError("Respond requires a non-empty message; use ABSTAIN instead")
        object.__setattr__(self, "message", tuple(int(t) for t in self.message))


SuggestedAction = Union[Abstain, Respond]


def action_tokens(action: SuggestedAction) -> Message:
    return EMPTY if isinstance(action, Abstain) else action.message


@dataclass(frozen=True)
class MdpConfig:
    discount: float = 0.9
    horizon_cap: int = 8
    vocab_size: int = 12
    max_msg_len: int = 2

    def __post_init__(self) -> None:
        if not 0.0 <= self.discount < 1.0:
            raise MdpError(f"discount must lie in [0, 1), got {self.discount}")
        if self.horizon_cap < 1:
            raise MdpError("horizon_cap must be >= 1")
        if self.vocab_size < 1 or self.max_msg_len < 1:
            raise MdpError("vocab_size and max_msg_len must be positive")

    def check_message(self, msg: Message) -> None:
        if len(msg) > self.max_msg_len:
            raise MdpError(f"message {msg} longer than max_msg_len={self.max_msg_len}")
        for t in msg:
            if not 0 <= t < self.vocab_size:
                raise MdpError(f"token {t} outside vocabulary of size {self.vocab_size}")


@dataclass(frozen=True)
class Turn:
    customer_msg: Message
    outcome: bool = False
    suggestion: SuggestedAction | None = None
    business_msg: Message | None = None

    @property
    def is_open(self) -> bool:
        return self.business_msg is None


@dataclass(frozen=True)
class ConversationState:
    turns: tuple[Turn, ...]
    terminal: TerminalReason | None = None

    def __post_init__(self) -> None:
        check_state(self)

    @property
    def latest(self) -> Turn:
        return self.turns[-1]

    @property
    def is_terminal(self) -> bool:
        return self.terminal is not None

    @property
    def turn_index(self) -> int:
        """1-based index of the latest customer turn."""
        return len(self.turns)

    def to_record(self) -> dict[str, Any]:
        turns = []
        for t in self.turns:
            rec: dict[str, Any] = {"c": list(t.customer_msg), "o": int(t.outcome)}
            if t.suggestion is not None:
                rec["a"] = "ABSTAIN" if isinstance(t.suggestion, Abstain) else list(t.suggestion.message)
            if t.business_msg is not None:
                rec["m"] = list(t.business_msg)
            turns.append(rec)
        return {"turns": turns, "terminal": None if self.terminal is None else self.terminal.value}

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> ConversationState:
        turns = []
        for t in rec["turns"]:
            a = t.get("a")
            if a is None:
                suggestion = None
            elif a == "ABSTAIN":
                suggestion = ABSTAIN
            else:
                suggestion = Respond(tuple(a))
            m = t.get("m")
            turns.append(Turn(tuple(t["c"]), bool(t["o"]), suggestion, None if m is None else tuple(m)))
        term = rec.get("terminal")
        return cls(tuple(turns), None if term is None else TerminalReason(term))


def check_state(state: ConversationState) -> None:
    """Raise MdpError if ``state`` violates the history invariants."""
    if not state.turns:
        raise MdpError("a conversation state needs at least one customer turn")
    last = len(state.turns) - 1
    for k, turn in enumerate(state.turns):
        if (turn.suggestion is None) != (turn.business_msg is None):
            raise MdpError(f"turn {k}: suggestion and business_msg must be recorded together")
        if k < last:
            if turn.is_open:
                raise MdpError(f"turn {k}: only the latest turn may be open")
            if turn.outcome:
                raise MdpError(f"turn {k}: outcome observed before the final turn")
            if len(turn.business_msg) == 0:
                raise MdpError(f"turn {k}: business stopped but conversation continued")
            if len(turn.customer_msg) == 0:
                raise MdpError(f"turn {k}: customer stopped but conversation continued")
    latest = state.turns[-1]
    if latest.outcome and state.terminal is not TerminalReason.OUTCOME_ACHIEVED:
        raise MdpError("latest outcome is 1 but the state is not terminal(OutcomeAchieved)")
    if state.terminal is TerminalReason.OUTCOME_ACHIEVED and not latest.outcome:
        raise MdpError("terminal(OutcomeAchieved) requires the latest outcome flag")
    if state.terminal is TerminalReason.BUSINESS_STOPPED and latest.business_msg != EMPTY:
        raise MdpError("terminal(BusinessStopped) requires an empty business message")
    if latest.business_msg == EMPTY and state.terminal is not TerminalReason.BUSINESS_STOPPED:
        raise MdpError("empty business message must end the conversation")
    if state.terminal is TerminalReason.CUSTOMER_STOPPED and latest.customer_msg != EMPTY:
        raise MdpError("terminal(CustomerStopped) requires an empty customer message")
    if latest.customer_msg == EMPTY and state.terminal not in (TerminalReason.CUSTOMER_STOPPED,):
        raise MdpError("empty customer message must end the conversation")


def initial_state(customer_msg: Message) -> ConversationState:
    if len(customer_msg) == 0:
        raise MdpError("the opening customer message cannot be empty")
    return ConversationState((Turn(tuple(customer_msg)),))


def append_business_reply(
    state: ConversationState, suggestion: SuggestedAction, business_msg: Message
) -> ConversationState:
    """Close the open turn with the agent's suggestion and the business's actual message."""
    if state.is_terminal:
        raise AbsorbingStateError(f"cannot append to terminal state ({state.terminal.value})")
    if not state.latest.is_open:
        raise MdpError("latest turn is already completed")
    business_msg = tuple(business_msg)
    turn = Turn(state.latest.customer_msg, state.latest.outcome, suggestion, business_msg)
    terminal = TerminalReason.BUSINESS_STOPPED if len(business_msg) == 0 else None
    return ConversationState(state.turns[:-1] + (turn,), terminal)


def append_customer_turn(
    state: ConversationState, customer_msg: Message, outcome: bool, horizon_cap: int
) -> ConversationState:
    """Open a new turn with the customer's reply.

    Termination precedence: outcome, then customer silence, then the horizon cap
    (``horizon_cap`` counts completed business turns).
    """
    if state.is_terminal:
        raise AbsorbingStateError(f"cannot append to terminal state ({state.terminal.value})")
    if state.latest.is_open:
        raise MdpError("latest turn is still open; the business has not replied")
    customer_msg = tuple(customer_msg)
    if outcome and len(customer_msg) == 0:
        raise MdpError("an outcome must come with a customer message")
    turns = state.turns + (Turn(customer_msg, bool(outcome)),)
    if outcome:
        terminal = TerminalReason.OUTCOME_ACHIEVED
    elif len(customer_msg) == 0:
        terminal = TerminalReason.CUSTOMER_STOPPED
    elif len(state.turns) >= horizon_cap:
        terminal = TerminalReason.HORIZON_REACHED
    else:
        terminal = None
    return ConversationState(turns, terminal)


def reward(state: ConversationState, predecessor: ConversationState | None = None) -> int:
    """R(s) = latest outcome flag; zero for anything reached from an absorbing state."""
    if predecessor is not None and predecessor.is_terminal:
        return 0
    return int(state.latest.outcome)


# --- transitions and trajectories -----------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: ConversationState
    action: SuggestedAction
    reward: int
    next_state: ConversationState
    # per-token log-probabilities of ``action`` under the behavior policy
    token_logprobs: tuple[float, ...] = ()

    @property
    def behavior_logprob(self) -> float:
        return float(sum(self.token_logprobs))


@dataclass(frozen=True)
class Trajectory:
    transitions: tuple[Transition, ...]
    episode_id: str
    behavior_tag: str = ""

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.transitions)

    @property
    def rewards(self) -> list[int]:
        return [t.reward for t in self.transitions]

    @property
    def final_state(self) -> ConversationState:
        return self.transitions[-1].next_state


class Violation(NamedTuple):
    rule: str
    index: int

    def __repr__(self) -> str:
        return f"{self.rule}({self.index})"


def validate(trajectory: Trajectory) -> list[Violation]:
    """Return every broken Trajectory invariant; empty when the episode is well formed."""
    tr = trajectory.transitions
    if not tr:
        return [Violation("EmptyTrajectory", 0)]
    out: list[Violation] = []
    last = len(tr) - 1
    for k in range(1, len(tr)):
        if tr[k].state != tr[k - 1].next_state:
            out.append(Violation("ChainBreak", k))
    for k, t in enumerate(tr):
        if t.state.is_terminal and (not t.next_state.is_terminal or t.reward != 0):
            out.append(Violation("TerminalNotAbsorbing", k))
    rewarded = [k for k, t in enumerate(tr) if t.reward == 1]
    misplaced = [k for k in rewarded if k != last]
    for k in misplaced:
        out.append(Violation("MisplacedOutcomeReward", k))
    for k, t in enumerate(tr):
        if t.reward not in (0, 1):
            out.append(Violation("RewardOutOfRange", k))
        expected = reward(t.next_state, t.state)
        # a misplaced unit of reward already accounts for the missing one at the end
        if t.reward != expected and k not in misplaced and not (k == last and misplaced and expected == 1):
            out.append(Violation("RewardMismatch", k))
    if not tr[-1].next_state.is_terminal:
        out.append(Violation("NonTerminalEnd", last))
    out.sort(key=lambda v: (v.index, v.rule))
    return out


# --- response space -------------------------------------------------------------------


def all_responses(vocab_size: int, max_len: int) -> list[SuggestedAction]:
    """Every suggestion in canonical order: ABSTAIN, then by length, then lexicographic."""
    out: list[SuggestedAction] = [ABSTAIN]
    for n in range(1, max_len + 1):
        out.extend(Respond(p) for p in itertools.product(range(vocab_size), repeat=n))
    return out


@dataclass(frozen=True)
class ResponseSpace:
    """Canonical index over all suggestions for a vocabulary and length cap."""

    vocab_size: int
    max_len: int
    actions: tuple[SuggestedAction, ...] = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        acts = tuple(all_responses(self.vocab_size, self.max_len))
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "_index", {a: i for i, a in enumerate(acts)})

    def __len__(self) -> int:
        return len(self.actions)

    def index(self, action: SuggestedAction) -> int:
        try:
            return self._index[action]
        except KeyError:
            raise MdpError(f"action {action!r} is outside the response space") from None
