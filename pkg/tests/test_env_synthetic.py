import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_env
from iterppo.conv_mdp import ABSTAIN, AbsorbingStateError, Respond, append_business_reply, initial_state
from iterppo.env_synthetic import (
    EnumeratedEnv,
    EnumerationTooLarge,
    EnvConfig,
    EnvConfigError,
    EnvInstance,
    business_message_distribution,
    enumerate_env,
)
from iterppo.oracle import outcome_probability


def _played(env: EnvInstance, actions):
    s = env.reset()
    out = [s]
    for a in actions:
        if s.is_terminal:
            break
        s = env.step(s, a)
        out.append(s)
    return out


# --- config validation ----------------------------------------------------------------------


def test_adoption_probs_must_have_five_entries(toy):
    d = toy.to_dict()
    d["adoption_probs"] = [0.5, 0.5]
    with pytest.raises(EnvConfigError):
        EnvConfig.from_dict(d)


def test_probability_rows_must_sum_to_one(toy):
    d = toy.to_dict()
    d["initial_intent"] = [0.5, 0.3, 0.3]
    with pytest.raises(EnvConfigError):
        EnvConfig.from_dict(d)


def test_config_round_trip(toy):
    again = EnvConfig.from_dict(toy.to_dict())
    assert again.to_dict() == toy.to_dict()


# --- reset ----------------------------------------------------------------------------------


def test_reset_is_seed_deterministic(toy):
    assert EnvInstance(toy, 7).reset() == EnvInstance(toy, 7).reset()


def test_single_opener_always_drawn():
    cfg = tiny_env(openers=[[[[1], 1.0]]] * 3)
    env = EnvInstance(cfg, 0)
    assert {env.reset().latest.customer_msg for _ in range(50)} == {(1,)}


def test_reset_is_never_terminal(toy):
    env = EnvInstance(toy, 3)
    assert not any(env.reset().is_terminal for _ in range(200))


def test_uniform_opener_frequencies():
    table = [[[0], 1 / 3], [[1], 1 / 3], [[2], 1 / 3]]
    cfg = tiny_env(vocab=3, openers=[table] * 3)
    env = EnvInstance(cfg, 11)
    n = 30_000
    counts = Counter(env.reset().latest.customer_msg for _ in range(n))
    for m in [(0,), (1,), (2,)]:
        assert abs(counts[m] / n - 1 / 3) <= 0.02


# --- business behavior ---------------------------------------------------------------------


def test_degenerate_accept_returns_suggestion(toy):
    env = EnvInstance(toy.replace(adoption_probs=(1.0, 0.0, 0.0, 0.0, 0.0)), 0)
    s = env.reset()
    assert env.business_respond(s, Respond((4, 5))) == (4, 5)


def test_degenerate_stop_returns_empty(toy):
    env = EnvInstance(toy.replace(adoption_probs=(0.0, 0.0, 0.0, 0.0, 1.0)), 0)
    s = env.reset()
    assert env.business_respond(s, Respond((4, 5))) == ()


def test_edit_is_hamming_distance_one(toy):
    env = EnvInstance(toy.replace(adoption_probs=(0.0, 1.0, 0.0, 0.0, 0.0)), 0)
    s = env.reset()
    a = (3, 9)
    for _ in range(1000):
        m = env.business_respond(s, Respond(a))
        assert len(m) == 2 and sum(x != y for x, y in zip(m, a)) == 1


def test_abstain_uses_business_drafts(toy):
    env = EnvInstance(toy.replace(adoption_probs=(1.0, 0.0, 0.0, 0.0, 0.0)), 0)
    s = env.reset()
    drafts = {m for m, _ in toy.business_drafts}
    assert {env.business_respond(s, ABSTAIN) for _ in range(200)} <= drafts


def test_business_respond_on_terminal_raises(toy):
    env = EnvInstance(toy, 0)
    s = append_business_reply(env.reset(), ABSTAIN, ())
    with pytest.raises(AbsorbingStateError):
        env.business_respond(s, ABSTAIN)
    with pytest.raises(AbsorbingStateError):
        env.customer_respond(s, ())


def test_business_distribution_sums_to_one(toy):
    for a in [ABSTAIN, Respond((4,)), Respond((0, 11))]:
        assert abs(sum(business_message_distribution(toy, a).values()) - 1.0) < 1e-12


# --- customer behavior ---------------------------------------------------------------------


def test_zero_outcome_probabilities_never_fire(toy):
    cfg = toy.replace(outcome_prob_by_intent=np.zeros((3, 3)))
    env = EnvInstance(cfg, 0)
    for _ in range(300):
        s = env.reset()
        mid = append_business_reply(s, Respond((4,)), (4,))
        assert env.customer_respond(mid, (4,))[1] is False


def test_hot_customer_offer_with_certain_outcome(toy):
    T = np.zeros((3, 3, 3))
    T[:, :, 2] = 1.0
    O = np.zeros((3, 3))
    O[2, 1] = 1.0
    env = EnvInstance(toy.replace(intent_transition=T, outcome_prob_by_intent=O), 0)
    s = env.reset()
    mid = append_business_reply(s, Respond((4,)), (4,))
    assert env.customer_respond(mid, (4,))[1] is True


def test_always_offer_outcome_rate_matches_exact(toy, toy_enum):
    offer = Respond((4,))
    a = toy_enum.responses.index(offer)
    pol = np.zeros((toy_enum.n_states, len(toy_enum.responses)))
    pol[:, a] = 1.0
    pol[toy_enum.mdp.terminal] = 0.0
    pol[toy_enum.mdp.terminal, 0] = 1.0
    exact = outcome_probability(toy_enum.mdp, pol)
    env = EnvInstance(toy, 2024)
    n = 20_000
    hits = sum(_played(env, [offer] * 3)[-1].terminal.value == "OutcomeAchieved" for _ in range(n))
    assert abs(hits / n - exact) <= 0.01


# --- replay and structure ------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.sampled_from([ABSTAIN, Respond((4,)), Respond((0, 1)), Respond((9,))]), min_size=3, max_size=3))
def test_replay_determinism(seed, actions):
    cfg = tiny_env(vocab=12, max_len=2, horizon=3)
    assert _played(EnvInstance(cfg, seed), actions) == _played(EnvInstance(cfg, seed), actions)


def test_kernel_factorization_permutation(toy):
    """Given (s, m), the suggestion carries no information about (c', o')."""
    env = EnvInstance(toy, 99)
    arms = (Respond((4,)), Respond((5,)))
    target = (4,)
    a_obs, y_obs = [], []
    rng = np.random.default_rng(5)
    for _ in range(100_000):
        s = env.reset()
        if s.latest.customer_msg != (8,):
            continue
        arm = int(rng.integers(2))
        m = env.business_respond(s, arms[arm])
        if m != target:
            continue
        c, o = env.customer_respond(append_business_reply(s, arms[arm], m), m)
        a_obs.append(arm)
        y_obs.append((c, o))
    assert len(a_obs) > 2000
    labels = {y: i for i, y in enumerate(sorted(set(y_obs), key=repr))}
    y = np.array([labels[v] for v in y_obs])
    a = np.array(a_obs)

    def mutual_info(a, y):
        joint = np.zeros((2, len(labels)))
        np.add.at(joint, (a, y), 1)
        joint /= joint.sum()
        outer = joint.sum(1, keepdims=True) * joint.sum(0, keepdims=True)
        nz = joint > 0
        return float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())

    observed = mutual_info(a, y)
    null = [mutual_info(rng.permutation(a), y) for _ in range(400)]
    p = (1 + sum(v >= observed for v in null)) / (1 + len(null))
    assert p > 0.01


def test_marginal_consistency_from_start(toy, toy_enum):
    """Empirical (s, a) -> s' frequencies agree with the enumerated kernel within 3 standard errors."""
    env = EnvInstance(toy, 31)
    action = Respond((1,))
    a = toy_enum.responses.index(action)
    counts: dict[int, Counter] = {}
    for _ in range(20_000):
        s = env.reset()
        nxt = env.step(s, action)
        counts.setdefault(toy_enum.index_of(s), Counter())[toy_enum.index_of(nxt)] += 1
    checked = 0
    for s, c in counts.items():
        n = sum(c.values())
        if n < 500:
            continue
        exact = toy_enum.successors(s, a)
        assert set(c) <= set(exact)
        for t, p in exact.items():
            se = max(np.sqrt(p * (1 - p) / n), 1e-12)
            assert abs(c[t] / n - p) <= 3 * se + 1e-12, (s, t, c[t] / n, p)
            checked += 1
    assert checked > 5


# --- enumeration -----------------------------------------------------------------------------


def test_hand_count_tiny_tree():
    enum = enumerate_env(tiny_env())
    # OUTCOME, END, and one first-turn state per distinct opener
    assert enum.n_states == 4
    assert set(enum.keys[:2]) == {EnumeratedEnv.OUTCOME, EnumeratedEnv.END}


def test_enumerated_rows_sum_to_one(toy_enum):
    P = toy_enum.mdp.transitions
    mask = toy_enum.mdp.action_mask
    assert np.abs(P.sum(axis=2) - 1.0)[mask].max() <= 1e-12
    for rep, acts, succ in toy_enum.rows():
        for row in succ:
            assert abs(sum(row.values()) - 1.0) <= 1e-12


def test_toy_shop_enumerates_quickly(toy):
    t0 = time.perf_counter()
    enum = enumerate_env(toy)
    assert time.perf_counter() - t0 < 60
    assert len(enum.responses) == 1 + 12 + 144


def test_enumeration_budget_is_enforced(toy):
    with pytest.raises(EnumerationTooLarge, match="vocab_size"):
        enumerate_env(toy.replace(enumeration_budget=10))


def test_index_of_representatives_round_trips(toy_enum):
    for s in toy_enum.nonterminal_states():
        assert toy_enum.index_of(toy_enum.representatives[s]) == s
