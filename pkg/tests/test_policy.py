from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_env
from iterppo.conv_mdp import ABSTAIN, MdpError, Respond, ResponseSpace, append_business_reply, append_customer_turn, initial_state
from iterppo.policy import (
    FeatureSpec,
    PersonaSpec,
    PolicyError,
    PolicyParams,
    init_params,
    logprob_gradient,
    persona_wrap,
    policy_matrix,
    response_distribution,
    sample_response,
    score_response,
    token_distribution,
    token_logprobs,
)

SMALL = tiny_env(vocab=3, max_len=2, horizon=2)
SMALL_SPEC = FeatureSpec.for_env(SMALL, blocks=(("turn", "cmsg", "pos", "prev"), ("pos", "prev"), ("cclass",)))


def _states():
    s1 = initial_state((1,))
    s2 = append_customer_turn(append_business_reply(initial_state((0,)), Respond((2,)), (2,)), (1,), False, 2)
    return [s1, initial_state((0,)), s2]


def _actions(V=3, L=2):
    return list(ResponseSpace(V, L).actions)


def _naive_distribution(params: PolicyParams, state, prefix):
    """Softmax of summed block rows, computed straight from the block definitions."""
    spec = params.spec
    turn = min(max(state.turn_index, 1), spec.keyer.horizon)
    cmsg = spec.keyer.message_index(state.latest.customer_msg)
    values = {
        "turn": turn - 1,
        "cmsg": cmsg,
        "cclass": spec.keyer.message_intent(cmsg),
        "pos": len(prefix),
        "prev": spec.vocab_size if not prefix else prefix[-1],
    }
    W = params.weights.reshape(-1, spec.n_events)
    logits = np.zeros(spec.n_events)
    offset = 0
    for block in spec.blocks:
        idx = 0
        size = 1
        for c in block:
            idx = idx * spec.cardinality(c) + values[c]
            size *= spec.cardinality(c)
        logits += W[offset + idx]
        offset += size
    logits = logits / params.temperature
    e = np.exp(logits - logits.max())
    return e / e.sum()


weights = arrays(np.float64, SMALL_SPEC.dim, elements=st.floats(-4, 4))


# --- token distribution ------------------------------------------------------------------


def test_zero_weights_uniform(toy):
    p = token_distribution(init_params(FeatureSpec.for_env(toy)), initial_state((0,)))
    assert np.allclose(p, 1 / 13, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(weights, st.floats(-50, 50))
def test_constant_logit_shift_invariant(w, c):
    params = PolicyParams(w, SMALL_SPEC)
    shifted = PolicyParams(w, SMALL_SPEC, bias=np.full(SMALL_SPEC.n_events, c))
    for s in _states():
        assert np.allclose(token_distribution(params, s), token_distribution(shifted, s), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(weights)
def test_normalized_with_full_support_at_every_prefix(w):
    params = PolicyParams(w, SMALL_SPEC)
    for s in _states():
        for prefix in [(), (0,), (2,)]:
            p = token_distribution(params, s, prefix)
            assert abs(p.sum() - 1) <= 1e-12
            assert (p > 0).all()


def test_matches_independent_softmax(toy, pi0):
    spec = pi0.spec
    rng = np.random.default_rng(0)
    for opener in [(0,), (8,), (11,)]:
        s = initial_state(opener)
        for prefix in [(), (int(rng.integers(12)),)]:
            assert np.abs(token_distribution(pi0, s, prefix) - _naive_distribution(pi0, s, prefix)).max() <= 1e-12
    multi = PolicyParams(np.random.default_rng(4).normal(size=SMALL_SPEC.dim), SMALL_SPEC)
    for s in _states():
        for prefix in [(), (1,)]:
            assert np.abs(token_distribution(multi, s, prefix) - _naive_distribution(multi, s, prefix)).max() <= 1e-12


def test_terminal_state_rejected(pi0):
    done = append_business_reply(initial_state((0,)), ABSTAIN, ())
    with pytest.raises(MdpError):
        token_distribution(pi0, done)
    with pytest.raises(MdpError):
        sample_response(pi0, done, np.random.default_rng(0))


# --- sampling and scoring --------------------------------------------------------------------


def test_greedy_decoding_is_deterministic(pi0):
    s = initial_state((8,))
    a = sample_response(pi0, s, np.random.default_rng(0), greedy=True).action
    b = sample_response(pi0, s, np.random.default_rng(1), greedy=True).action
    assert a == b


def test_first_event_frequencies_match_distribution(pi0):
    s = initial_state((8,))
    p = token_distribution(pi0, s)
    rng = np.random.default_rng(77)
    n = 100_000
    counts = Counter()
    for _ in range(n):
        a = sample_response(pi0, s, rng).action
        counts[pi0.spec.end if a is ABSTAIN else a.message[0]] += 1
    freq = np.array([counts[e] for e in range(len(p))]) / n
    se = np.sqrt(p * (1 - p) / n)
    assert (np.abs(freq - p) <= 3 * se).all()


@settings(max_examples=40, deadline=None)
@given(weights, st.integers(0, 2**32 - 1))
def test_sampled_logprob_equals_score(w, seed):
    params = PolicyParams(w, SMALL_SPEC)
    rng = np.random.default_rng(seed)
    for s in _states():
        sample = sample_response(params, s, rng)
        assert all(lp <= 0 for lp in sample.token_logprobs)
        assert abs(sample.total_logprob - score_response(params, s, sample.action)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(weights)
def test_score_is_product_of_token_probabilities(w):
    params = PolicyParams(w, SMALL_SPEC)
    s = _states()[2]
    for a in _actions():
        tokens = () if a is ABSTAIN else a.message
        logp = 0.0
        for j in range(len(tokens) + (len(tokens) < 2)):
            p = token_distribution(params, s, tokens[:j])
            e = tokens[j] if j < len(tokens) else SMALL_SPEC.end
            logp += np.log(p[e])
        assert abs(score_response(params, s, a) - logp) <= 1e-10
        assert len(token_logprobs(params, s, a)) == len(tokens) + (len(tokens) < 2)


def test_response_distribution_sums_to_one(pi0):
    space = ResponseSpace(12, 2)
    p = response_distribution(pi0, initial_state((8,)), space)
    assert abs(p.sum() - 1) <= 1e-12


def test_greedy_beats_single_token_perturbations_at_low_temperature():
    w = np.random.default_rng(3).normal(size=SMALL_SPEC.dim)
    cold = PolicyParams(w, SMALL_SPEC, temperature=1e-3)
    for s in _states():
        g = sample_response(cold, s, np.random.default_rng(0), greedy=True).action
        if g is ABSTAIN:
            continue
        for pos in range(len(g.message)):
            for tok in range(3):
                if tok != g.message[pos]:
                    other = Respond(g.message[:pos] + (tok,) + g.message[pos + 1 :])
                    assert score_response(cold, s, g) >= score_response(cold, s, other)


def test_overlong_action_rejected(pi0):
    with pytest.raises(PolicyError):
        score_response(pi0, initial_state((0,)), Respond((1, 2, 3)))


def test_policy_matrix_rows_are_distributions(pi0, toy_enum):
    pol = policy_matrix(pi0, toy_enum)
    assert np.allclose(pol.sum(axis=1), 1.0, atol=1e-12)


# --- gradients ------------------------------------------------------------------------------


def test_gradient_by_hand_single_token_vocab_two():
    cfg = tiny_env()
    spec = FeatureSpec.for_env(cfg)
    params = init_params(spec)
    s = initial_state((0,))
    g = logprob_gradient(params, s, Respond((0,))).reshape(spec.n_rows, spec.n_events)
    row = int(spec.block_rows()[0][spec.keyer.key(s), 0, spec.start])
    expected = np.zeros_like(g)
    expected[row] = np.array([1.0, 0.0, 0.0]) - 1 / 3
    assert np.allclose(g, expected, atol=1e-15)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(8)
    h = 1e-5
    for _ in range(100):
        params = PolicyParams(rng.normal(size=SMALL_SPEC.dim), SMALL_SPEC)
        s = _states()[int(rng.integers(3))]
        a = _actions()[int(rng.integers(13))]
        an = logprob_gradient(params, s, a)
        fd = np.zeros_like(an)
        for i in np.flatnonzero(np.abs(an) > 0) if rng.random() < 0.5 else range(SMALL_SPEC.dim):
            e = np.zeros_like(an)
            e[i] = h
            fd[i] = (score_response(params.with_weights(params.weights + e), s, a) - score_response(params.with_weights(params.weights - e), s, a)) / (2 * h)
        rel = np.linalg.norm(an - fd) / max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-4


def test_saturated_gradient_vanishes():
    cfg = tiny_env()
    spec = FeatureSpec.for_env(cfg)
    s = initial_state((0,))
    W = np.zeros((spec.n_rows, spec.n_events))
    W[int(spec.block_rows()[0][spec.keyer.key(s), 0, spec.start]), 0] = 40.0
    params = PolicyParams(W.ravel(), spec)
    assert np.linalg.norm(logprob_gradient(params, s, Respond((0,)))) <= 1e-6


# --- personas and checkpoints -----------------------------------------------------------


def test_identity_persona_keeps_distributions(pi0):
    wrapped = persona_wrap(pi0, PersonaSpec.identity())
    assert np.array_equal(wrapped.prob_table(), pi0.prob_table())
    assert wrapped.persona_id == "identity"


def test_temperature_multiplier_halves_logits(pi0):
    wrapped = persona_wrap(pi0, PersonaSpec("warm", temperature_multiplier=2.0))
    assert np.allclose(wrapped.logits_table(), pi0.logits_table() / 2, atol=1e-14)
    s = initial_state((8,))
    z = pi0.logits_table()[pi0.spec.keyer.key(s), 0, pi0.spec.start] / 2
    expect = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    assert np.allclose(token_distribution(wrapped, s), expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 13, elements=st.floats(-20, 20)), st.floats(0.2, 5))
def test_persona_keeps_full_support(bias, mult):
    base = init_params(FeatureSpec.for_env(tiny_env(vocab=12, max_len=2, horizon=3)), seed=1, scale=1.0)
    wrapped = persona_wrap(base, PersonaSpec("p", mult, bias))
    assert (wrapped.prob_table() > 0).all()


def test_persona_rejects_non_finite(pi0):
    with pytest.raises(PolicyError):
        persona_wrap(pi0, PersonaSpec("bad", token_bias=np.full(13, np.inf)))
    with pytest.raises(PolicyError):
        persona_wrap(pi0, PersonaSpec("bad", temperature_multiplier=0.0))


def test_checkpoint_round_trip(tmp_path, pi0):
    wrapped = persona_wrap(pi0, PersonaSpec("p", 1.5, np.linspace(-1, 1, 13)))
    path = tmp_path / "p.json"
    wrapped.save(path)
    back = PolicyParams.load(path)
    assert back.tag == wrapped.tag
    assert np.array_equal(back.prob_table(), wrapped.prob_table())


def test_weights_validated():
    with pytest.raises(PolicyError):
        PolicyParams(np.zeros(3), SMALL_SPEC)
    with pytest.raises(PolicyError):
        PolicyParams(np.full(SMALL_SPEC.dim, np.nan), SMALL_SPEC)
