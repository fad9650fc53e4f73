import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_env
from iterppo.conv_mdp import ABSTAIN, MdpError, Respond, ResponseSpace, append_business_reply, append_customer_turn, initial_state
from iterppo.oracle import exact_policy_evaluation
from iterppo.policy import FeatureSpec, PolicyParams, init_params, policy_matrix, response_distribution
from iterppo.q_eval import OracleQ
from iterppo.single_turn_ppo import (
    PpoConfig,
    PpoError,
    PromptContext,
    build_prompt,
    clipped_surrogate,
    kl_regularized_objective,
    local_improvement_check,
    parse_prompt,
    ppo_improve,
)


class TableQ:
    """Fixed Q values per response, the same in every state."""

    def __init__(self, values):
        self._v = np.asarray(values, dtype=float)

    def context_key(self, state):
        return 0

    def values(self, state):
        return self._v


BANDIT = tiny_env(vocab=1, max_len=1, horizon=1, probe_tokens=[0], offer_tokens=[])
BANDIT_SPEC = FeatureSpec.for_env(BANDIT)
S0 = initial_state((0,))


def _bandit_policy(logits):
    p = init_params(BANDIT_SPEC)
    W = p.W.copy()
    row = int(BANDIT_SPEC.block_rows()[0][BANDIT_SPEC.keyer.key(S0), 0, BANDIT_SPEC.start])
    W[row] = logits  # events: token 0, end (end first means abstain)
    return p.with_weights(W.ravel())


# --- prompts -----------------------------------------------------------------------------------

tokens = st.lists(st.integers(0, 11), min_size=1, max_size=2).map(tuple)
suggestion = st.one_of(st.just(ABSTAIN), tokens.map(Respond))


@st.composite
def open_states(draw):
    s = initial_state(draw(tokens))
    for _ in range(draw(st.integers(0, 2))):
        s = append_customer_turn(append_business_reply(s, draw(suggestion), draw(tokens)), draw(tokens), False, 3)
    return s


def test_minimal_prompt_round_trip():
    p = build_prompt(initial_state((3,)))
    assert parse_prompt(p) == initial_state((3,))
    assert len(json.loads(p.serialized_state)["turns"]) == 1


@given(open_states())
def test_prompt_round_trip(state):
    p = build_prompt(state, origin_state_id="x")
    assert p.state == state
    assert build_prompt(p.state).serialized_state == p.serialized_state


@given(open_states(), open_states())
def test_prompt_injective(a, b):
    assert (build_prompt(a).serialized_state == build_prompt(b).serialized_state) == (a == b)


def test_past_suggestion_changes_prompt():
    def history(sug):
        return append_customer_turn(append_business_reply(initial_state((1,)), sug, (8,)), (2,), False, 3)

    assert build_prompt(history(ABSTAIN)).serialized_state != build_prompt(history(Respond((4,)))).serialized_state


def test_terminal_prompt_rejected():
    with pytest.raises(MdpError):
        build_prompt(append_business_reply(initial_state((1,)), ABSTAIN, ()))


# --- clipped surrogate ----------------------------------------------------------------------------


# at ratio 0.5 with A = -1 the min picks the clipped branch: min(-0.5, 0.8 * -1) = -0.8
@pytest.mark.parametrize("ratio,adv,expected", [(1.0, 2.0, 2.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)])
def test_clipped_examples(ratio, adv, expected):
    assert clipped_surrogate(ratio, adv, 0.2) == pytest.approx(expected, abs=1e-15)


@given(st.floats(0.8, 1.2), st.floats(-10, 10))
def test_unclipped_inside_trust_region(ratio, adv):
    assert clipped_surrogate(ratio, adv, 0.2) == ratio * adv


@given(st.floats(1e-3, 10), st.floats(-10, 10), st.floats(0.01, 0.5))
def test_clipping_never_overstates(ratio, adv, eps):
    assert clipped_surrogate(ratio, adv, eps) <= ratio * adv + 1e-12


@pytest.mark.parametrize("ratio,adv", [(0.0, 1.0), (-1.0, 1.0), (np.nan, 1.0), (1.0, np.inf)])
def test_clipped_bad_inputs(ratio, adv):
    with pytest.raises(PpoError):
        clipped_surrogate(ratio, adv, 0.2)


# --- KL-regularized objective ------------------------------------------------------------------


def test_objective_without_change_is_expected_q(pi0, toy):
    q = TableQ(np.linspace(0, 1, 157))
    states = [initial_state((8,)), initial_state((0,))]
    space = ResponseSpace(12, 2)
    expected = np.mean([response_distribution(pi0, s, space) @ q.values(s) for s in states])
    assert kl_regularized_objective(pi0, pi0, states, q, beta=5.0) == pytest.approx(expected, abs=1e-12)


def test_huge_beta_dominates():
    old, new = _bandit_policy([0.0, 0.0]), _bandit_policy([2.0, -1.0])
    assert kl_regularized_objective(new, old, [S0], TableQ([1.0, 0.0]), beta=1e9) < -1e6


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_two_action_closed_form(direction):
    old, new = _bandit_policy([0.3, -0.2]), _bandit_policy([1.0, 0.5])
    q = TableQ([0.25, 0.75])  # response order: abstain (end first), token 0
    space = ResponseSpace(1, 1)
    po = response_distribution(old, S0, space)
    pn = response_distribution(new, S0, space)

    def soft(z):
        e = np.exp(np.array(z) - max(z))
        return e / e.sum()

    # by hand: abstain is the end event, the other response is token 0
    assert np.allclose(po, soft([0.3, -0.2])[::-1])
    kl = float(np.sum(po * np.log(po / pn))) if direction == "forward" else float(np.sum(pn * np.log(pn / po)))
    expected = float(pn @ q.values(S0)) - 0.7 * kl
    got = kl_regularized_objective(new, old, [S0], q, 0.7, direction)
    assert abs(got - expected) <= 1e-10


def test_sampled_objective_close_to_exact(pi0):
    new = pi0.with_weights(pi0.weights * 1.3)
    q = TableQ(np.linspace(0, 1, 157))
    states = [initial_state((8,))]
    exact = kl_regularized_objective(new, pi0, states, q, 0.5)
    sampled = kl_regularized_objective(new, pi0, states, q, 0.5, rng=np.random.default_rng(0), n_samples=40_000)
    assert abs(sampled - exact) < 0.01


def test_negative_beta_rejected(pi0):
    with pytest.raises(PpoError):
        kl_regularized_objective(pi0, pi0, [initial_state((8,))], TableQ(np.zeros(157)), -1.0)


# --- local improvement -------------------------------------------------------------------------


def test_same_policy_zero_margins(pi0):
    check = local_improvement_check(pi0, pi0, TableQ(np.linspace(0, 1, 157)), [initial_state((8,)), initial_state((1,))])
    assert np.all(check.margins == 0) and check.violations == 0 and check.rate == 1.0


def test_greedy_policy_has_non_negative_margins():
    cfg = tiny_env(vocab=3, max_len=2, horizon=2)
    spec = FeatureSpec.for_env(cfg)
    old = init_params(spec, seed=2, scale=1.0)
    space = ResponseSpace(3, 2)
    qv = np.random.default_rng(1).random(len(space))
    best = space.actions[int(np.argmax(qv))]
    states = [initial_state((0,)), initial_state((1,))]
    W = np.zeros((spec.n_rows, spec.n_events))
    rows = spec.block_rows()[0]
    for s in states:
        key = spec.keyer.key(s)
        prev = spec.start
        path = [] if best is ABSTAIN else list(best.message)
        for pos in range(2):
            e = path[pos] if pos < len(path) else spec.end
            W[rows[key, pos, prev], e] = 40.0
            if e == spec.end:
                break
            prev = e
    greedy = PolicyParams(W.ravel(), spec)
    check = local_improvement_check(greedy, old, TableQ(qv), states)
    assert (check.margins >= -1e-9).all()


# --- ppo_improve -----------------------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters(pi0):
    prompts = [build_prompt(initial_state((8,)))] * 20
    new, stats = ppo_improve(pi0, prompts, TableQ(np.linspace(0, 1, 157)), PpoConfig(learning_rate=0.0), seed=1)
    assert np.array_equal(new.weights, pi0.weights)
    assert stats.local_improvement_rate == 1.0 and stats.mean_kl == 0.0


def test_bandit_converges_to_better_response():
    q = TableQ([1.0, 0.0])
    prompts = [build_prompt(S0)] * 200
    cfg = PpoConfig(learning_rate=0.3, epochs_per_batch=20, kl_coef=0.0, minibatch_size=64, kl_ceiling=50.0)
    policy = _bandit_policy([0.0, 0.0])
    for it in range(5):
        policy, stats = ppo_improve(policy, prompts, q, cfg, seed=it)
    assert response_distribution(policy, S0, ResponseSpace(1, 1))[0] >= 0.95


def test_tiny_step_increases_surrogate(pi0):
    prompts = [build_prompt(initial_state((m,))) for m in (0, 8, 9, 11)] * 50
    cfg = PpoConfig(learning_rate=1e-6, epochs_per_batch=1, optimizer="sgd", kl_coef=0.0)
    _, stats = ppo_improve(pi0, prompts, TableQ(np.linspace(0, 1, 157)), cfg, seed=3)
    assert stats.objective_after > stats.objective_before


def test_divergence_guard_reverts(pi0):
    prompts = [build_prompt(initial_state((8,)))] * 50
    cfg = PpoConfig(learning_rate=5.0, kl_ceiling=1e-4, optimizer="sgd")
    new, stats = ppo_improve(pi0, prompts, TableQ(np.linspace(0, 10, 157)), cfg, seed=0)
    assert stats.diverged
    assert stats.epochs[-1]["reverted"] == 1.0
    assert np.array_equal(new.weights, pi0.weights)


def test_ppo_is_deterministic(pi0):
    prompts = [build_prompt(initial_state((m,))) for m in (0, 8)] * 30
    q = TableQ(np.linspace(0, 1, 157))
    a, sa = ppo_improve(pi0, prompts, q, PpoConfig(), seed=5)
    b, sb = ppo_improve(pi0, prompts, q, PpoConfig(), seed=5)
    assert np.array_equal(a.weights, b.weights) and sa == sb


@pytest.mark.parametrize("baseline", ["none", "mean", "learned-value"])
def test_stats_invariants(pi0, baseline):
    prompts = [build_prompt(initial_state((m,))) for m in (0, 8, 9)] * 30
    _, stats = ppo_improve(pi0, prompts, TableQ(np.linspace(0, 1, 157)), PpoConfig(baseline_mode=baseline), seed=2)
    assert stats.mean_kl >= 0 and stats.mean_kl_reverse >= 0
    assert 0 <= stats.local_improvement_rate <= 1
    assert stats.optimization_slack_proxy >= 0
    assert stats.n_samples == len(prompts) * 4


def test_oracle_q_gives_full_local_improvement(experiment, toy_enum, pi0):
    sol = exact_policy_evaluation(toy_enum.mdp, policy_matrix(pi0, toy_enum))
    q = OracleQ(toy_enum, sol)
    states = [toy_enum.representatives[s] for s in toy_enum.nonterminal_states()]
    prompts = [build_prompt(s) for s in states] * 200
    new, stats = ppo_improve(pi0, prompts, q, experiment.loop.ppo, seed=0)
    check = local_improvement_check(new, pi0, q, states)
    assert check.rate == 1.0
    assert (check.margins > 0).all()


def test_empty_prompts_rejected(pi0):
    with pytest.raises(PpoError):
        ppo_improve(pi0, [], TableQ(np.zeros(157)), PpoConfig())


@pytest.mark.parametrize(
    "bad", [{"clip_epsilon": 0}, {"kl_coef": -1}, {"baseline_mode": "median"}, {"kl_direction": "sideways"}, {"epochs_per_batch": 0}, {"optimizer": "lbfgs"}]
)
def test_config_validation(bad):
    with pytest.raises(PpoError):
        PpoConfig(**bad)


def test_config_round_trip():
    cfg = PpoConfig(kl_coef=0.3, adam_betas=(0.8, 0.9))
    assert PpoConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(PpoError):
        PpoConfig.from_dict({"lr": 1})


def test_prompt_context_fields():
    p = PromptContext('{"turns":[]}', "id")
    assert p.origin_state_id == "id"
