import numpy as np
import pytest

from iterppo.env_synthetic import EnvConfig, enumerate_env, load_toy_shop
from iterppo.harness.config import load_config
from iterppo.policy import FeatureSpec, init_params

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy():
    return load_toy_shop()


@pytest.fixture(scope="session")
def toy_enum(toy):
    return enumerate_env(toy)


@pytest.fixture(scope="session")
def experiment():
    return load_config(environ={})


@pytest.fixture(scope="session")
def pi0(experiment):
    return experiment.policy.build(experiment.env)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_env(vocab=2, max_len=1, horizon=1, **changes) -> EnvConfig:
    """A small valid config; customer tables live on token 0 (cold) and 1 (warm/hot)."""
    d = {
        "name": "tiny",
        "mdp": {"discount": 0.9, "horizon_cap": horizon, "vocab_size": vocab, "max_msg_len": max_len},
        "probe_tokens": [0],
        "offer_tokens": [1] if vocab > 1 else [],
        "adoption_probs": [0.6, 0.1, 0.1, 0.1, 0.1],
        "influence": 0.5,
        "business_drafts": [[[0], 1.0]],
        "initial_intent": [0.5, 0.3, 0.2],
        "intent_transition": [[[0.6, 0.3, 0.1]] * 3, [[0.2, 0.5, 0.3]] * 3, [[0.1, 0.2, 0.7]] * 3],
        "outcome_prob_by_intent": [[0.0, 0.1, 0.0], [0.1, 0.3, 0.1], [0.2, 0.8, 0.2]],
        "openers": [[[[0], 1.0]], [[[min(1, vocab - 1)], 1.0]], [[[min(1, vocab - 1)], 1.0]]],
        "customer_messages": [[[[0], 1.0]], [[[min(1, vocab - 1)], 1.0]], [[[min(1, vocab - 1)], 1.0]]],
        "customer_stop": [0.3, 0.2, 0.1],
        "seed": 0,
    }
    d.update(changes)
    return EnvConfig.from_dict(d)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
