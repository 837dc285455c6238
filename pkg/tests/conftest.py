import numpy as np
import pytest

from moeqlab.model import ModelConfig, forge_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=32, d_model=8, n_layers=2, d_ff=16,
                       n_shared=1, n_routed=4, top_k=2, max_seq_len=24)


@pytest.fixture(scope="session")
def small_model(small_config):
    return forge_model(small_config, seed=7, router_skew=1.0)


def random_spd(rng, n, eps=1e-3):
    m = rng.uniform(-1, 1, size=(n, n))
    return m.T @ m + eps * np.eye(n)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
