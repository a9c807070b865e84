import numpy as np
import pytest
from pmodlab.models import ModelConfig, TokenSequence
from pmodlab.samples import SynthTask


def pytest_addoption(parser):
    parser.addoption("--runslow", action = "store_true", default = False, help = "run the minutes-scale statistical checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: minutes-scale statistical check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason = "needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers = 2, d_model = 16, n_heads = 2, d_ff = 32, vocab_size = 32, max_seq = 64)


@pytest.fixture
def toy_config():
    return ModelConfig(n_layers = 8, d_model = 64, n_heads = 4, d_ff = 128, vocab_size = 16, max_seq = 128)


@pytest.fixture
def tiny_task():
    return SynthTask(n_vision = 8, n_signal = 2, n_keys = 4, n_values = 4, seed = 0)


@pytest.fixture
def make_seq():
    """Random sequence of `n_vision` vision tokens followed by `n_text` text tokens."""
    def _make(d, n_vision, n_text, seed = 0, scale = 1.0):
        rng = np.random.default_rng(seed)
        return TokenSequence.build(rng.normal(0, scale, (n_vision, d)), rng.normal(0, scale, (n_text, d)))
    return _make


@pytest.fixture
def rel_error():
    """Norm-wise relative error between two gradient arrays."""
    def _rel(a, b):
        a, b = np.ravel(a), np.ravel(b)
        denom = np.linalg.norm(a) + np.linalg.norm(b)
        return 0.0 if denom < 1e-12 else float(np.linalg.norm(a - b) / denom)
    return _rel
