import numpy as np
import pytest

from loraserve.model import ToyModelConfig, build_model
from loraserve.router import make_corpus, train_router
from loraserve.store import generate_adapters

SMALL = ToyModelConfig(vocab_size=64, hidden_dim=8, num_layers=2, seed=11)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_model():
    return build_model(SMALL)


@pytest.fixture(scope="session")
def small_registry(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapters")
    return generate_adapters(root, 6, SMALL.hidden_dim, 2, SMALL.num_layers, seed=5)


@pytest.fixture(scope="session")
def small_router(small_registry):
    prompts, ids = make_corpus(small_registry.n, 30, (3, 8), seed=1, vocab_size=SMALL.vocab_size, topic_size=2)
    return train_router(prompts, ids, np.eye(small_registry.n), epochs=200)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
