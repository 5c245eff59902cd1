import numpy as np
import pytest

from capforge.data import build_vocabulary, generate_synthetic_corpus
from capforge.model import CaptionModel
from capforge.trainer import tiny_config


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic_corpus(3, 10, grid=8)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_vocabulary([c for s in tiny_corpus for c in s.captions])


@pytest.fixture
def tiny_model(tiny_vocab):
    return CaptionModel.init(tiny_config(), tiny_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'}" + (f" - {detail}" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
