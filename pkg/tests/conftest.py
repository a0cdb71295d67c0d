import numpy as np
import pytest

from punet import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def debug_mode():
    ad.set_debug(True)
    yield
    ad.set_debug(False)


def projection_loss(out: ad.Tensor, seed: int = 7) -> ad.Tensor:
    """Scalar probe of a tensor: sum of the output against fixed random weights."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * w).sum()


@pytest.fixture(scope="session")
def tiny_corpus():
    from punet.corpus import SynthConfig, synth_corpus
    return synth_corpus(SynthConfig(n_train=12, n_dev=4, n_test=4, lexicon_size=8), seed=3)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
