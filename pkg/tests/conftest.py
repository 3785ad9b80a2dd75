import numpy as np
import pytest

from milblock.data import SyntheticSpec, gen_embedding_bags

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# The separable embedding task: C'=3, D=16, M=49, 600 train / 200 validation bags.
SEPARABLE = dict(mode="embeddings", n_classes=3, dim=16, grid=7, key_min=3, key_max=8,
                 separation=6.0, noise_sigma=1.0, background_sigma=1.0)


@pytest.fixture(scope="session")
def separable_data():
    train = gen_embedding_bags(SyntheticSpec(bags=600, seed=101, **SEPARABLE))
    val = gen_embedding_bags(SyntheticSpec(bags=200, seed=202, **SEPARABLE))
    return train, val
