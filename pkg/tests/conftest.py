import numpy as np
import pytest

from polspoof.data import make_blobs
from polspoof.diffcore import NoiseModel
from polspoof.models import InitSpec, ModelSpec
from polspoof.pol import create_proof


@pytest.fixture(scope="session")
def tiny_data():
    return make_blobs(240, dim=3, classes=2, separation=3.0, seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return ModelSpec((3, 8, 2))


@pytest.fixture(scope="session")
def tiny_zeta():
    return InitSpec(seed=4)


@pytest.fixture(scope="session")
def tiny_proof(tiny_data, tiny_model, tiny_zeta):
    """E=3, S=12, k=4, B=16: 36 steps, 10 stored checkpoints."""
    b, led = create_proof(tiny_data, 4, 3, 12, tiny_zeta, 0.3, NoiseModel(),
                          model=tiny_model, batch_size=16)
    return b, led


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
