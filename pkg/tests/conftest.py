import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.environment import get_environment, surrogate_data  # noqa: E402
from core.safety_filter import BarrierSpec, CbfParams  # noqa: E402
from core.trajectory import make_rng  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance checks (deselect with -m "not slow")')


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def params():
    return CbfParams()


@pytest.fixture
def disc():
    return BarrierSpec('ellipse', center=(0.0, 0.0), axes=(1.0, 1.0), name='disc')


@pytest.fixture(scope='session')
def corridor():
    return get_environment('corridor')


@pytest.fixture(scope='session')
def corridor_surrogate(corridor):
    return surrogate_data(corridor, 256, 1, 4)


@pytest.fixture
def store(tmp_path):
    from core.artifact_store import ArtifactStore
    return ArtifactStore(tmp_path)

