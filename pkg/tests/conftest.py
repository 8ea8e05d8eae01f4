import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from hstm.anonymizer import AnonKey  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# sample trace key shipped with the original CryptoPAn distribution
SAMPLE_KEY = bytes([21, 34, 23, 141, 51, 164, 207, 128, 19, 10, 91, 22, 73, 144, 125, 16,
                    216, 152, 143, 131, 121, 121, 101, 39, 98, 87, 76, 45, 42, 132, 34, 2])


@pytest.fixture
def key():
    return AnonKey.from_seed(12345)


@pytest.fixture
def sample_key():
    return AnonKey(SAMPLE_KEY)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
