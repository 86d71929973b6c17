import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uise.crop import CropParams, crop_model
from uise.transform import crop_transform, reduce_model

settings.register_profile("uise", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("uise")


@pytest.fixture(scope="session")
def crop():
    return crop_model()


@pytest.fixture(scope="session")
def crop_t():
    return crop_transform()


@pytest.fixture(scope="session")
def crop_reduced(crop, crop_t):
    return reduce_model(crop, crop_t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
