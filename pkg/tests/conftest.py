import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from circuitscope.pipeline import reference_models  # noqa: E402
from circuitscope.toyvlm import ToyModelConfig, build_model  # noqa: E402

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ref_cfg() -> ToyModelConfig:
    return reference_models()[1]


@pytest.fixture(scope="session")
def ref_model(ref_cfg):
    return build_model(ref_cfg)


@pytest.fixture(scope="session")
def small_cfg() -> ToyModelConfig:
    return ToyModelConfig(depth=4, seed=11, model_id="toy-d4")


@pytest.fixture(scope="session")
def small_model(small_cfg):
    return build_model(small_cfg)
