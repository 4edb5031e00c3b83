import pytest
from hypothesis import HealthCheck, settings

import pst.tensor_ops as ops

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(autouse=True)
def debug_checks():
    """Every test runs with finiteness validation on each op output."""
    ops.set_debug_checks(True)
    yield
    ops.set_debug_checks(False)
