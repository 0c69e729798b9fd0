from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# reference efficiencies: three detectors, then facet A and facet B coupling
TM_ROW = (0.437, 0.436, 0.432, 0.221, 0.148)
TE_ROW = (0.065, 0.066, 0.064, 0.081, 0.084)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
