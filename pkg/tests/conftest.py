import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probmap(rng, h, w, c, sharp=2.0):
    from idpl.datamodel import softmax_over_channels

    return softmax_over_channels(rng.normal(0, sharp, size=(h, w, c)))
