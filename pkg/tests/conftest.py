import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make `oracles` importable


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_interactions():
    from catn.corpus import Interaction

    return [
        Interaction("u1", "i1", 5.0, "great plot and great pacing"),
        Interaction("u1", "i2", 3.0, "the pacing dragged a bit"),
        Interaction("u2", "i1", 4.0, "plot twists kept me hooked"),
        Interaction("u2", "i3", 1.0, "dull dull dull"),
        Interaction("u3", "i2", 2.0, "weak pacing weak plot"),
    ]
