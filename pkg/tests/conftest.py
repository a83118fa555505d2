import os
import sys

import numpy as np
import pytest

# Ensure project root is on sys.path so `src` and `config` resolve
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene():
    from src.scenes import make_scene
    return make_scene("quadratic", (1, 16, 16), seed=3, lateral=0.8)
