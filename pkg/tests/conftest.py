import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mftraffic.cascade import CascadeModel, generate, solve_variance_system  # noqa: E402


def cascade_model(H, cv2, N, mean=1.0, **kw):
    c = solve_variance_system(cv2, H, N)
    return CascadeModel.from_factor_cv2(c, mean, cv2, H, **kw)


def cascade_trace(H, cv2, N, length, seed, mean=1.0):
    return generate(cascade_model(H, cv2, N, mean), length, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(20261015)
