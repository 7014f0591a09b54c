from __future__ import annotations

import numpy as np
import pytest

from cmdp_lab.model import Dims, ModelKind, generate_instance


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_model1():
    return generate_instance(7, Dims(4, 2, 3, 4, 3), ModelKind.MODEL_I, 5, 0.0)


@pytest.fixture(scope="session")
def small_model2():
    return generate_instance(13, Dims(4, 2, 3, 3, 3), ModelKind.MODEL_II, 4, 0.25)
