import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "threadsafe")

import numpy as np
import pytest

from boneaxisreg.phantom import make_knee_phantom
from boneaxisreg.projector import ProjectionGeometry


@pytest.fixture(scope="session")
def phantom():
    return make_knee_phantom()


@pytest.fixture(scope="session")
def lateral():
    return ProjectionGeometry.lateral()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def models(phantom):
    from boneaxisreg.registration import build_models

    v, masks, _ = phantom
    return build_models(v, masks)


@pytest.fixture(scope="session")
def renderer(phantom, lateral):
    from boneaxisreg.simulate import FrameRenderer

    v, masks, _ = phantom
    return FrameRenderer(v, masks, lateral)
