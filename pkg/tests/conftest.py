import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tinydet.netdef import micro_cfg, reference_cfg  # noqa: E402


@pytest.fixture(scope="session")
def ref_cfg():
    return reference_cfg()


@pytest.fixture(scope="session")
def micro():
    return micro_cfg()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
