import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
SRC_DIR = ROOT_DIR / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from common.geometry import RayBatch  # noqa: E402
from common.synthworld import gen_scene  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="slow マーカー付きのテストも実行する")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="--runslow を付けると実行されます")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def configs_dir():
    return ROOT_DIR / "configs"


@pytest.fixture(scope="session")
def tiny_scene():
    scene = gen_scene({"profile": "tiny"}, seed=0)
    scene.ensure_labels()
    return scene


@pytest.fixture
def make_batch():
    def _make(origins, directions, *, sem=None, depth=None, t_near=0.0, t_far=math.inf, offsets=None):
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        directions = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
        n = len(origins)
        return RayBatch(
            origins=origins,
            directions=directions,
            t_near=np.full(n, t_near),
            t_far=np.full(n, t_far),
            frame_offset=np.zeros(n, dtype=np.int64) if offsets is None else offsets,
            sem_label=np.full(n, -1) if sem is None else sem,
            depth_label=np.full(n, np.nan) if depth is None else depth,
        )

    return _make
