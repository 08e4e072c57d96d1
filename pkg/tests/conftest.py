"""Shared fixtures: a small generated dataset and a briefly trained detector.

Session scope keeps the expensive pieces (scene generation, a short training
run) to one instance for the whole suite; tests must not mutate them.
"""

import numpy as np
import pytest

from pillarptq.config import TrainConfig
from pillarptq.dataset import generate_dataset
from pillarptq.detector import GridConfig
from pillarptq.pipeline import pillar_features, sample_calibration_set, train_fp_baseline


@pytest.fixture(scope="session")
def grid_cfg() -> GridConfig:
    return GridConfig()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 train / 8 val generated scenes on disk."""
    from pillarptq.scenegen import SceneSpec

    root = tmp_path_factory.mktemp("tiny_ds") / "ds"
    return generate_dataset(root, SceneSpec(), n_train=24, n_val=8, seed=7)


@pytest.fixture(scope="session")
def tiny_net(tiny_dataset, grid_cfg):
    """Detector trained for 2 epochs; accuracy floor disabled on purpose."""
    cfg = TrainConfig(epochs=2, ap_floor=0.0)
    net, _info = train_fp_baseline(tiny_dataset, cfg, grid_cfg)
    return net

@pytest.fixture(scope="session")
def tiny_calib_feats(tiny_dataset, grid_cfg):
    frames = sample_calibration_set(tiny_dataset, 8, seed=0)
    return pillar_features(tiny_dataset, frames, grid_cfg)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
