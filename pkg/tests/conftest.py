import numpy as np
import pytest
import torch

from config import Config, ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_model_cfg():
    """K=5 network small enough for CPU unit tests"""
    return ModelConfig(
        num_keypoints=5,
        backbone_widths=(8, 16, 16, 32),
        fpn_channels=16,
        head_channels=16,
        head_convs=2,
        branch_channels=16,
        heatmap_channels=16,
    )


@pytest.fixture
def tiny_config(tmp_path, tiny_model_cfg):
    """Full Config for fast end-to-end runs"""
    cfg = Config()
    cfg.RUNS_DIR = tmp_path / "runs"
    cfg.WORKERS = 0
    cfg.model = tiny_model_cfg
    cfg.scene.num_keypoints = 5
    cfg.scene.image_size = 128
    cfg.scene.min_height = 48
    cfg.scene.max_height = 100
    cfg.scene.max_persons = 2
    cfg.data.train_images = 4
    cfg.data.val_images = 2
    cfg.data.short_side_min = 128
    cfg.data.short_side_max = 128
    cfg.data.max_long_side = 256
    cfg.train.batch_size = 2
    cfg.train.epochs = 2
    cfg.train.decay_epochs = (1,)
    cfg.train.warmup_iters = 2
    cfg.train.log_every = 1
    cfg.infer.pre_nms_top_n = 100
    cfg.infer.max_detections = 20
    return cfg.validate()
