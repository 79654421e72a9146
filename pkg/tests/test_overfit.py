"""
Learnability experiments on 20 fixed synthetic images

These train for hundreds of epochs; run with `pytest --runslow`.
"""

import numpy as np
import pytest
import torch

from config import CONFIGS_DIR, load_config
from core.datagen import SyntheticPoseDataset
from core.decoder import run_inference
from core.geometry import oks
from core.trainer import Trainer
from modules.evaluate import run_eval

pytestmark = pytest.mark.slow

DEVICE = "cuda" if torch.cuda.is_available() else "cpu"


def _train(tmp_path, name, **overrides):
    cfg = load_config(str(CONFIGS_DIR / "overfit.cfg"), overrides)
    trainer = Trainer(cfg, tmp_path / name, device=DEVICE)
    trainer.run()
    return trainer.model.prune_for_inference(), cfg


def _mean_joint_error(model, cfg, dataset):
    """Pixel error of visible joints, each person taken from its best-OKS detection"""
    kappas = dataset.skeleton.kappas
    errors = []
    for i in range(len(dataset)):
        sample = dataset[i]
        dets = run_inference(sample.image, model, cfg.infer, DEVICE)
        for gt in sample.ground_truths():
            if not dets:
                continue
            best = max(dets, key=lambda d: oks(d.pose, gt.pose, gt.area, kappas))
            visible = gt.pose.visible
            dist = np.linalg.norm(best.pose.xy[visible] - gt.pose.xy[visible], axis=1)
            errors.extend(dist.tolist())
    return float(np.mean(errors))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    return _train(tmp_path_factory.mktemp("overfit"), "full")


def test_fits_training_images(trained):
    model, cfg = trained
    dataset = SyntheticPoseDataset(cfg.scene, cfg.data.train_images)
    result = run_eval(model, cfg, dataset, DEVICE)
    assert result.ap50 >= 0.9


def test_offsets_reduce_joint_error(trained, tmp_path):
    model, cfg = trained
    ablated, ablated_cfg = _train(
        tmp_path, "no_offset",
        **{"model.disk_offset": "false", "infer.cell_center_fallback": "true"},
    )
    dataset = SyntheticPoseDataset(cfg.scene, cfg.data.train_images)
    with_offsets = _mean_joint_error(model, cfg, dataset)
    without = _mean_joint_error(ablated, ablated_cfg, dataset)
    assert without > with_offsets
