"""
Training run loop

Owns the model, optimizer and schedule; iterates epochs with per-epoch
seeded data order, writes line-delimited metrics and per-epoch checkpoints.
"""

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .datagen import SyntheticPoseDataset, TargetCollator, TrainingSampleSet, load_coco
from .errors import NonFiniteLossError
from .losses import InsPoseCriterion, LossReport
from .network import InsPoseNet, load_checkpoint, save_checkpoint
from .skeleton import get_skeleton

logger = logging.getLogger(__name__)


def build_train_dataset(config):
    """Training split named by data.source"""
    if config.data.source == "coco":
        return load_coco(config.data.coco_train_ann, config.data.coco_train_images, config.model.num_keypoints)
    return SyntheticPoseDataset(config.scene, config.data.train_images)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


class Trainer:
    """
    SGD trainer for InsPoseNet

    Args:
        config: Validated Config
        run_dir: Output directory
        device: torch device string
        dataset: Optional PoseSample dataset overriding data.source
    """

    def __init__(self, config, run_dir, device: str = "cpu", dataset=None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.device = device

        seed_everything(config.train.seed)
        self.dataset = dataset if dataset is not None else build_train_dataset(config)
        skeleton = getattr(self.dataset, "skeleton", None) or get_skeleton(config.model.num_keypoints)
        self.samples = TrainingSampleSet(self.dataset, config.data, skeleton, seed=config.train.seed)
        self.collator = TargetCollator(config.model, config.assign)

        self.model = InsPoseNet(config.model, config.assign.level_strides).to(device)
        self.criterion = InsPoseCriterion(config.model, config.loss)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.train.lr,
            momentum=config.train.momentum,
            weight_decay=config.train.weight_decay,
        )
        self.iters_per_epoch = max(1, -(-len(self.samples) // config.train.batch_size))
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, self.lr_factor)

        self.start_epoch = 0
        self.iterations = 0

    def lr_factor(self, iteration: int) -> float:
        """Linear warmup, then /10 at each decay epoch"""
        cfg = self.config.train
        epoch = iteration // self.iters_per_epoch
        factor = 0.1 ** sum(1 for e in cfg.decay_epochs if epoch >= e)
        if iteration < cfg.warmup_iters:
            alpha = iteration / cfg.warmup_iters
            factor *= cfg.warmup_ratio * (1 - alpha) + alpha
        return factor

    def resume(self, path):
        """Continue from a checkpoint written by this trainer"""
        model, _, payload = load_checkpoint(path, self.config, map_location=self.device)
        self.model.load_state_dict(model.state_dict())
        if payload.get("optimizer"):
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("scheduler"):
            self.scheduler.load_state_dict(payload["scheduler"])
        self.start_epoch = int(payload.get("epoch", 0))
        self.iterations = self.start_epoch * self.iters_per_epoch
        logger.info(f"Resuming at epoch {self.start_epoch} from {path}")

    def build_loader(self, epoch: int) -> DataLoader:
        """Loader whose shuffle order depends only on (seed, epoch)"""
        self.samples.set_epoch(epoch)
        generator = torch.Generator()
        generator.manual_seed(self.config.train.seed * 1_000_003 + epoch)
        return DataLoader(
            self.samples,
            batch_size=self.config.train.batch_size,
            shuffle=True,
            generator=generator,
            collate_fn=self.collator,
            num_workers=self.config.WORKERS,
        )

    def _write_metrics(self, record: dict):
        with open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def _dump_batch(self, images, targets, image_ids, report: LossReport) -> Path:
        path = self.run_dir / "nonfinite_batch.pt"
        torch.save({
            "images": images.cpu(),
            "image_ids": list(image_ids),
            "cls_labels": [t.cpu() for t in targets.cls_labels],
            "kp_index": targets.kp_index.cpu(),
            "kp_valid": targets.kp_valid.cpu(),
            "losses": {k: (float(v) if v is not None else None) for k, v in vars(report).items()},
        }, path)
        return path

    def train_epoch(self, epoch: int) -> dict:
        """One pass over the data; returns the epoch's mean losses"""
        self.model.train()
        sums, count = {}, 0
        for images, targets, image_ids in self.build_loader(epoch):
            images = images.to(self.device)
            targets = targets.to(self.device)

            outputs = self.model(images)
            report = self.criterion(outputs, targets)
            if not torch.isfinite(report.total):
                dump = self._dump_batch(images, targets, image_ids, report)
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, iteration {self.iterations} (images {list(image_ids)})",
                    dump_path=dump,
                )

            self.optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            self.optimizer.step()
            self.scheduler.step()
            self.iterations += 1

            values = report.as_dict()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1

            record = {
                "epoch": epoch + 1,
                "iteration": self.iterations,
                "lr": self.optimizer.param_groups[0]["lr"],
                **values,
            }
            self._write_metrics(record)
            if self.iterations % self.config.train.log_every == 0:
                logger.info(
                    f"epoch {epoch + 1} iter {self.iterations} lr {record['lr']:.5f} "
                    + " ".join(f"{k} {v:.4f}" for k, v in values.items())
                )

        return {k: v / max(count, 1) for k, v in sums.items()}

    def run(self) -> Path:
        """
        Train from start_epoch to train.epochs

        Returns:
            Path of the last checkpoint
        """
        cfg = self.config.train
        self.config.save(self.run_dir / "config.txt")
        logger.info("=" * 50)
        logger.info(f"Training {cfg.epochs} epoch(s), {len(self.samples)} image(s), batch {cfg.batch_size}")
        logger.info(f"Device: {self.device}  Output: {self.run_dir}")
        logger.info("=" * 50)

        last = self.run_dir / "last.pt"
        for epoch in range(self.start_epoch, cfg.epochs):
            means = self.train_epoch(epoch)
            self._write_metrics({"epoch": epoch + 1, "summary": True, **means})

            path = self.run_dir / f"epoch_{epoch + 1:03d}.pt"
            save_checkpoint(path, self.model, self.config, epoch + 1, self.optimizer, self.scheduler)
            save_checkpoint(last, self.model, self.config, epoch + 1, self.optimizer, self.scheduler)
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs} done: " + " ".join(f"{k} {v:.4f}" for k, v in means.items()))
        return last
