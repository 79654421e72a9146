import json
import logging

import numpy as np
import pytest
import torch
from PIL import Image

import inspose
from config import Config
from core.datagen import SyntheticPoseDataset
from core.decoder import detections_to_coco
from core.errors import NonFiniteLossError
from core.geometry import Detection, Pose
from core.losses import total_loss
from core.network import InsPoseNet, load_checkpoint
from core.skeleton import MINI_SKELETON
from core.trainer import Trainer
from modules.evaluate import build_eval_dataset, run_eval, write_report
from modules.infer import run_infer
from modules.train import run_train
from modules.visualize import GROUP_COLORS, render_visualization


@pytest.fixture
def cli(tmp_path, monkeypatch):
    """inspose.main with logs under tmp_path and root logging restored afterwards"""
    monkeypatch.setattr(inspose.config, "RUNS_DIR", tmp_path / "runs")
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level

    def run(*argv):
        return inspose.main(["--device", "cpu", *[str(a) for a in argv]])

    yield run
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def tiny_cfg_file(tiny_config, tmp_path):
    path = tmp_path / "tiny.cfg"
    tiny_config.save(path)
    return path


def _copy(cfg):
    out = Config.from_flat(cfg.to_flat())
    out.WORKERS = 0
    return out


def _metric_lines(run_dir):
    return [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]


def _live_model(cfg):
    """Untrained network whose classifier passes every location"""
    model = InsPoseNet(cfg.model).prune_for_inference()
    torch.nn.init.constant_(model.head.cls_logits.bias, 0.0)
    return model


class TestEntryPoint:

    def test_help(self, cli, capsys):
        assert cli("--help") == 0
        out = capsys.readouterr().out
        for name in ("train", "eval", "infer", "visualize"):
            assert name in out

    def test_no_command(self, cli):
        assert cli() == 2

    def test_unknown_command(self, cli):
        assert cli("bogus") == 2

    def test_eval_needs_input(self, cli):
        assert cli("eval") == 2

    def test_bad_override_fails(self, cli, tiny_cfg_file):
        assert cli("train", "--config", tiny_cfg_file, "--model.no_such_key", "1") == 1


class TestTraining:

    def test_smoke_run(self, cli, tiny_cfg_file, tmp_path):
        run_dir = tmp_path / "smoke"
        assert cli("train", "--config", tiny_cfg_file, "--out", run_dir, "--data.train_images", "8") == 0
        for name in ("epoch_001.pt", "epoch_002.pt", "last.pt", "config.txt", "metrics.jsonl"):
            assert (run_dir / name).exists()
        assert not list(run_dir.glob("*.tmp"))

        records = _metric_lines(run_dir)
        steps = [r for r in records if not r.get("summary")]
        # 8 images, batch 2, 2 epochs
        assert [r["iteration"] for r in steps] == list(range(1, 9))
        assert {"l_cls", "l_kpf", "l_do", "l_hm", "total"} <= set(steps[0])
        assert all(np.isfinite(r["total"]) for r in steps)
        assert [r["epoch"] for r in records if r.get("summary")] == [1, 2]

        _, stored, payload = load_checkpoint(run_dir / "last.pt")
        assert payload["epoch"] == 2
        assert stored.data.train_images == 8

    def test_warmup_then_decay(self, tiny_config, tmp_path):
        trainer = Trainer(_copy(tiny_config), tmp_path / "lr")
        # 4 images / batch 2: decay epoch 1 starts at iteration 2
        assert trainer.iters_per_epoch == 2
        assert trainer.lr_factor(0) == pytest.approx(tiny_config.train.warmup_ratio)
        assert trainer.lr_factor(1) == pytest.approx(0.5 * (1 + tiny_config.train.warmup_ratio))
        assert trainer.lr_factor(2) == pytest.approx(0.1)

    def test_disabled_branch_not_logged(self, tiny_config, tmp_path):
        cfg = _copy(tiny_config)
        cfg.model.disk_offset = False
        run_dir = tmp_path / "no_offset"
        trainer = Trainer(cfg, run_dir)
        assert trainer.model.offset_head is None
        trainer.train_epoch(0)
        steps = _metric_lines(run_dir)
        assert steps and all("l_do" not in r for r in steps)
        assert all("l_hm" in r for r in steps)

    def test_resume_matches_uninterrupted(self, tiny_config, tmp_path):
        full = Trainer(_copy(tiny_config), tmp_path / "full")
        full.run()

        first = _copy(tiny_config)
        first.train.epochs = 1
        Trainer(first, tmp_path / "half").run()

        resumed = Trainer(_copy(tiny_config), tmp_path / "resumed")
        resumed.resume(tmp_path / "half" / "epoch_001.pt")
        assert resumed.start_epoch == 1
        resumed.run()

        expected = full.model.state_dict()
        for key, value in resumed.model.state_dict().items():
            assert torch.equal(value, expected[key]), key

    def test_run_train_returns_last(self, tiny_config, tmp_path):
        cfg = _copy(tiny_config)
        cfg.train.epochs = 1
        cfg.train.decay_epochs = ()
        last = run_train(cfg, tmp_path / "one", device="cpu")
        assert last == tmp_path / "one" / "last.pt"
        assert (tmp_path / "one" / "epoch_001.pt").exists()

    def test_non_finite_loss_dumps_batch(self, tiny_config, tmp_path):
        trainer = Trainer(_copy(tiny_config), tmp_path / "nan")

        def poisoned(outputs, targets):
            logits = outputs.cls_logits[0].sum()
            return total_loss(logits * float("nan"), logits)

        trainer.criterion = poisoned
        with pytest.raises(NonFiniteLossError) as exc:
            trainer.train_epoch(0)
        dump = exc.value.dump_path
        assert dump == tmp_path / "nan" / "nonfinite_batch.pt"
        payload = torch.load(dump, weights_only=False)
        assert payload["images"].shape[0] == 2
        assert len(payload["image_ids"]) == 2
        assert payload["losses"]["l_do"] is None
        assert not (tmp_path / "nan" / "epoch_001.pt").exists()


class TestEvaluation:

    def test_report_is_deterministic(self, cli, tiny_config, tmp_path):
        run_dir = tmp_path / "run"
        cfg = _copy(tiny_config)
        cfg.train.epochs = 1
        cfg.train.decay_epochs = ()
        run_train(cfg, run_dir)

        assert cli("eval", "--ckpt", run_dir / "last.pt", "--out", tmp_path / "a") == 0
        assert cli("eval", "--ckpt", run_dir / "last.pt", "--out", tmp_path / "b") == 0
        first = (tmp_path / "a" / "metrics.json").read_bytes()
        assert first == (tmp_path / "b" / "metrics.json").read_bytes()
        assert "maxDets= 20" in (tmp_path / "a" / "metrics.txt").read_text()

    def test_default_report_dir(self, cli, tiny_config, tmp_path):
        run_dir = tmp_path / "run"
        cfg = _copy(tiny_config)
        cfg.train.epochs = 1
        cfg.train.decay_epochs = ()
        run_train(cfg, run_dir)
        assert cli("eval", "--ckpt", run_dir / "last.pt") == 0
        assert (run_dir / "eval" / "metrics.json").exists()

    def test_ground_truth_results_score_one(self, cli, tiny_config, tiny_cfg_file, tmp_path):
        dataset = build_eval_dataset(tiny_config)
        records = []
        for i in range(len(dataset)):
            sample = dataset[i]
            dets = [Detection.from_pose(1.0, gt.pose) for gt in sample.ground_truths()]
            records.extend(detections_to_coco(dets, sample.image_id))
        results = tmp_path / "gt_results.json"
        results.write_text(json.dumps(records))

        assert cli("eval", "--results", results, "--config", tiny_cfg_file, "--out", tmp_path / "report") == 0
        metrics = json.loads((tmp_path / "report" / "metrics.json").read_text())
        assert metrics["ap"] == pytest.approx(1.0)
        assert metrics["ap50"] == pytest.approx(1.0)
        assert metrics["ar"] == pytest.approx(1.0)

    def test_untrained_model_scores_near_zero(self, tiny_config, tmp_path):
        model = InsPoseNet(tiny_config.model).prune_for_inference()
        result = run_eval(model, tiny_config, build_eval_dataset(tiny_config))
        assert result.ap <= 0.05
        paths = write_report(result, tmp_path / "report")
        assert [p.name for p in paths] == ["metrics.txt", "metrics.json"]


class TestInferAndVisualize:

    def _images(self, tiny_config, directory):
        directory.mkdir()
        dataset = SyntheticPoseDataset(tiny_config.scene, 2)
        for i in range(2):
            Image.fromarray(dataset[i].image).save(directory / f"{i}.png")
        return sorted(directory.glob("*.png"))

    def test_results_are_byte_identical(self, tiny_config, tmp_path):
        paths = self._images(tiny_config, tmp_path / "images")
        model = _live_model(tiny_config)
        run_infer(model, tiny_config, paths, tmp_path / "a.json")
        run_infer(model, tiny_config, paths, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

        records = json.loads((tmp_path / "a.json").read_text())
        assert records
        for image_id in (0, 1):
            mine = [r for r in records if r["image_id"] == image_id]
            assert len(mine) <= tiny_config.infer.max_detections
        for r in records:
            assert r["category_id"] == 1
            assert len(r["keypoints"]) == 3 * tiny_config.model.num_keypoints
            assert 0.0 <= r["score"] <= 1.0

    def test_unreadable_image_is_skipped(self, tiny_config, tmp_path):
        paths = self._images(tiny_config, tmp_path / "images")
        broken = tmp_path / "images" / "7.png"
        broken.write_bytes(b"not an image")
        records = run_infer(_live_model(tiny_config), tiny_config, paths + [broken], tmp_path / "out.json")
        assert {r["image_id"] for r in records} <= {0, 1}
        assert json.loads((tmp_path / "out.json").read_text()) == records

    def test_infer_command(self, cli, tiny_config, tmp_path):
        run_dir = tmp_path / "run"
        cfg = _copy(tiny_config)
        cfg.train.epochs = 1
        cfg.train.decay_epochs = ()
        run_train(cfg, run_dir)
        self._images(tiny_config, tmp_path / "images")
        out = tmp_path / "results.json"
        assert cli("infer", "--ckpt", run_dir / "last.pt", "--images", tmp_path / "images" / "*.png", "--out", out) == 0
        assert isinstance(json.loads(out.read_text()), list)

    def test_no_detections_copies_image(self, tmp_path):
        image = np.random.default_rng(0).integers(0, 255, size=(40, 60, 3), dtype=np.uint8)
        out = render_visualization(image, [], tmp_path / "copy.png", MINI_SKELETON)
        with Image.open(out) as saved:
            assert np.array_equal(np.asarray(saved), image)

    def test_joints_use_group_colors(self, tmp_path):
        image = np.zeros((80, 80, 3), dtype=np.uint8)
        xy = [(40, 10), (10, 40), (70, 40), (25, 70), (55, 70)]
        pose = Pose(np.array([[x, y, 2.0] for x, y in xy]))
        out = render_visualization(image, [Detection.from_pose(0.9, pose)], tmp_path / "pose.png", MINI_SKELETON)
        with Image.open(out) as saved:
            pixels = np.asarray(saved)
        for j, (x, y) in enumerate(xy):
            assert tuple(pixels[y, x]) == GROUP_COLORS[MINI_SKELETON.groups[j]]

    def test_low_scores_hidden(self, tmp_path):
        image = np.zeros((40, 40, 3), dtype=np.uint8)
        pose = Pose(np.array([[20.0, 20.0, 2.0]] * 5))
        out = render_visualization(image, [Detection.from_pose(0.2, pose)], tmp_path / "x.png", MINI_SKELETON, min_score=0.5)
        with Image.open(out) as saved:
            assert not np.asarray(saved).any()
