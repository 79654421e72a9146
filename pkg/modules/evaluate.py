"""
Evaluate module - OKS keypoint AP/AR

Commands:
- eval --ckpt <path> [--ann <coco.json> --images <dir>] [--out <dir>]
- eval --results <results.json> [--ann <coco.json>] [--out <dir>]

Without --ann the synthetic validation split of the config is used.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from config import load_config, parse_override_args
from core.datagen import SyntheticPoseDataset, load_coco
from core.decoder import run_inference
from core.evalkit import EvalResult, evaluate, format_report, load_results
from core.network import load_checkpoint
from core.registry import command, CommandContext
from core.skeleton import get_skeleton


logger = logging.getLogger(__name__)


def build_eval_dataset(config, ann: Optional[str] = None, images: Optional[str] = None):
    """COCO file when given, otherwise the synthetic validation split"""
    if ann:
        root = images or config.data.coco_val_images or str(Path(ann).parent)
        return load_coco(ann, root, config.model.num_keypoints)
    return SyntheticPoseDataset(config.scene, config.data.val_images, seed_offset=config.data.val_seed)


def dataset_kappas(dataset, config):
    skeleton = getattr(dataset, "skeleton", None) or get_skeleton(config.model.num_keypoints)
    return skeleton.kappas


def ground_truths_of(dataset) -> Dict[int, list]:
    if hasattr(dataset, "ground_truths"):
        return dataset.ground_truths()
    return {s.image_id: s.ground_truths() for s in (dataset[i] for i in range(len(dataset)))}


def run_eval(model, config, dataset, device: str = "cpu") -> EvalResult:
    """
    Run inference over a dataset and score it

    Args:
        model: Network
        config: Config (infer section drives decoding)
        dataset: PoseSample dataset
        device: torch device

    Returns:
        EvalResult
    """
    detections, gts = {}, {}
    for i in range(len(dataset)):
        sample = dataset[i]
        detections[sample.image_id] = run_inference(sample.image, model, config.infer, device)
        gts[sample.image_id] = sample.ground_truths()
    return evaluate(detections, gts, dataset_kappas(dataset, config))


def write_report(result: EvalResult, out_dir, title: str = "keypoints") -> List[Path]:
    """metrics.txt (COCO-style text) and metrics.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = out_dir / "metrics.txt"
    machine = out_dir / "metrics.json"
    text.write_text(format_report(result, title), encoding="utf-8")
    machine.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [text, machine]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inspose.py eval", description="Evaluate keypoint AP")
    parser.add_argument("--ckpt", help="Checkpoint to evaluate")
    parser.add_argument("--results", help="COCO keypoint results file to evaluate instead of a checkpoint")
    parser.add_argument("--ann", help="COCO keypoint annotation file")
    parser.add_argument("--images", help="Image directory for --ann")
    parser.add_argument("--config", help="Config file (defaults to the checkpoint's)")
    parser.add_argument("--out", help="Report directory")
    return parser


@command(
    "eval",
    description="Evaluate a checkpoint or a results file",
    usage="eval --ckpt runs/desk/last.pt [--ann val.json --images val/]",
    aliases=["evaluate"],
)
def eval_cmd(ctx: CommandContext):
    args, extra = build_parser().parse_known_args(ctx.argv)
    overrides = parse_override_args(extra)
    if not args.ckpt and not args.results:
        print("eval needs --ckpt or --results")
        return 2

    if args.ckpt:
        stored = None
        if args.config or overrides:
            stored = load_config(args.config, overrides)
        model, cfg, _ = load_checkpoint(args.ckpt, stored, map_location=ctx.device)
        model = model.to(ctx.device).prune_for_inference()
        dataset = build_eval_dataset(cfg, args.ann, args.images)
        result = run_eval(model, cfg, dataset, ctx.device)
        out_dir = args.out or Path(args.ckpt).parent / "eval"
    else:
        cfg = load_config(args.config, overrides)
        dataset = build_eval_dataset(cfg, args.ann, args.images)
        detections = load_results(args.results, cfg.model.num_keypoints)
        result = evaluate(detections, ground_truths_of(dataset), dataset_kappas(dataset, cfg))
        out_dir = args.out or Path(args.results).parent

    paths = write_report(result, out_dir)
    print(format_report(result))
    print(f"Report written to {paths[0]} and {paths[1]}")
    return 0


def setup(ctx):
    """Module setup"""
    logger.debug("evaluate module ready")
