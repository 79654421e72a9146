"""
Infer module - COCO keypoint results for a set of images

Commands:
- infer --ckpt <path> --images <glob> --out <results.json>
"""

import argparse
import glob
import json
import logging
from pathlib import Path
from typing import List, Sequence

from config import load_config, parse_override_args
from core.datagen import load_image
from core.decoder import detections_to_coco, run_inference
from core.network import load_checkpoint
from core.registry import command, CommandContext


logger = logging.getLogger(__name__)


def image_id_for(path: Path, index: int) -> int:
    """Numeric file stems are used as image ids, otherwise the position"""
    return int(path.stem) if path.stem.isdigit() else index


def run_infer(model, config, image_paths: Sequence, out_path, device: str = "cpu") -> List[dict]:
    """
    Decode every readable image and write one results file

    Unreadable images are logged and skipped.

    Args:
        model: Network
        config: Config
        image_paths: Image files, processed in sorted order
        out_path: Results JSON
        device: torch device

    Returns:
        The written records
    """
    records = []
    failed = 0
    for index, path in enumerate(sorted(Path(p) for p in image_paths)):
        try:
            image = load_image(path)
        except (OSError, ValueError) as e:
            failed += 1
            logger.warning(f"Skipping unreadable image {path}: {e}")
            continue
        dets = run_inference(image, model, config.infer, device)
        records.extend(detections_to_coco(dets, image_id_for(path, index)))
        logger.debug(f"{path}: {len(dets)} detection(s)")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(records), encoding="utf-8")
    logger.info(f"Wrote {len(records)} record(s) to {out_path} ({failed} image(s) skipped)")
    return records


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inspose.py infer", description="Run inference on images")
    parser.add_argument("--ckpt", required=True, help="Checkpoint")
    parser.add_argument("--images", required=True, help="Image glob (quote it)")
    parser.add_argument("--out", required=True, help="Results JSON")
    parser.add_argument("--config", help="Config file (defaults to the checkpoint's)")
    return parser


@command(
    "infer",
    description="Write COCO keypoint results for images",
    usage="infer --ckpt runs/desk/last.pt --images 'data/*.png' --out results.json",
)
def infer_cmd(ctx: CommandContext):
    args, extra = build_parser().parse_known_args(ctx.argv)
    overrides = parse_override_args(extra)
    stored = load_config(args.config, overrides) if (args.config or overrides) else None
    model, cfg, _ = load_checkpoint(args.ckpt, stored, map_location=ctx.device)
    model = model.to(ctx.device).prune_for_inference()

    paths = glob.glob(args.images, recursive=True)
    if not paths:
        logger.warning(f"No image matches {args.images}")
    records = run_infer(model, cfg, paths, args.out, ctx.device)
    print(f"{len(records)} detection(s) written to {args.out}")
    return 0


def setup(ctx):
    """Module setup"""
    logger.debug("infer module ready")
