"""
Visualize module - draw decoded poses on an image

Commands:
- visualize --ckpt <path> --image <path> --out <path> [--min-score S]

Joints are colored by group: magenta for center keypoints, blue for the
left side, orange for the right side.
"""

import argparse
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from config import load_config, parse_override_args
from core.datagen import load_image
from core.decoder import run_inference
from core.geometry import Detection
from core.network import load_checkpoint
from core.registry import command, CommandContext
from core.skeleton import Skeleton, get_skeleton


logger = logging.getLogger(__name__)

GROUP_COLORS = {
    "center": (255, 0, 255),
    "left": (0, 102, 255),
    "right": (255, 140, 0),
}
EDGE_COLOR = (230, 230, 230)


def render_visualization(
    image: np.ndarray,
    detections: Sequence[Detection],
    out_path,
    skeleton: Skeleton,
    min_score: float = 0.0,
    radius: int = 3,
) -> Path:
    """
    Draw skeleton edges and group-colored joints, then save

    Args:
        image: (H, W, 3) uint8
        detections: Decoded detections
        out_path: Raster output file
        skeleton: Keypoint layout
        min_score: Skip detections scoring below this
        radius: Joint radius in pixels

    Returns:
        out_path
    """
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for det in detections:
        if det.score < min_score:
            continue
        xy = det.pose.xy
        visible = det.pose.visible
        for a, b in skeleton.edges:
            if visible[a] and visible[b]:
                draw.line([tuple(xy[a]), tuple(xy[b])], fill=EDGE_COLOR, width=2)
        for j in np.flatnonzero(visible):
            x, y = xy[j]
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=GROUP_COLORS[skeleton.groups[j]])

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inspose.py visualize", description="Render detections")
    parser.add_argument("--ckpt", required=True, help="Checkpoint")
    parser.add_argument("--image", required=True, help="Input image")
    parser.add_argument("--out", required=True, help="Output image")
    parser.add_argument("--min-score", type=float, default=0.3, help="Hide detections below this score")
    parser.add_argument("--config", help="Config file (defaults to the checkpoint's)")
    return parser


@command(
    "visualize",
    description="Draw decoded poses on an image",
    usage="visualize --ckpt runs/desk/last.pt --image scene.png --out scene_pose.png",
    aliases=["vis"],
)
def visualize_cmd(ctx: CommandContext):
    args, extra = build_parser().parse_known_args(ctx.argv)
    overrides = parse_override_args(extra)
    stored = load_config(args.config, overrides) if (args.config or overrides) else None
    model, cfg, _ = load_checkpoint(args.ckpt, stored, map_location=ctx.device)
    model = model.to(ctx.device).prune_for_inference()

    image = load_image(args.image)
    dets = run_inference(image, model, cfg.infer, ctx.device)
    skeleton = get_skeleton(cfg.model.num_keypoints)
    render_visualization(image, dets, args.out, skeleton, args.min_score)
    shown = sum(1 for d in dets if d.score >= args.min_score)
    print(f"{shown} pose(s) drawn to {args.out}")
    return 0


def setup(ctx):
    """Module setup"""
    logger.debug("visualize module ready")
