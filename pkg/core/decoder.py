"""
Inference: candidate selection, per-instance KP-Nets, keypoint decoding, NMS
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .geometry import Detection, Pose, keypoint_nms
from .network import InsPoseNet, apply_kpnet, relative_coord_map, split_kpnet_params

logger = logging.getLogger(__name__)


@dataclass
class Candidate:
    """A location kept for decoding"""
    score: float
    level: int
    cell: Tuple[int, int]  # (x, y) on its level
    location: Tuple[float, float]  # image pixels
    params: torch.Tensor  # (C_f,)


def select_candidates(
    scores: Sequence[torch.Tensor],
    controllers: Sequence[torch.Tensor],
    strides: Sequence[int],
    score_threshold: float = 0.1,
    pre_nms_top_n: int = 500,
) -> List[Candidate]:
    """
    Threshold, then keep the global top-N by score

    Equal scores keep level order, then row-major cell order.

    Args:
        scores: Per level (h, w) probabilities
        controllers: Per level (C_f, h, w)
        strides: Level strides
        score_threshold: Keep scores strictly above this
        pre_nms_top_n: Cap on kept candidates

    Returns:
        Candidates by descending score
    """
    flat_scores, refs = [], []
    for level, (score_map, stride) in enumerate(zip(scores, strides)):
        h, w = score_map.shape[-2:]
        flat = score_map.reshape(-1)
        idx = torch.nonzero(flat > score_threshold, as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        flat_scores.append(flat[idx])
        refs.append(torch.stack([torch.full_like(idx, level), idx], dim=1))
    if not flat_scores:
        return []

    all_scores = torch.cat(flat_scores)
    all_refs = torch.cat(refs)
    order = torch.sort(all_scores, descending=True, stable=True).indices[:pre_nms_top_n]

    out = []
    for i in order.tolist():
        level, idx = all_refs[i].tolist()
        stride = strides[level]
        w = scores[level].shape[-1]
        x, y = idx % w, idx // w
        half = stride // 2
        out.append(Candidate(
            score=float(all_scores[i]),
            level=level,
            cell=(x, y),
            location=(float(x * stride + half), float(y * stride + half)),
            params=controllers[level].reshape(controllers[level].shape[0], -1)[:, idx],
        ))
    return out


def decode_keypoints(
    logits: torch.Tensor,
    offsets: Optional[torch.Tensor],
    stride: int,
    cell_center_fallback: bool = False,
) -> Tuple[Pose, np.ndarray]:
    """
    Argmax + offset decoding of one instance's keypoint maps

    Per channel j the argmax cell (first in row-major order) is refined by
    the offset stored there: ((x + dx) * s, (y + dy) * s).

    Args:
        logits: (K, h, w)
        offsets: (2K, h, w) ordered dx_1, dy_1, ...; None means zero offsets
        stride: Output-plane stride
        cell_center_fallback: Without offsets, decode to cell centers (x + 0.5) * s

    Returns:
        (Pose with v=2 everywhere, per-joint softmax probability at the argmax)
    """
    k, h, w = logits.shape
    flat = logits.reshape(k, -1)
    idx = torch.argmax(flat, dim=1)
    probs = torch.softmax(flat.double(), dim=1).gather(1, idx[:, None])[:, 0]

    xs = (idx % w).double()
    ys = torch.div(idx, w, rounding_mode="floor").double()
    if offsets is not None:
        off = offsets.reshape(k, 2, -1).double()
        dx = off[:, 0].gather(1, idx[:, None])[:, 0]
        dy = off[:, 1].gather(1, idx[:, None])[:, 0]
        xs, ys = xs + dx, ys + dy
    elif cell_center_fallback:
        xs, ys = xs + 0.5, ys + 0.5

    kps = np.zeros((k, 3))
    kps[:, 0] = (xs * stride).cpu().numpy()
    kps[:, 1] = (ys * stride).cpu().numpy()
    kps[:, 2] = 2.0
    return Pose(kps), probs.cpu().numpy()


def finalize_detections(dets: Sequence[Detection], nms_iou: float = 0.6, max_detections: int = 100) -> List[Detection]:
    """Keypoint NMS, then the top max_detections by score"""
    return keypoint_nms(dets, nms_iou)[:max_detections]


def _prepare_image(image: np.ndarray, short_side: int):
    """Optional test-time resize plus padding; returns (tensor, scale)"""
    from .datagen import image_to_tensor, pad_to_multiple, resize_image

    scale = 1.0
    if short_side:
        scale = short_side / min(image.shape[:2])
        image = resize_image(image, scale)
    padded = pad_to_multiple(image, 128)
    return image_to_tensor(padded), scale


@torch.no_grad()
def run_inference(image: np.ndarray, model: InsPoseNet, infer_cfg, device: str = "cpu") -> List[Detection]:
    """
    Full pipeline for one image

    Args:
        image: (H, W, 3) uint8 RGB
        model: Network (switched to eval mode)
        infer_cfg: InferenceConfig
        device: torch device

    Returns:
        Detections in original image coordinates, by descending score
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    model.eval()
    tensor, scale = _prepare_image(image, infer_cfg.test_short_side)
    outputs = model(tensor.unsqueeze(0).to(device))

    scores = [torch.sigmoid(x[0, 0]) for x in outputs.cls_logits]
    controllers = [c[0] for c in outputs.controllers]
    candidates = select_candidates(scores, controllers, outputs.strides, infer_cfg.score_threshold, infer_cfg.pre_nms_top_n)
    if not candidates:
        return []

    cfg = model.cfg
    stride = cfg.output_stride
    features = outputs.kp_features[0]
    offsets = outputs.offsets[0] if outputs.offsets is not None else None
    h, w = features.shape[-2:]

    dets = []
    chunk = max(int(infer_cfg.kpnet_chunk), 1)
    for start in range(0, len(candidates), chunk):
        batch = candidates[start:start + chunk]
        theta = torch.stack([c.params for c in batch])
        xy = torch.tensor([c.location for c in batch], dtype=features.dtype, device=features.device)
        rel = relative_coord_map(xy, (h, w), stride, cfg.rel_coord_scale)
        inputs = torch.cat([features.expand(len(batch), -1, -1, -1), rel], dim=1)
        logits = apply_kpnet(inputs, split_kpnet_params(theta, cfg))
        for cand, kp_logits in zip(batch, logits):
            pose, joint_scores = decode_keypoints(kp_logits, offsets, stride, infer_cfg.cell_center_fallback)
            if scale != 1.0:
                kps = pose.keypoints.copy()
                kps[:, :2] /= scale
                pose = Pose(kps)
            dets.append(Detection.from_pose(cand.score, pose, joint_scores))

    return finalize_detections(dets, infer_cfg.nms_iou, infer_cfg.max_detections)


def detections_to_coco(dets: Sequence[Detection], image_id: int, category_id: int = 1) -> List[dict]:
    """COCO keypoint results records; the third value per joint is its confidence"""
    records = []
    for det in dets:
        joint = det.joint_scores if det.joint_scores is not None else np.full(det.pose.num_keypoints, det.score)
        flat = []
        for (x, y), s in zip(det.pose.xy, joint):
            flat.extend([round(float(x), 3), round(float(y), 3), round(float(s), 6)])
        records.append({
            "image_id": int(image_id),
            "category_id": int(category_id),
            "keypoints": flat,
            "score": round(float(det.score), 6),
        })
    return records
