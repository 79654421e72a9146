"""
Training target construction

Per FPN level: positive/background labels and the instance each positive
location predicts (center sampling on pseudo-boxes). On the KP-Net output
plane: one-hot keypoint cells and the instance-agnostic disk offset field.
On the stride-8 plane: Gaussian keypoint heatmaps.

All per-image functions are pure numpy; `collate_targets` stacks a batch
into torch tensors for the loss.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .geometry import Box, Pose, min_enclosing_rect

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelSpec:
    """One FPN level: stride and the pseudo-box longest sides it takes"""
    stride: int
    scale_range: Tuple[float, float]
    accepts_empty: bool = False  # first level also takes zero-size pseudo-boxes

    def accepts(self, longest_side: float) -> bool:
        lower, upper = self.scale_range
        if longest_side <= 0:
            return self.accepts_empty
        return lower < longest_side <= upper


def build_levels(strides: Sequence[int], scale_bounds: Sequence[float]) -> List[LevelSpec]:
    """
    Level specs partitioning (0, inf) by the given boundaries

    Args:
        strides: Level strides, P3 first
        scale_bounds: Inner boundaries, one fewer than strides

    Returns:
        List of LevelSpec
    """
    edges = [0.0] + [float(b) for b in scale_bounds] + [math.inf]
    return [
        LevelSpec(int(s), (edges[i], edges[i + 1]), accepts_empty=(i == 0))
        for i, s in enumerate(strides)
    ]


@dataclass(frozen=True)
class InstanceAnnotation:
    """A ground-truth person"""
    pose: Pose
    pseudo_box: Box
    area: float

    @classmethod
    def from_pose(cls, pose: Pose, area: Optional[float] = None) -> "InstanceAnnotation":
        """Derive the pseudo-box; area defaults to its area (at least 1 px^2)"""
        box = min_enclosing_rect(pose)
        if area is None or area <= 0:
            area = max(box.area, 1.0)
        return cls(pose, box, float(area))


@dataclass
class TrainingTargets:
    """Everything the losses need for one image"""
    cls_labels: List[np.ndarray]  # per level (h, w), 0/1
    instance_index: List[np.ndarray]  # per level (h, w), -1 for background
    kp_index: np.ndarray  # (M, K) flat cell index on the output plane
    kp_valid: np.ndarray  # (M, K) bool
    offset_target: np.ndarray  # (2K, h', w')
    offset_mask: np.ndarray  # (2K, h', w') bool
    heatmap: np.ndarray  # (K, H/8, W/8)
    clamped: int = 0

    @property
    def num_instances(self) -> int:
        return self.kp_index.shape[0]

    @property
    def num_positives(self) -> int:
        return int(sum(lbl.sum() for lbl in self.cls_labels))


def map_location_to_image(x, y, stride: int):
    """Image-plane point of feature cell (x, y): (x*s + s//2, y*s + s//2)"""
    half = stride // 2
    return x * stride + half, y * stride + half


def assign_instances(
    levels: Sequence[LevelSpec],
    shapes: Sequence[Tuple[int, int]],
    instances: Sequence[InstanceAnnotation],
    center_radius: float = 1.5,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Center-sampling label assignment

    A location is positive for an instance when its image point lies strictly
    inside the square of half-side r*s around the pseudo-box center and the
    pseudo-box longest side belongs to the level. Several candidates go to
    the smallest pseudo-box area (lower index on equal areas).

    Args:
        levels: Level specs
        shapes: (h, w) of each level's map
        instances: Ground truth
        center_radius: r

    Returns:
        Per level (cls_label uint8, instance_index int64)
    """
    out = []
    for level, (h, w) in zip(levels, shapes):
        s = level.stride
        labels = np.zeros((h, w), dtype=np.uint8)
        index = np.full((h, w), -1, dtype=np.int64)
        members = [i for i, inst in enumerate(instances) if level.accepts(inst.pseudo_box.longest_side)]
        if members:
            px, py = map_location_to_image(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), s)
            best_area = np.full((h, w), np.inf)
            for i in members:
                box = instances[i].pseudo_box
                cx, cy = box.center
                half = center_radius * s
                inside_x = (px > cx - half) & (px < cx + half)
                inside_y = (py > cy - half) & (py < cy + half)
                inside = inside_y[:, None] & inside_x[None, :]
                better = inside & (box.area < best_area)
                best_area[better] = box.area
                index[better] = i
            labels[index >= 0] = 1
        out.append((labels, index))
    return out


def _onehot_cells(pose: Pose, stride: int, map_h: int, map_w: int):
    """Cells (x, y) of each keypoint on the plane, validity (v=2) and clamp count"""
    cells = np.floor(pose.xy / stride).astype(np.int64)
    valid = pose.visible.copy()
    clipped = cells.copy()
    clipped[:, 0] = np.clip(cells[:, 0], 0, map_w - 1)
    clipped[:, 1] = np.clip(cells[:, 1], 0, map_h - 1)
    clamped = int(((clipped != cells).any(axis=1) & valid).sum())
    return clipped, valid, clamped


def keypoint_onehot_target(instance: InstanceAnnotation, stride: int, map_h: int, map_w: int):
    """
    One-hot spatial targets of one instance

    Args:
        instance: The person
        stride: Output-plane stride
        map_h: Plane height
        map_w: Plane width

    Returns:
        (masks (K, h, w) float32, valid (K,) bool); keypoints with v<2 get an
        all-zero mask and valid=False
    """
    cells, valid, clamped = _onehot_cells(instance.pose, stride, map_h, map_w)
    if clamped:
        logger.warning(f"{clamped} visible keypoint(s) fell outside the {map_w}x{map_h} grid and were clamped")
    masks = np.zeros((len(cells), map_h, map_w), dtype=np.float32)
    for j in np.flatnonzero(valid):
        masks[j, cells[j, 1], cells[j, 0]] = 1.0
    return masks, valid


def disk_offset_target(
    instances: Sequence[InstanceAnnotation],
    stride: int,
    radius: float,
    map_shape: Tuple[int, int],
):
    """
    Instance-agnostic offset field inside keypoint disks

    For category j, a cell p within `radius` cells of some keypoint's
    plane position kp/s stores kp/s - p; overlapping disks take the nearest
    keypoint (lowest instance index on exact ties). Labeled keypoints
    (v>0) contribute.

    Args:
        instances: Ground truth
        stride: Output-plane stride
        radius: R in plane cells
        map_shape: (h, w)

    Returns:
        (field (2K, h, w) float64 ordered dx_1, dy_1, ..., mask (2K, h, w) bool)
    """
    h, w = map_shape
    num_kp = instances[0].pose.num_keypoints if instances else 0
    target = np.zeros((2 * num_kp, h, w), dtype=np.float64)
    mask = np.zeros((2 * num_kp, h, w), dtype=bool)
    if not instances:
        return target, mask

    gx = np.arange(w, dtype=np.float64)[None, None, :]
    gy = np.arange(h, dtype=np.float64)[None, :, None]
    for j in range(num_kp):
        pts = np.array([inst.pose.xy[j] for inst in instances if inst.pose.labeled[j]]) / stride
        if len(pts) == 0:
            continue
        dx = pts[:, 0, None, None] - gx  # (n, 1, w)
        dy = pts[:, 1, None, None] - gy  # (n, h, 1)
        dist = np.sqrt(dx ** 2 + dy ** 2)  # (n, h, w)
        nearest = dist.argmin(axis=0)
        inside = np.take_along_axis(dist, nearest[None], axis=0)[0] <= radius
        dx_full = np.broadcast_to(dx, dist.shape)
        dy_full = np.broadcast_to(dy, dist.shape)
        target[2 * j] = np.where(inside, np.take_along_axis(dx_full, nearest[None], axis=0)[0], 0.0)
        target[2 * j + 1] = np.where(inside, np.take_along_axis(dy_full, nearest[None], axis=0)[0], 0.0)
        mask[2 * j] = inside
        mask[2 * j + 1] = inside
    return target, mask


def heatmap_target(
    instances: Sequence[InstanceAnnotation],
    stride: int,
    map_shape: Tuple[int, int],
    sigma: float = 2.0,
    num_keypoints: Optional[int] = None,
) -> np.ndarray:
    """
    Multi-person keypoint heatmaps

    Per category, the pointwise max of exp(-d^2 / (2 sigma^2)) around each
    labeled keypoint's cell (clamped onto the grid), so the peak is exactly 1.

    Args:
        instances: Ground truth
        stride: Heatmap stride
        map_shape: (h, w)
        sigma: Gaussian sigma in cells
        num_keypoints: K when instances is empty

    Returns:
        (K, h, w) float32 in [0, 1]
    """
    h, w = map_shape
    if num_keypoints is None:
        num_keypoints = instances[0].pose.num_keypoints if instances else 0
    heat = np.zeros((num_keypoints, h, w), dtype=np.float32)
    gx = np.arange(w, dtype=np.float64)[None, :]
    gy = np.arange(h, dtype=np.float64)[:, None]
    for inst in instances:
        cells = np.floor(inst.pose.xy / stride)
        cells[:, 0] = np.clip(cells[:, 0], 0, w - 1)
        cells[:, 1] = np.clip(cells[:, 1], 0, h - 1)
        for j in np.flatnonzero(inst.pose.labeled):
            d2 = (gx - cells[j, 0]) ** 2 + (gy - cells[j, 1]) ** 2
            np.maximum(heat[j], np.exp(-d2 / (2.0 * sigma ** 2)), out=heat[j])
    return heat


def build_targets(
    instances: Sequence[InstanceAnnotation],
    image_hw: Tuple[int, int],
    model_cfg,
    assign_cfg,
    levels: Optional[Sequence[LevelSpec]] = None,
) -> TrainingTargets:
    """
    All targets for one padded image

    Args:
        instances: Ground truth (coordinates in the padded image)
        image_hw: Padded (H, W), multiples of the largest stride
        model_cfg: ModelConfig (K, output stride)
        assign_cfg: AssignmentConfig
        levels: Level specs; built from assign_cfg when omitted

    Returns:
        TrainingTargets
    """
    height, width = image_hw
    if levels is None:
        levels = build_levels(assign_cfg.level_strides, assign_cfg.scale_bounds)
    num_kp = model_cfg.num_keypoints

    shapes = [(height // lv.stride, width // lv.stride) for lv in levels]
    assigned = assign_instances(levels, shapes, instances, assign_cfg.center_radius)

    out_stride = model_cfg.output_stride
    out_h, out_w = height // out_stride, width // out_stride
    kp_index = np.zeros((len(instances), num_kp), dtype=np.int64)
    kp_valid = np.zeros((len(instances), num_kp), dtype=bool)
    clamped = 0
    for m, inst in enumerate(instances):
        cells, valid, n_clamped = _onehot_cells(inst.pose, out_stride, out_h, out_w)
        kp_index[m] = cells[:, 1] * out_w + cells[:, 0]
        kp_valid[m] = valid
        clamped += n_clamped
    if clamped:
        logger.warning(f"{clamped} visible keypoint(s) clamped onto the {out_w}x{out_h} output grid")

    offset_target, offset_mask = disk_offset_target(instances, out_stride, assign_cfg.disk_radius, (out_h, out_w))
    if not instances:
        offset_target = np.zeros((2 * num_kp, out_h, out_w))
        offset_mask = np.zeros((2 * num_kp, out_h, out_w), dtype=bool)

    heat = heatmap_target(instances, 8, (height // 8, width // 8), assign_cfg.heatmap_sigma, num_kp)

    return TrainingTargets(
        cls_labels=[lbl for lbl, _ in assigned],
        instance_index=[idx for _, idx in assigned],
        kp_index=kp_index,
        kp_valid=kp_valid,
        offset_target=offset_target,
        offset_mask=offset_mask,
        heatmap=heat,
        clamped=clamped,
    )


@dataclass
class TargetBatch:
    """Targets of a batch; instance_index is global over the batch's instances"""
    cls_labels: List[torch.Tensor]  # per level (N, h, w) long
    instance_index: List[torch.Tensor]  # per level (N, h, w) long, -1 background
    kp_index: torch.Tensor  # (M, K) long
    kp_valid: torch.Tensor  # (M, K) bool
    offset_target: torch.Tensor  # (N, 2K, h', w')
    offset_mask: torch.Tensor  # (N, 2K, h', w') bool
    heatmap: torch.Tensor  # (N, K, H/8, W/8)
    clamped: int = 0

    @property
    def num_positives(self) -> int:
        return int(sum(int(lbl.sum()) for lbl in self.cls_labels))

    def to(self, device) -> "TargetBatch":
        return TargetBatch(
            cls_labels=[t.to(device) for t in self.cls_labels],
            instance_index=[t.to(device) for t in self.instance_index],
            kp_index=self.kp_index.to(device),
            kp_valid=self.kp_valid.to(device),
            offset_target=self.offset_target.to(device),
            offset_mask=self.offset_mask.to(device),
            heatmap=self.heatmap.to(device),
            clamped=self.clamped,
        )


def collate_targets(targets: Sequence[TrainingTargets]) -> TargetBatch:
    """Stack per-image targets, offsetting instance indices per image"""
    num_levels = len(targets[0].cls_labels)
    bases = np.cumsum([0] + [t.num_instances for t in targets[:-1]])

    instance_index = []
    for lv in range(num_levels):
        maps = []
        for base, t in zip(bases, targets):
            idx = t.instance_index[lv]
            maps.append(np.where(idx >= 0, idx + base, -1))
        instance_index.append(torch.from_numpy(np.stack(maps)).long())

    num_kp = targets[0].heatmap.shape[0]
    return TargetBatch(
        cls_labels=[torch.from_numpy(np.stack([t.cls_labels[lv] for t in targets])).long() for lv in range(num_levels)],
        instance_index=instance_index,
        kp_index=torch.from_numpy(np.concatenate([t.kp_index for t in targets]).reshape(-1, num_kp)).long(),
        kp_valid=torch.from_numpy(np.concatenate([t.kp_valid for t in targets]).reshape(-1, num_kp)),
        offset_target=torch.from_numpy(np.stack([t.offset_target for t in targets])).float(),
        offset_mask=torch.from_numpy(np.stack([t.offset_mask for t in targets])),
        heatmap=torch.from_numpy(np.stack([t.heatmap for t in targets])).float(),
        clamped=sum(t.clamped for t in targets),
    )
