"""
Pose and box primitives, OKS similarity, IoU and keypoint NMS

Everything here is a pure function over immutable values.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import UndecodableInstanceError


@dataclass(frozen=True, eq=False)
class Pose:
    """
    K keypoints as an immutable (K, 3) array of (x, y, v)

    v: 0 = not labeled, 1 = labeled but invisible, 2 = labeled and visible.
    Coordinates of v=0 entries carry no meaning.
    """
    keypoints: np.ndarray

    def __post_init__(self):
        kps = np.array(self.keypoints, dtype=np.float64).reshape(-1, 3)
        kps.setflags(write=False)
        object.__setattr__(self, "keypoints", kps)

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "Pose":
        """Build from COCO triplets [x1, y1, v1, ..., xK, yK, vK]"""
        if len(flat) % 3:
            raise ValueError(f"keypoint list length {len(flat)} is not a multiple of 3")
        return cls(np.asarray(flat, dtype=np.float64).reshape(-1, 3))

    def to_flat(self) -> List[float]:
        return [float(v) for v in self.keypoints.reshape(-1)]

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2]

    @property
    def labeled(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] >= 2

    @property
    def num_labeled(self) -> int:
        return int(self.labeled.sum())

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.keypoints, other.keypoints)

    __hash__ = None


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in image pixels"""
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"invalid box {self.as_tuple()}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(float(x), float(y), float(x + w), float(y + h))

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> List[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def longest_side(self) -> float:
        return max(self.width, self.height)


@dataclass(frozen=True, eq=False)
class Detection:
    """A decoded person: instance score, pose (all v=2) and its enclosing rectangle"""
    score: float
    pose: Pose
    rect: Box
    joint_scores: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    @classmethod
    def from_pose(cls, score: float, pose: Pose, joint_scores: Optional[np.ndarray] = None) -> "Detection":
        return cls(float(score), pose, min_enclosing_rect(pose), joint_scores)


def min_enclosing_rect(pose: Pose) -> Box:
    """
    Tightest axis-aligned rectangle around the labeled (v>0) keypoints

    Args:
        pose: The pose

    Returns:
        The enclosing Box (degenerate for a single keypoint)

    Raises:
        UndecodableInstanceError: no keypoint has v>0
    """
    pts = pose.xy[pose.labeled]
    if len(pts) == 0:
        raise UndecodableInstanceError("pose has no labeled keypoint")
    x_min, y_min = pts.min(axis=0)
    x_max, y_max = pts.max(axis=0)
    return Box(float(x_min), float(y_min), float(x_max), float(y_max))


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or zero-area unions"""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU of (N, 4) and (M, 4) arrays of (x_min, y_min, x_max, y_max)

    Same conventions as box_iou.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def oks(pred: Pose, gt: Pose, gt_area: float, kappas: Sequence[float]) -> float:
    """
    Object keypoint similarity between a prediction and a ground truth

    OKS = sum_j [v_j>0] exp(-d_j^2 / (2 * area * kappa_j^2)) / sum_j [v_j>0]

    Args:
        pred: Predicted pose (visibility ignored)
        gt: Ground-truth pose; only its labeled joints count
        gt_area: Ground-truth scale in pixels^2, > 0
        kappas: Per-keypoint constants

    Returns:
        Similarity in [0, 1]
    """
    mask = gt.labeled
    if not mask.any():
        raise UndecodableInstanceError("ground truth has no labeled keypoint")
    if gt_area <= 0:
        raise ValueError(f"gt_area must be > 0, got {gt_area}")
    kappas = np.asarray(kappas, dtype=np.float64)
    d2 = ((pred.xy - gt.xy) ** 2).sum(axis=1)
    e = d2 / (2.0 * gt_area * kappas ** 2)
    return float(np.exp(-e[mask]).mean())


def keypoint_nms(dets: Sequence[Detection], iou_threshold: float = 0.6) -> List[Detection]:
    """
    Greedy NMS on the detections' minimum enclosing rectangles

    Detections are visited by descending score (equal scores: lower input
    index first); one is suppressed when its IoU with any kept detection
    is >= iou_threshold.

    Args:
        dets: Detections
        iou_threshold: Suppression threshold

    Returns:
        Survivors, sorted by descending score
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].rect.as_tuple() for i in order])
    ious = box_iou_matrix(boxes, boxes)

    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(order[rank])
        suppressed |= ious[rank] >= iou_threshold
    return [dets[i] for i in keep]
