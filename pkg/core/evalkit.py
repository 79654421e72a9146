"""
OKS-based keypoint evaluation with COCO semantics

Per image: detections sorted by score (top 20 kept), greedy one-to-one
matching at each OKS threshold, ignored ground truths (crowd, no labeled
keypoint, outside the area split) absorb matches without counting. Across
images: 101-point interpolated precision per threshold, averaged.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import EvaluationError
from .geometry import Box, Detection, Pose, oks

logger = logging.getLogger(__name__)

OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 20

# (lower, upper]; "all" also takes area 0
AREA_RANGES = {
    "all": (-1.0, float("inf")),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


@dataclass(frozen=True)
class GroundTruth:
    """An evaluation ground truth; ignored ones may match but never count"""
    pose: Pose
    area: float
    box: Box
    ignore: bool = False
    crowd: bool = False

    @classmethod
    def from_instance(cls, instance) -> "GroundTruth":
        return cls(instance.pose, instance.area, instance.pseudo_box)


@dataclass
class ImageEval:
    """Matching outcome of one image at every threshold"""
    scores: np.ndarray  # (D,)
    matched: np.ndarray  # (T, D) bool
    ignored: np.ndarray  # (T, D) bool
    num_gt: int  # non-ignored ground truths


@dataclass
class EvalResult:
    """Keypoint AP / AR; -1 marks a split without ground truth"""
    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float
    ar: float
    ar50: float
    ar75: float
    ar_m: float
    ar_l: float

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


def _similarity(det: Detection, gt: GroundTruth, kappas: np.ndarray) -> float:
    """OKS; ground truths without labeled joints use distance to an extended box"""
    if gt.pose.num_labeled > 0:
        return oks(det.pose, gt.pose, max(gt.area, np.spacing(1)), kappas)
    b = gt.box
    x0, x1 = b.x_min - b.width, b.x_max + b.width
    y0, y1 = b.y_min - b.height, b.y_max + b.height
    xd, yd = det.pose.xy[:, 0], det.pose.xy[:, 1]
    dx = np.maximum(0, x0 - xd) + np.maximum(0, xd - x1)
    dy = np.maximum(0, y0 - yd) + np.maximum(0, yd - y1)
    e = (dx ** 2 + dy ** 2) / (kappas ** 2) / (gt.area + np.spacing(1)) / 2
    return float(np.exp(-e).mean())


def _match(sim: np.ndarray, gt_ignore: np.ndarray, gt_crowd: np.ndarray, threshold: float):
    """
    Greedy matching of score-sorted detections against GTs (non-ignored first)

    Returns:
        (det_gt index or -1, det_ignored flags)
    """
    num_det, num_gt = sim.shape
    det_gt = np.full(num_det, -1, dtype=np.int64)
    det_ignored = np.zeros(num_det, dtype=bool)
    gt_taken = np.zeros(num_gt, dtype=bool)
    for d in range(num_det):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in range(num_gt):
            if gt_taken[g] and not gt_crowd[g]:
                continue
            # once a real GT is matched, stop at the ignored ones
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if sim[d, g] < best:
                continue
            best = sim[d, g]
            m = g
        if m == -1:
            continue
        det_gt[d] = m
        det_ignored[d] = gt_ignore[m]
        # crowd regions stay open and can absorb several detections
        gt_taken[m] = True
    return det_gt, det_ignored


def greedy_match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    kappas: Sequence[float],
    oks_threshold: float = 0.5,
):
    """
    One-to-one matching at a single OKS threshold

    Args:
        dets: Detections of one image
        gts: Ground truths of the same image
        kappas: Per-keypoint OKS constants
        oks_threshold: Minimum OKS for a match

    Returns:
        (tp flags per detection in descending-score order, matched GT index or -1)
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    kappas = np.asarray(kappas, dtype=np.float64)
    gt_order = sorted(range(len(gts)), key=lambda g: gts[g].ignore)
    sim = np.array([[_similarity(d, gts[g], kappas) for g in gt_order] for d in dets]).reshape(len(dets), len(gts))
    ignore = np.array([gts[g].ignore for g in gt_order], dtype=bool)
    crowd = np.array([gts[g].crowd for g in gt_order], dtype=bool)
    det_gt, det_ignored = _match(sim, ignore, crowd, oks_threshold)
    tp = (det_gt >= 0) & ~det_ignored
    matched = np.array([gt_order[m] if m >= 0 else -1 for m in det_gt], dtype=np.int64)
    return tp, matched


def evaluate_image(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    kappas: Sequence[float],
    area_range=AREA_RANGES["all"],
    thresholds: Sequence[float] = OKS_THRESHOLDS,
    max_dets: int = MAX_DETECTIONS,
) -> ImageEval:
    """Match one image at every threshold for one area split"""
    kappas = np.asarray(kappas, dtype=np.float64)
    lo, hi = area_range

    def outside(area):
        return not (lo < area <= hi)

    gt_ignore_all = np.array([g.ignore or outside(g.area) for g in gts], dtype=bool)
    gt_order = np.argsort(gt_ignore_all, kind="mergesort")
    gts = [gts[g] for g in gt_order]
    gt_ignore = gt_ignore_all[gt_order]
    gt_crowd = np.array([g.crowd for g in gts], dtype=bool)

    det_order = sorted(range(len(dets)), key=lambda i: -dets[i].score)[:max_dets]
    dets = [dets[i] for i in det_order]
    scores = np.array([d.score for d in dets], dtype=np.float64)

    sim = np.zeros((len(dets), len(gts)))
    for d, det in enumerate(dets):
        for g, gt in enumerate(gts):
            sim[d, g] = _similarity(det, gt, kappas)

    matched = np.zeros((len(thresholds), len(dets)), dtype=bool)
    ignored = np.zeros((len(thresholds), len(dets)), dtype=bool)
    det_outside = np.array([outside(d.rect.area) for d in dets], dtype=bool)
    for t, thr in enumerate(thresholds):
        det_gt, det_ignored = _match(sim, gt_ignore, gt_crowd, thr)
        matched[t] = det_gt >= 0
        ignored[t] = det_ignored | (~matched[t] & det_outside)
    return ImageEval(scores, matched, ignored, int((~gt_ignore).sum()))


def _accumulate(evals: Sequence[ImageEval], num_thresholds: int):
    """Interpolated precision (T, R) and recall (T,), -1 when no ground truth"""
    precision = -np.ones((num_thresholds, len(RECALL_THRESHOLDS)))
    recall = -np.ones(num_thresholds)
    num_gt = sum(e.num_gt for e in evals)
    if num_gt == 0:
        return precision, recall

    scores = np.concatenate([e.scores for e in evals]) if evals else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([e.matched for e in evals], axis=1)[:, order]
    ignored = np.concatenate([e.ignored for e in evals], axis=1)[:, order]

    tps = np.cumsum(matched & ~ignored, axis=1).astype(np.float64)
    fps = np.cumsum(~matched & ~ignored, axis=1).astype(np.float64)
    for t in range(num_thresholds):
        tp, fp = tps[t], fps[t]
        q = np.zeros(len(RECALL_THRESHOLDS))
        if len(tp) == 0:
            recall[t] = 0.0
            precision[t] = q
            continue
        rc = tp / num_gt
        pr = tp / np.maximum(fp + tp, np.spacing(1))
        recall[t] = rc[-1]
        # precision envelope, non-increasing in recall
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        valid = inds < len(pr)
        q[valid] = pr[inds[valid]]
        precision[t] = q
    return precision, recall


def _mean_valid(values: np.ndarray) -> float:
    valid = values[values > -1]
    return float(valid.mean()) if valid.size else -1.0


def compute_ap(per_split: Mapping[str, Sequence[ImageEval]], thresholds: Sequence[float] = OKS_THRESHOLDS) -> EvalResult:
    """
    AP/AR over OKS thresholds from per-image evaluations

    Args:
        per_split: "all" / "medium" / "large" -> per-image ImageEval
        thresholds: OKS thresholds the evaluations were matched at

    Returns:
        EvalResult

    Raises:
        EvaluationError: no ground truth at all
    """
    thresholds = np.asarray(thresholds)
    if sum(e.num_gt for e in per_split["all"]) == 0:
        raise EvaluationError("no ground-truth person to evaluate against")

    def at(target):
        hits = np.flatnonzero(np.isclose(thresholds, target))
        return int(hits[0]) if hits.size else None

    results = {}
    for split, evals in per_split.items():
        precision, recall = _accumulate(evals, len(thresholds))
        results[split] = (precision, recall)

    prec_all, rec_all = results["all"]
    i50, i75 = at(0.5), at(0.75)
    return EvalResult(
        ap=_mean_valid(prec_all),
        ap50=_mean_valid(prec_all[i50]) if i50 is not None else -1.0,
        ap75=_mean_valid(prec_all[i75]) if i75 is not None else -1.0,
        ap_m=_mean_valid(results["medium"][0]) if "medium" in results else -1.0,
        ap_l=_mean_valid(results["large"][0]) if "large" in results else -1.0,
        ar=_mean_valid(rec_all),
        ar50=_mean_valid(rec_all[i50:i50 + 1]) if i50 is not None else -1.0,
        ar75=_mean_valid(rec_all[i75:i75 + 1]) if i75 is not None else -1.0,
        ar_m=_mean_valid(results["medium"][1]) if "medium" in results else -1.0,
        ar_l=_mean_valid(results["large"][1]) if "large" in results else -1.0,
    )


def evaluate(
    detections: Mapping[int, Sequence[Detection]],
    ground_truths: Mapping[int, Sequence[GroundTruth]],
    kappas: Sequence[float],
    thresholds: Sequence[float] = OKS_THRESHOLDS,
    max_dets: int = MAX_DETECTIONS,
) -> EvalResult:
    """
    Evaluate detections keyed by image id against ground truths

    Images are taken from ground_truths; detections on unknown images are
    dropped with a warning.
    """
    unknown = set(detections) - set(ground_truths)
    if unknown:
        logger.warning(f"Dropping detections for {len(unknown)} image(s) without ground truth")

    per_split = {}
    for split, area_range in AREA_RANGES.items():
        per_split[split] = [
            evaluate_image(detections.get(image_id, []), gts, kappas, area_range, thresholds, max_dets)
            for image_id, gts in sorted(ground_truths.items())
        ]
    return compute_ap(per_split, thresholds)


def load_results(path, num_keypoints: Optional[int] = None) -> Dict[int, List[Detection]]:
    """
    Read a COCO keypoint results file

    Args:
        path: JSON list of {image_id, category_id, keypoints, score}
        num_keypoints: Expected K, checked when given

    Returns:
        image_id -> detections
    """
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise EvaluationError(f"cannot read results file {path}: {e}")
    if not isinstance(records, list):
        raise EvaluationError(f"{path}: results must be a JSON list")

    out: Dict[int, List[Detection]] = {}
    for n, rec in enumerate(records):
        try:
            flat = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 3)
            score = float(rec["score"])
            image_id = int(rec["image_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise EvaluationError(f"{path}: malformed result record #{n}: {e}")
        if num_keypoints is not None and flat.shape[0] != num_keypoints:
            raise EvaluationError(f"{path}: record #{n} has {flat.shape[0]} keypoints, expected {num_keypoints}")
        kps = flat.copy()
        kps[:, 2] = 2.0
        det = Detection.from_pose(min(max(score, 0.0), 1.0), Pose(kps), flat[:, 2].copy())
        out.setdefault(image_id, []).append(det)
    return out


def format_report(result: EvalResult, title: str = "keypoints") -> str:
    """COCO-style summary text"""
    rows = [
        ("Average Precision", "AP", "0.50:0.95", "all", result.ap),
        ("Average Precision", "AP", "0.50", "all", result.ap50),
        ("Average Precision", "AP", "0.75", "all", result.ap75),
        ("Average Precision", "AP", "0.50:0.95", "medium", result.ap_m),
        ("Average Precision", "AP", "0.50:0.95", "large", result.ap_l),
        ("Average Recall", "AR", "0.50:0.95", "all", result.ar),
        ("Average Recall", "AR", "0.50", "all", result.ar50),
        ("Average Recall", "AR", "0.75", "all", result.ar75),
        ("Average Recall", "AR", "0.50:0.95", "medium", result.ar_m),
        ("Average Recall", "AR", "0.50:0.95", "large", result.ar_l),
    ]
    lines = [f"Evaluation ({title}, OKS)"]
    for name, short, iou, area, value in rows:
        lines.append(
            f" {name:<18} ({short}) @[ OKS={iou:<9} | area={area:>6} | maxDets={MAX_DETECTIONS:>3} ] = {value:0.3f}"
        )
    return "\n".join(lines) + "\n"
