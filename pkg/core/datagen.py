"""
Datasets: seeded synthetic stick-figure scenes, COCO keypoint ingestion and
export, training augmentation, and the batch collator
"""

import colorsys
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from .assignment import InstanceAnnotation, TargetBatch, build_targets, collate_targets
from .errors import AnnotationParseError
from .evalkit import GroundTruth
from .geometry import Box, Pose
from .skeleton import Skeleton, flip_permutation, get_skeleton

logger = logging.getLogger(__name__)

PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# Unit-height templates: x from the body axis (person's left is +x), y from the top
_TEMPLATES = {
    17: np.array([
        [0.00, 0.06], [0.03, 0.04], [-0.03, 0.04], [0.06, 0.06], [-0.06, 0.06],
        [0.12, 0.20], [-0.12, 0.20], [0.16, 0.36], [-0.16, 0.36],
        [0.18, 0.50], [-0.18, 0.50], [0.08, 0.52], [-0.08, 0.52],
        [0.09, 0.74], [-0.09, 0.74], [0.10, 0.96], [-0.10, 0.96],
    ]),
    5: np.array([
        [0.00, 0.08], [0.20, 0.50], [-0.20, 0.50], [0.10, 0.96], [-0.10, 0.96],
    ]),
}

BACKGROUND_RANGE = (16, 64)
MARGIN = 2


@dataclass
class PoseSample:
    """One image with its people"""
    image_id: int
    image: np.ndarray  # (H, W, 3) uint8 RGB
    instances: List[InstanceAnnotation]
    ignored: List[GroundTruth] = field(default_factory=list)

    def ground_truths(self) -> List[GroundTruth]:
        return [GroundTruth.from_instance(inst) for inst in self.instances] + list(self.ignored)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def joint_colors(num_keypoints: int) -> List[Tuple[int, int, int]]:
    """Distinct, evenly spaced hues, one per keypoint category"""
    return [
        tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(j / num_keypoints, 0.9, 1.0))
        for j in range(num_keypoints)
    ]


def _tree_order(skeleton: Skeleton):
    """(child, parent) pairs in breadth-first order from keypoint 0"""
    adjacency = {j: [] for j in range(skeleton.num_keypoints)}
    for a, b in skeleton.edges:
        adjacency[a].append(b)
        adjacency[b].append(a)
    seen, queue, pairs = {0}, [0], []
    while queue:
        parent = queue.pop(0)
        for child in sorted(adjacency[parent]):
            if child not in seen:
                seen.add(child)
                queue.append(child)
                pairs.append((child, parent))
    return pairs


def _random_figure(rng: np.random.Generator, skeleton: Skeleton) -> np.ndarray:
    """Unit-height figure with joint angles jittered along the limb tree"""
    template = _TEMPLATES[skeleton.num_keypoints]
    pts = template.copy()
    for child, parent in _tree_order(skeleton):
        angle = rng.normal(0.0, 0.15)
        stretch = 1.0 + rng.uniform(-0.1, 0.1)
        c, s = np.cos(angle), np.sin(angle)
        bone = (template[child] - template[parent]) * stretch
        pts[child] = pts[parent] + np.array([c * bone[0] - s * bone[1], s * bone[0] + c * bone[1]])
    return pts


def generate_scene(cfg, index: int) -> Tuple[np.ndarray, List[InstanceAnnotation]]:
    """
    Render one synthetic multi-person scene

    Deterministic in (cfg.seed, index). Limbs are strokes, joints are disks
    colored per keypoint category. Occluded joints are labeled v=1 and not
    drawn; every person keeps at least one v=2 joint. All keypoints lie
    inside the image.

    Args:
        cfg: SceneConfig
        index: Scene index

    Returns:
        (image (S, S, 3) uint8, annotations)
    """
    rng = np.random.default_rng([cfg.seed, index])
    skeleton = get_skeleton(cfg.num_keypoints, synthetic=True)
    size = cfg.image_size
    colors = joint_colors(skeleton.num_keypoints)

    background = tuple(int(v) for v in rng.integers(*BACKGROUND_RANGE, size=3))
    canvas = Image.new("RGB", (size, size), background)
    draw = ImageDraw.Draw(canvas)

    num_persons = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
    instances = []
    for _ in range(num_persons):
        height = rng.uniform(cfg.min_height, cfg.max_height)
        pts = _random_figure(rng, skeleton) * height
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = hi - lo
        limit = size - 1 - 2 * MARGIN
        if span.max() > limit:
            pts *= limit / span.max()
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            span = hi - lo
        offset = np.array([
            rng.uniform(MARGIN - lo[0], size - 1 - MARGIN - hi[0]),
            rng.uniform(MARGIN - lo[1], size - 1 - MARGIN - hi[1]),
        ])
        xy = pts + offset

        occluded = rng.random(skeleton.num_keypoints) < cfg.occlusion_prob
        if occluded.all():
            occluded[int(rng.integers(skeleton.num_keypoints))] = False
        vis = np.where(occluded, 1.0, 2.0)

        limb_color = tuple(int(v) for v in rng.integers(120, 220, size=3))
        limb_width = max(2, int(round(height / 40)))
        radius = max(2.0, height / 50)
        for a, b in skeleton.edges:
            if vis[a] == 2 and vis[b] == 2:
                draw.line([tuple(xy[a]), tuple(xy[b])], fill=limb_color, width=limb_width)
        for j in range(skeleton.num_keypoints):
            if vis[j] == 2:
                x, y = xy[j]
                draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=colors[j])

        instances.append(InstanceAnnotation.from_pose(Pose(np.column_stack([xy, vis]))))

    return np.asarray(canvas, dtype=np.uint8).copy(), instances


class SyntheticPoseDataset(Dataset):
    """
    Synthetic scenes indexed 0..num_images-1

    Args:
        cfg: SceneConfig
        num_images: Dataset length
        seed_offset: Added to cfg.seed (validation splits use a distinct offset)
    """

    def __init__(self, cfg, num_images: int, seed_offset: int = 0):
        self.cfg = cfg
        self.num_images = num_images
        self.seed_offset = seed_offset
        self.skeleton = get_skeleton(cfg.num_keypoints, synthetic=True)

    def __len__(self):
        return self.num_images

    def __getitem__(self, index: int) -> PoseSample:
        if not 0 <= index < self.num_images:
            raise IndexError(index)
        scene_cfg = self.cfg
        if self.seed_offset:
            scene_cfg = replace(self.cfg, seed=self.cfg.seed + self.seed_offset)
        image, instances = generate_scene(scene_cfg, index)
        return PoseSample(index, image, instances)


# ---------------------------------------------------------------------------
# COCO format
# ---------------------------------------------------------------------------

@dataclass
class _CocoImage:
    image_id: int
    file_name: str
    instances: List[InstanceAnnotation]
    ignored: List[GroundTruth]


class CocoPoseDataset(Dataset):
    """Images of a COCO keypoint annotation file; pixels load lazily"""

    def __init__(self, records: List[_CocoImage], image_root, skeleton: Skeleton):
        self.records = records
        self.image_root = Path(image_root)
        self.skeleton = skeleton

    def __len__(self):
        return len(self.records)

    def __getitem__(self, index: int) -> PoseSample:
        rec = self.records[index]
        image = load_image(self.image_root / rec.file_name)
        return PoseSample(rec.image_id, image, list(rec.instances), list(rec.ignored))

    def ground_truths(self):
        """image_id -> ground truths, without reading pixels"""
        return {
            rec.image_id: [GroundTruth.from_instance(i) for i in rec.instances] + list(rec.ignored)
            for rec in self.records
        }


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def _parse_annotation(ann: dict, num_keypoints: Optional[int]):
    ann_id = ann.get("id", "?")
    try:
        image_id = int(ann["image_id"])
        flat = [float(v) for v in ann["keypoints"]]
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationParseError(ann_id, f"missing or invalid field ({e})")
    if len(flat) % 3 or not flat:
        raise AnnotationParseError(ann_id, f"keypoints length {len(flat)} is not a positive multiple of 3")
    if num_keypoints is not None and len(flat) != 3 * num_keypoints:
        raise AnnotationParseError(ann_id, f"expected {num_keypoints} keypoints, got {len(flat) // 3}")
    pose = Pose.from_flat(flat)
    if np.any(~np.isin(pose.visibility, (0, 1, 2))):
        raise AnnotationParseError(ann_id, "visibility flags must be 0, 1 or 2")
    crowd = bool(ann.get("iscrowd", 0))
    area = float(ann.get("area", 0.0))
    bbox = ann.get("bbox")
    return image_id, pose, crowd, area, bbox


def load_coco(ann_path, image_root, num_keypoints: Optional[int] = None) -> CocoPoseDataset:
    """
    Read a COCO keypoint annotation file

    Persons with at least one labeled keypoint become training instances;
    crowd regions and persons without keypoints are kept as ignored ground
    truth for evaluation.

    Args:
        ann_path: Annotation JSON
        image_root: Directory holding the image files
        num_keypoints: Expected K, checked per record when given

    Returns:
        CocoPoseDataset with one entry per image
    """
    try:
        data = json.loads(Path(ann_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise AnnotationParseError(str(ann_path), f"cannot read annotation file: {e}")

    records = {}
    for img in data.get("images", []):
        try:
            records[int(img["id"])] = _CocoImage(int(img["id"]), str(img["file_name"]), [], [])
        except (KeyError, TypeError, ValueError) as e:
            raise AnnotationParseError(img.get("id", "?") if isinstance(img, dict) else "?", f"bad image record ({e})")

    skipped = 0
    for ann in data.get("annotations", []):
        if ann.get("category_id", 1) != 1:
            continue
        image_id, pose, crowd, area, bbox = _parse_annotation(ann, num_keypoints)
        if image_id not in records:
            raise AnnotationParseError(ann.get("id", "?"), f"unknown image_id {image_id}")
        rec = records[image_id]
        if crowd or pose.num_labeled == 0:
            if bbox is None or len(bbox) != 4:
                raise AnnotationParseError(ann.get("id", "?"), "ignored person needs a bbox")
            box = Box.from_xywh(*bbox)
            rec.ignored.append(GroundTruth(pose, area if area > 0 else max(box.area, 1.0), box, ignore=True, crowd=crowd))
            skipped += 1
            continue
        rec.instances.append(InstanceAnnotation.from_pose(pose, area if area > 0 else None))

    if skipped:
        logger.info(f"{skipped} crowd / keypoint-free person(s) kept as ignore regions")

    if num_keypoints is None:
        sizes = {inst.pose.num_keypoints for r in records.values() for inst in r.instances}
        num_keypoints = sizes.pop() if len(sizes) == 1 else 17
    skeleton = get_skeleton(num_keypoints)
    return CocoPoseDataset([records[k] for k in sorted(records)], image_root, skeleton)


def export_coco(dataset, ann_path, image_dir, skeleton: Optional[Skeleton] = None):
    """
    Write a dataset as PNG images plus a COCO keypoint annotation file

    Args:
        dataset: Any dataset of PoseSample
        ann_path: Output JSON path
        image_dir: Output image directory
        skeleton: Keypoint names/limbs for the category record
    """
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    skeleton = skeleton or getattr(dataset, "skeleton", None)

    images, annotations = [], []
    ann_id = 1
    for i in range(len(dataset)):
        sample = dataset[i]
        file_name = f"{sample.image_id:06d}.png"
        Image.fromarray(sample.image).save(image_dir / file_name)
        h, w = sample.image.shape[:2]
        images.append({"id": sample.image_id, "file_name": file_name, "width": w, "height": h})
        for inst in sample.instances:
            annotations.append({
                "id": ann_id,
                "image_id": sample.image_id,
                "category_id": 1,
                "keypoints": inst.pose.to_flat(),
                "num_keypoints": inst.pose.num_labeled,
                "area": inst.area,
                "bbox": inst.pseudo_box.to_xywh(),
                "iscrowd": 0,
            })
            ann_id += 1
        for gt in sample.ignored:
            annotations.append({
                "id": ann_id,
                "image_id": sample.image_id,
                "category_id": 1,
                "keypoints": gt.pose.to_flat(),
                "num_keypoints": gt.pose.num_labeled,
                "area": gt.area,
                "bbox": gt.box.to_xywh(),
                "iscrowd": int(gt.crowd),
            })
            ann_id += 1

    category = {"id": 1, "name": "person", "supercategory": "person"}
    if skeleton is not None:
        category["keypoints"] = list(skeleton.keypoint_names)
        category["skeleton"] = [[a + 1, b + 1] for a, b in skeleton.edges]

    Path(ann_path).parent.mkdir(parents=True, exist_ok=True)
    Path(ann_path).write_text(
        json.dumps({"images": images, "annotations": annotations, "categories": [category]}),
        encoding="utf-8",
    )
    logger.info(f"Exported {len(images)} image(s), {len(annotations)} annotation(s) to {ann_path}")


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------

def resize_image(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape[:2]
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    if size == (w, h):
        return image
    return np.asarray(Image.fromarray(image).resize(size, Image.BILINEAR), dtype=np.uint8)


def scale_instance(inst: InstanceAnnotation, sx: float, sy: Optional[float] = None) -> InstanceAnnotation:
    sy = sx if sy is None else sy
    kps = inst.pose.keypoints.copy()
    kps[:, 0] *= sx
    kps[:, 1] *= sy
    return InstanceAnnotation.from_pose(Pose(kps), inst.area * sx * sy)


def flip_instance(inst: InstanceAnnotation, width: int, permutation: Sequence[int]) -> InstanceAnnotation:
    """Mirror x as W - x and swap left/right keypoints"""
    kps = inst.pose.keypoints[list(permutation)].copy()
    kps[:, 0] = width - kps[:, 0]
    return InstanceAnnotation.from_pose(Pose(kps), inst.area)


def clamp_instance(inst: InstanceAnnotation, width: int, height: int) -> InstanceAnnotation:
    """Clip keypoints into [0, W) x [0, H)"""
    kps = inst.pose.keypoints.copy()
    kps[:, 0] = np.clip(kps[:, 0], 0.0, np.nextafter(float(width), 0.0))
    kps[:, 1] = np.clip(kps[:, 1], 0.0, np.nextafter(float(height), 0.0))
    return InstanceAnnotation.from_pose(Pose(kps), inst.area)


def augment(
    image: np.ndarray,
    instances: Sequence[InstanceAnnotation],
    rng: np.random.Generator,
    flip_prob: float,
    short_side_range: Tuple[int, int],
    max_long_side: int,
    flip_perm: Sequence[int],
):
    """
    Random short-side resize (aspect preserved, long side capped) and
    horizontal flip; nothing else

    Args:
        image: (H, W, 3) uint8
        instances: Annotations of the image
        rng: Generator seeded per (epoch, index)
        flip_prob: Flip probability
        short_side_range: Inclusive (min, max) target short side
        max_long_side: Cap on the long side after resizing
        flip_perm: Left/right swap permutation

    Returns:
        (image, instances)
    """
    h, w = image.shape[:2]
    target = int(rng.integers(short_side_range[0], short_side_range[1] + 1))
    scale = target / min(h, w)
    if max(h, w) * scale > max_long_side:
        scale = max_long_side / max(h, w)
    if scale != 1.0:
        image = resize_image(image, scale)
        # rounded output size sets the per-axis scale
        sx, sy = image.shape[1] / w, image.shape[0] / h
        instances = [scale_instance(inst, sx, sy) for inst in instances]

    if rng.random() < flip_prob:
        width = image.shape[1]
        image = image[:, ::-1].copy()
        instances = [flip_instance(inst, width, flip_perm) for inst in instances]
    out_h, out_w = image.shape[:2]
    instances = [clamp_instance(inst, out_w, out_h) for inst in instances]
    return image, list(instances)


def pad_to_multiple(image: np.ndarray, multiple: int = 128) -> np.ndarray:
    """Zero-pad bottom/right so both sides are multiples; coordinates are unchanged"""
    h, w = image.shape[:2]
    ph = -(-h // multiple) * multiple
    pw = -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return image
    out = np.zeros((ph, pw) + image.shape[2:], dtype=image.dtype)
    out[:h, :w] = image
    return out


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized (3, H, W) float32"""
    x = (image.astype(np.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))


class TrainingSampleSet(Dataset):
    """
    Wraps a PoseSample dataset with augmentation seeded per (seed, epoch, index)

    Args:
        dataset: Source dataset
        data_cfg: DataConfig
        skeleton: Skeleton providing the flip table
        seed: Base seed
        augment_enabled: Skip augmentation when False
    """

    def __init__(self, dataset, data_cfg, skeleton: Skeleton, seed: int = 0, augment_enabled: bool = True):
        self.dataset = dataset
        self.data_cfg = data_cfg
        self.flip_perm = flip_permutation(skeleton)
        self.seed = seed
        self.augment_enabled = augment_enabled
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, index: int):
        sample = self.dataset[index]
        image, instances = sample.image, sample.instances
        if self.augment_enabled:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            cfg = self.data_cfg
            image, instances = augment(
                image, instances, rng, cfg.flip_prob,
                (cfg.short_side_min, cfg.short_side_max), cfg.max_long_side, self.flip_perm,
            )
        return sample.image_id, image, instances


class TargetCollator:
    """
    Pads a batch to a common size (multiple of 128) and builds its targets

    Returns (images (N, 3, H, W), TargetBatch, image ids).
    """

    def __init__(self, model_cfg, assign_cfg, multiple: int = 128):
        self.model_cfg = model_cfg
        self.assign_cfg = assign_cfg
        self.multiple = multiple

    def __call__(self, batch):
        height = max(img.shape[0] for _, img, _ in batch)
        width = max(img.shape[1] for _, img, _ in batch)
        height = -(-height // self.multiple) * self.multiple
        width = -(-width // self.multiple) * self.multiple

        images, targets, ids = [], [], []
        for image_id, img, instances in batch:
            canvas = np.zeros((height, width, 3), dtype=np.uint8)
            canvas[:img.shape[0], :img.shape[1]] = img
            images.append(image_to_tensor(canvas))
            targets.append(build_targets(instances, (height, width), self.model_cfg, self.assign_cfg))
            ids.append(image_id)
        target_batch: TargetBatch = collate_targets(targets)
        return torch.stack(images), target_batch, ids
