"""
Keypoint skeleton definitions: names, limbs, left/right swap tables and OKS constants
"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigError


# COCO per-keypoint sigmas; the OKS constant used here is kappa = 2 * sigma
COCO_SIGMAS = np.array([
    0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62,
    0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89,
]) / 10.0
COCO_KAPPAS = 2.0 * COCO_SIGMAS

SYNTHETIC_KAPPA = 0.08


@dataclass(frozen=True)
class Skeleton:
    """A keypoint layout"""
    name: str
    keypoint_names: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]
    flip_pairs: Tuple[Tuple[int, int], ...]
    kappas: Tuple[float, ...]
    groups: Tuple[str, ...]  # "center" | "left" | "right"

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    def index(self, name: str) -> int:
        return self.keypoint_names.index(name)


def _groups(names) -> Tuple[str, ...]:
    return tuple(
        "left" if n.startswith("left") else "right" if n.startswith("right") else "center"
        for n in names
    )


_COCO_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

COCO_SKELETON = Skeleton(
    name="coco_person",
    keypoint_names=_COCO_NAMES,
    edges=(
        (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
        (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
        (1, 3), (2, 4), (3, 5), (4, 6),
    ),
    flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)),
    kappas=tuple(float(k) for k in COCO_KAPPAS),
    groups=_groups(_COCO_NAMES),
)

_MINI_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")

# Reduced skeleton for fast experiments
MINI_SKELETON = Skeleton(
    name="mini_person",
    keypoint_names=_MINI_NAMES,
    edges=((0, 1), (0, 2), (0, 3), (0, 4)),
    flip_pairs=((1, 2), (3, 4)),
    kappas=(SYNTHETIC_KAPPA,) * len(_MINI_NAMES),
    groups=_groups(_MINI_NAMES),
)

SKELETONS: Dict[int, Skeleton] = {
    COCO_SKELETON.num_keypoints: COCO_SKELETON,
    MINI_SKELETON.num_keypoints: MINI_SKELETON,
}


def get_skeleton(num_keypoints: int, synthetic: bool = False) -> Skeleton:
    """
    Look up the skeleton for a keypoint count

    Args:
        num_keypoints: K
        synthetic: Use the uniform synthetic OKS constant instead of the COCO ones

    Returns:
        The matching Skeleton
    """
    if num_keypoints not in SKELETONS:
        raise ConfigError(f"No skeleton defined for K={num_keypoints} (known: {sorted(SKELETONS)})")
    skeleton = SKELETONS[num_keypoints]
    if synthetic and skeleton.kappas != (SYNTHETIC_KAPPA,) * num_keypoints:
        skeleton = Skeleton(
            name=skeleton.name,
            keypoint_names=skeleton.keypoint_names,
            edges=skeleton.edges,
            flip_pairs=skeleton.flip_pairs,
            kappas=(SYNTHETIC_KAPPA,) * num_keypoints,
            groups=skeleton.groups,
        )
    return skeleton


def flip_permutation(skeleton: Skeleton) -> List[int]:
    """Index permutation that swaps left and right keypoints"""
    perm = list(range(skeleton.num_keypoints))
    for a, b in skeleton.flip_pairs:
        perm[a], perm[b] = b, a
    return perm
