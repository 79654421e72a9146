"""
Configuration management for InsPose

Settings come from (lowest to highest precedence): the dataclass defaults
below, a flat key-value config file with dotted section keys, and
command-line flags of the same dotted name. Environment variables (loaded
from .env by the entry point) choose the device, output root and log level.

Example config file:

    # desk-scale run
    model.kp_depth = 3
    model.res_ratio = 1/8
    train.decay_epochs = 45, 55
"""

import os
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, get_type_hints

from core.errors import ConfigError


# Base paths
BASE_DIR = Path(__file__).parent
CONFIGS_DIR = BASE_DIR / "configs"

ALLOWED_RES_RATIOS = (1 / 16, 1 / 8, 1 / 4, 1 / 2)


@dataclass
class ModelConfig:
    """Network shape and ablation toggles"""
    num_keypoints: int = 17
    kp_hidden: int = 8
    kp_depth: int = 3
    kp_channels: int = 8
    res_ratio: float = 0.125
    rel_coord_scale: float = 16.0
    backbone_widths: Tuple[int, ...] = (32, 64, 128, 256)
    fpn_channels: int = 128
    head_channels: int = 128
    head_convs: int = 4
    branch_channels: int = 128
    heatmap_channels: int = 256
    prior_prob: float = 0.01
    controller_init: str = "normal"
    disk_offset: bool = True
    heatmap: bool = True

    @property
    def output_stride(self) -> int:
        """Stride of the KP-Net output plane in input pixels"""
        return int(round(1.0 / self.res_ratio))

    def validate(self):
        if self.kp_depth < 1:
            raise ConfigError(f"model.kp_depth must be >= 1, got {self.kp_depth}")
        if not any(abs(self.res_ratio - r) < 1e-9 for r in ALLOWED_RES_RATIOS):
            raise ConfigError(f"model.res_ratio must be one of 1/16, 1/8, 1/4, 1/2, got {self.res_ratio}")
        if self.num_keypoints < 1 or self.kp_hidden < 1 or self.kp_channels < 1:
            raise ConfigError("model.num_keypoints, kp_hidden and kp_channels must be positive")
        if len(self.backbone_widths) != 4:
            raise ConfigError("model.backbone_widths needs exactly 4 stage widths")
        if self.rel_coord_scale <= 0:
            raise ConfigError("model.rel_coord_scale must be > 0")
        if self.controller_init not in ("normal", "zero"):
            raise ConfigError(f"model.controller_init must be 'normal' or 'zero', got {self.controller_init!r}")


@dataclass
class AssignmentConfig:
    """Label assignment and target construction"""
    center_radius: float = 1.5
    disk_radius: float = 4.0
    heatmap_sigma: float = 2.0
    level_strides: Tuple[int, ...] = (8, 16, 32, 64, 128)
    scale_bounds: Tuple[float, ...] = (64.0, 128.0, 256.0, 512.0)

    def validate(self):
        if self.center_radius <= 0:
            raise ConfigError(f"assign.center_radius must be > 0, got {self.center_radius}")
        if self.disk_radius <= 0:
            raise ConfigError(f"assign.disk_radius must be > 0, got {self.disk_radius}")
        if self.heatmap_sigma <= 0:
            raise ConfigError("assign.heatmap_sigma must be > 0")
        if len(self.scale_bounds) != len(self.level_strides) - 1:
            raise ConfigError("assign.scale_bounds needs one boundary fewer than assign.level_strides")
        if list(self.scale_bounds) != sorted(self.scale_bounds):
            raise ConfigError("assign.scale_bounds must be increasing")


@dataclass
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    heatmap_alpha: float = 2.0
    heatmap_beta: float = 4.0
    weight_cls: float = 1.0
    weight_kpf: float = 1.0
    weight_do: float = 1.0
    weight_hm: float = 1.0

    def validate(self):
        pass


@dataclass
class InferenceConfig:
    """Inference pipeline constants"""
    score_threshold: float = 0.1
    pre_nms_top_n: int = 500
    nms_iou: float = 0.6
    max_detections: int = 100
    cell_center_fallback: bool = False
    test_short_side: int = 0
    kpnet_chunk: int = 64

    def validate(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError(f"infer.score_threshold must be in (0, 1), got {self.score_threshold}")
        if self.pre_nms_top_n < self.max_detections:
            raise ConfigError("infer.pre_nms_top_n must be >= infer.max_detections")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("infer.nms_iou must be in (0, 1]")


@dataclass
class SceneConfig:
    """Synthetic scene generator"""
    image_size: int = 256
    min_persons: int = 1
    max_persons: int = 4
    min_height: float = 64.0
    max_height: float = 192.0
    occlusion_prob: float = 0.1
    num_keypoints: int = 17
    seed: int = 0

    def validate(self):
        if not 1 <= self.min_persons <= self.max_persons:
            raise ConfigError("scene person range must satisfy 1 <= min_persons <= max_persons")
        if not 0 < self.min_height <= self.max_height < self.image_size:
            raise ConfigError("scene figure heights must satisfy 0 < min_height <= max_height < image_size")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ConfigError("scene.occlusion_prob must be in [0, 1)")


@dataclass
class DataConfig:
    """Dataset sources and augmentation"""
    source: str = "synthetic"
    train_images: int = 200
    val_images: int = 50
    val_seed: int = 1000
    coco_train_ann: str = ""
    coco_train_images: str = ""
    coco_val_ann: str = ""
    coco_val_images: str = ""
    flip_prob: float = 0.5
    short_side_min: int = 256
    short_side_max: int = 256
    max_long_side: int = 512

    def validate(self):
        if self.source not in ("synthetic", "coco"):
            raise ConfigError(f"data.source must be 'synthetic' or 'coco', got {self.source!r}")
        if self.source == "coco" and not self.coco_train_ann:
            raise ConfigError("data.coco_train_ann is required when data.source = coco")
        if not 0 < self.short_side_min <= self.short_side_max <= self.max_long_side:
            raise ConfigError("data short side range must satisfy 0 < min <= max <= max_long_side")


@dataclass
class TrainConfig:
    """SGD schedule"""
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 8
    epochs: int = 60
    decay_epochs: Tuple[int, ...] = (45, 55)
    warmup_iters: int = 100
    warmup_ratio: float = 0.001
    seed: int = 0
    log_every: int = 10
    out_dir: str = ""

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        decay = list(self.decay_epochs)
        if any(b <= a for a, b in zip(decay, decay[1:])):
            raise ConfigError("train.decay_epochs must be strictly increasing")
        if decay and decay[-1] >= self.epochs:
            raise ConfigError("train.decay_epochs must all be < train.epochs")
        if self.warmup_iters < 0 or not 0.0 < self.warmup_ratio <= 1.0:
            raise ConfigError("train.warmup_iters must be >= 0 and train.warmup_ratio in (0, 1]")


SECTIONS = {
    "model": ModelConfig,
    "assign": AssignmentConfig,
    "loss": LossConfig,
    "infer": InferenceConfig,
    "scene": SceneConfig,
    "data": DataConfig,
    "train": TrainConfig,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: str, target_type, key: str):
    """Convert a config-file string to the annotated field type"""
    text = value.strip()
    try:
        if target_type is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(Fraction(text)) if "/" in text else float(text)
        if target_type is str:
            return text.strip("\"'")
        # Tuple[int, ...] / Tuple[float, ...]
        item_type = target_type.__args__[0]
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_coerce(p, item_type, key) for p in parts)
    except (ValueError, ZeroDivisionError, AttributeError, IndexError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {getattr(target_type, '__name__', target_type)}")


def _format(value, target_type=None) -> str:
    """String form of a field value, written as its declared type"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        item_type = getattr(target_type, "__args__", (None,))[0]
        return ", ".join(_format(v, item_type) for v in value)
    if target_type is float:
        return str(float(value))
    return str(value)


def parse_override_args(tokens: Iterable[str]) -> Dict[str, str]:
    """
    Collect `--section.key value` / `--section.key=value` pairs

    Args:
        tokens: Leftover command-line arguments

    Returns:
        Mapping of dotted key to raw string value
    """
    tokens = list(tokens)
    overrides = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"Unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"Missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        overrides[key] = value
    return overrides


class Config:
    """InsPose configuration - loads from environment, config file and flags"""

    def __init__(self):
        # Environment
        self.DEVICE = os.getenv("INSPOSE_DEVICE", "")
        self.RUNS_DIR = Path(os.getenv("INSPOSE_RUNS_DIR", str(BASE_DIR / "runs")))
        self.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
        self.WORKERS = int(os.getenv("INSPOSE_WORKERS", "0"))

        # Enabled command modules
        self.ENABLED_MODULES = [
            "train",
            "evaluate",
            "infer",
            "visualize",
        ]

        self.model = ModelConfig()
        self.assign = AssignmentConfig()
        self.loss = LossConfig()
        self.infer = InferenceConfig()
        self.scene = SceneConfig()
        self.data = DataConfig()
        self.train = TrainConfig()

    def section(self, name: str):
        if name not in SECTIONS:
            raise ConfigError(f"Unknown config section: {name!r}")
        return getattr(self, name)

    def set(self, key: str, value: str):
        """
        Set one dotted key from its string form

        Args:
            key: Dotted key such as "model.kp_depth"
            value: Raw string value
        """
        if "." not in key:
            raise ConfigError(f"Config keys are dotted (section.name), got {key!r}")
        section_name, field_name = key.split(".", 1)
        section = self.section(section_name)
        hints = get_type_hints(type(section))
        if field_name not in hints:
            raise ConfigError(f"Unknown config key: {key}")
        setattr(section, field_name, _coerce(value, hints[field_name], key))

    def update(self, overrides: Dict[str, str]):
        for key, value in overrides.items():
            self.set(key, value)

    def load_file(self, path):
        """Apply a flat key-value config file on top of the current values"""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            try:
                self.set(key.strip(), value)
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}")

    def to_flat(self) -> Dict[str, str]:
        flat = {}
        for name in SECTIONS:
            section = getattr(self, name)
            hints = get_type_hints(type(section))
            for f in fields(section):
                flat[f"{name}.{f.name}"] = _format(getattr(section, f.name), hints[f.name])
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, str]) -> "Config":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def save(self, path):
        """Write the full configuration as a flat key-value file"""
        lines = [f"{key} = {value}" for key, value in self.to_flat().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def validate(self) -> "Config":
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.scene.num_keypoints != self.model.num_keypoints:
            raise ConfigError(
                f"scene.num_keypoints ({self.scene.num_keypoints}) must equal "
                f"model.num_keypoints ({self.model.num_keypoints})"
            )
        return self

    def resolve_device(self) -> str:
        """Device from INSPOSE_DEVICE, falling back to CUDA when present"""
        if self.DEVICE:
            return self.DEVICE
        import torch
        return "cuda" if torch.cuda.is_available() else "cpu"

    def run_dir(self, name: str = "") -> Path:
        out = Path(self.train.out_dir) if self.train.out_dir else self.RUNS_DIR / (name or "default")
        out.mkdir(parents=True, exist_ok=True)
        return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> Config:
    """
    Build a validated Config

    Args:
        path: Optional flat key-value config file
        overrides: Optional dotted-key overrides (command-line flags)

    Returns:
        Validated Config
    """
    cfg = Config()
    if path:
        cfg.load_file(path)
    if overrides:
        cfg.update(overrides)
    return cfg.validate()


# Global config instance
config = Config()
