"""
InsPose network

Small GroupNorm backbone and FPN (P3-P7), a classification/controller tower
shared across levels, and the stride-8 branches: keypoint features,
disk offsets and the training-only heatmap. The controller emits, per
location, the flat parameter vector of a KP-Net: a stack of 1x1 convolutions
run over the keypoint features concatenated with relative coordinates.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BranchPrunedError, CheckpointMismatchError, ConfigError, ParamLengthError, ShapeMismatchError

logger = logging.getLogger(__name__)

LEVEL_STRIDES = (8, 16, 32, 64, 128)


# ---------------------------------------------------------------------------
# KP-Net parameter layout
# ---------------------------------------------------------------------------

def kpnet_layer_shapes(cfg) -> List[Tuple[int, int]]:
    """(in_ch, out_ch) of each KP-Net layer; the first takes C_kp + 2 channels"""
    shapes = []
    in_ch = cfg.kp_channels + 2
    for layer in range(cfg.kp_depth):
        out_ch = cfg.num_keypoints if layer == cfg.kp_depth - 1 else cfg.kp_hidden
        shapes.append((in_ch, out_ch))
        in_ch = out_ch
    return shapes


def num_kpnet_params(cfg) -> int:
    """C_f = sum over layers of in*out + out"""
    return sum(i * o + o for i, o in kpnet_layer_shapes(cfg))


def split_kpnet_params(flat: torch.Tensor, cfg) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """
    Split flat parameter vectors into per-layer (weight, bias)

    Layers are contiguous in order, weights (out, in) row-major before biases.

    Args:
        flat: (C_f,) or (N, C_f)
        cfg: ModelConfig

    Returns:
        List of (weight (..., out, in), bias (..., out))
    """
    expected = num_kpnet_params(cfg)
    if flat.shape[-1] != expected:
        raise ParamLengthError(expected, flat.shape[-1])
    lead = flat.shape[:-1]
    layers = []
    pos = 0
    for in_ch, out_ch in kpnet_layer_shapes(cfg):
        weight = flat[..., pos:pos + in_ch * out_ch].reshape(*lead, out_ch, in_ch)
        pos += in_ch * out_ch
        bias = flat[..., pos:pos + out_ch]
        pos += out_ch
        layers.append((weight, bias))
    return layers


def apply_kpnet(features: torch.Tensor, params: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """
    Run KP-Nets as per-cell affine maps with ReLU between layers

    Args:
        features: (N, C_in, H, W) or (C_in, H, W)
        params: split_kpnet_params output with matching leading dim

    Returns:
        Logits (N, K, H, W), or (K, H, W) for unbatched input
    """
    unbatched = features.dim() == 3
    if unbatched:
        features = features.unsqueeze(0)
        params = [(w.unsqueeze(0), b.unsqueeze(0)) for w, b in params]

    n, c, h, w = features.shape
    x = features.reshape(n, c, h * w)
    for layer, (weight, bias) in enumerate(params):
        if weight.dim() != 3 or weight.shape[0] != n or weight.shape[2] != x.shape[1]:
            raise ShapeMismatchError(
                f"KP-Net layer {layer}: weight {tuple(weight.shape)} does not fit input {tuple(x.shape)}"
            )
        x = torch.bmm(weight, x) + bias.unsqueeze(-1)
        if layer < len(params) - 1:
            x = F.relu(x)
    out = x.reshape(n, -1, h, w)
    return out[0] if unbatched else out


def relative_coord_map(
    controller_xy: torch.Tensor,
    map_hw: Tuple[int, int],
    output_stride: int,
    rel_coord_scale: float = 16.0,
) -> torch.Tensor:
    """
    Normalized displacement from each output cell to the controller location

    Args:
        controller_xy: (N, 2) controller image points in pixels
        map_hw: (h, w) of the output plane
        output_stride: Stride of the output plane
        rel_coord_scale: Normalization constant

    Returns:
        (N, 2, h, w): channel 0 is (cell_x - ctrl_x) / (s * scale), channel 1 likewise
    """
    controller_xy = torch.as_tensor(controller_xy)
    if controller_xy.dim() == 1:
        controller_xy = controller_xy.unsqueeze(0)
    h, w = map_hw
    dtype = controller_xy.dtype if controller_xy.is_floating_point() else torch.float32
    half = output_stride // 2
    xs = torch.arange(w, dtype=dtype, device=controller_xy.device) * output_stride + half
    ys = torch.arange(h, dtype=dtype, device=controller_xy.device) * output_stride + half
    ctrl = controller_xy.to(dtype)
    norm = float(output_stride * rel_coord_scale)
    rel_x = (xs[None, None, :] - ctrl[:, 0, None, None]) / norm
    rel_y = (ys[None, :, None] - ctrl[:, 1, None, None]) / norm
    return torch.stack([rel_x.expand(-1, h, w), rel_y.expand(-1, h, w)], dim=1)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def _num_groups(channels: int) -> int:
    # at least two channels per group; P7 can be 1x1
    groups = min(32, max(1, channels // 2))
    while channels % groups:
        groups -= 1
    return groups


def conv_gn_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(_num_groups(out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four downsampling stages; returns C3, C4, C5 at strides 8, 16, 32"""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Sequential(conv_gn_relu(3, w0, 2), conv_gn_relu(w0, w0, 2))
        self.stage3 = nn.Sequential(conv_gn_relu(w0, w1, 2), conv_gn_relu(w1, w1))
        self.stage4 = nn.Sequential(conv_gn_relu(w1, w2, 2), conv_gn_relu(w2, w2))
        self.stage5 = nn.Sequential(conv_gn_relu(w2, w3, 2), conv_gn_relu(w3, w3))
        self.out_channels = (w1, w2, w3)

    def forward(self, x):
        c3 = self.stage3(self.stem(x))
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class FPN(nn.Module):
    """Lateral 1x1 + top-down sum for P3-P5; P6, P7 by stride-2 convs from P5"""

    def __init__(self, in_channels: Sequence[int], channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_channels)
        self.p6 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.p7 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=1)
                nn.init.zeros_(m.bias)

    def forward(self, feats):
        laterals = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + F.interpolate(laterals[i], size=laterals[i - 1].shape[-2:], mode="nearest")
        outs = [conv(f) for conv, f in zip(self.output, laterals)]
        p6 = self.p6(outs[-1])
        p7 = self.p7(F.relu(p6))
        return outs + [p6, p7]


class ControllerHead(nn.Module):
    """Tower shared by all levels feeding the classification and controller outputs"""

    def __init__(self, in_ch: int, channels: int, num_convs: int, num_params: int, prior_prob: float, init: str):
        super().__init__()
        layers = []
        for i in range(num_convs):
            layers.append(conv_gn_relu(in_ch if i == 0 else channels, channels))
        self.tower = nn.Sequential(*layers)
        self.cls_logits = nn.Conv2d(channels, 1, 3, padding=1)
        self.controller = nn.Conv2d(channels, num_params, 3, padding=1)

        nn.init.normal_(self.cls_logits.weight, std=0.01)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior_prob) / prior_prob))
        if init == "zero":
            nn.init.zeros_(self.controller.weight)
        else:
            nn.init.normal_(self.controller.weight, std=0.01)
        nn.init.zeros_(self.controller.bias)

    def forward(self, x):
        t = self.tower(x)
        return self.cls_logits(t), self.controller(t)


def _branch(in_ch: int, channels: int, num_convs: int, out_ch: int, kernel: int = 3) -> nn.Sequential:
    layers = [conv_gn_relu(in_ch if i == 0 else channels, channels) for i in range(num_convs)]
    layers.append(nn.Conv2d(channels, out_ch, kernel, padding=kernel // 2))
    return nn.Sequential(*layers)


@dataclass
class DenseOutputs:
    """Raw network outputs for a batch"""
    cls_logits: List[torch.Tensor]  # per level (N, 1, h, w)
    controllers: List[torch.Tensor]  # per level (N, C_f, h, w)
    strides: Tuple[int, ...]
    kp_features: torch.Tensor  # (N, C_kp, h', w')
    offsets: Optional[torch.Tensor] = None  # (N, 2K, h', w')
    heatmap: Optional[torch.Tensor] = None  # (N, K, H/8, W/8) logits


class InsPoseNet(nn.Module):
    """
    Single-stage multi-person pose network

    Args:
        cfg: ModelConfig
        strides: FPN level strides
    """

    def __init__(self, cfg, strides: Sequence[int] = LEVEL_STRIDES):
        super().__init__()
        if tuple(strides) != LEVEL_STRIDES:
            raise ConfigError(f"level strides must be {LEVEL_STRIDES}, got {tuple(strides)}")
        self.cfg = cfg
        self.strides = tuple(strides)
        self.num_params = num_kpnet_params(cfg)
        k = cfg.num_keypoints

        self.backbone = Backbone(cfg.backbone_widths)
        self.fpn = FPN(self.backbone.out_channels, cfg.fpn_channels)
        self.head = ControllerHead(
            cfg.fpn_channels, cfg.head_channels, cfg.head_convs, self.num_params, cfg.prior_prob, cfg.controller_init,
        )

        # Keypoint feature branch: four 3x3 convs then 1x1 down to C_kp
        self.kp_branch = _branch(cfg.fpn_channels, cfg.branch_channels, 4, cfg.kp_channels, kernel=1)

        self.offset_head = None
        if cfg.disk_offset:
            self.offset_head = _branch(cfg.fpn_channels, cfg.branch_channels, 2, 2 * k)
            nn.init.zeros_(self.offset_head[-1].weight)
            nn.init.zeros_(self.offset_head[-1].bias)

        self.heatmap_head = None
        if cfg.heatmap:
            self.heatmap_head = _branch(cfg.fpn_channels, cfg.heatmap_channels, 2, k, kernel=1)
            nn.init.normal_(self.heatmap_head[-1].weight, std=0.01)
            nn.init.constant_(self.heatmap_head[-1].bias, -math.log((1 - 0.1) / 0.1))

    @property
    def output_stride(self) -> int:
        return self.cfg.output_stride

    def _resample(self, x: torch.Tensor) -> torch.Tensor:
        """Bilinear resize of a stride-8 map to the configured output resolution"""
        if self.output_stride == 8:
            return x
        scale = 8.0 / self.output_stride
        size = (int(round(x.shape[-2] * scale)), int(round(x.shape[-1] * scale)))
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

    def forward_pyramid(self, images: torch.Tensor) -> List[torch.Tensor]:
        """
        Backbone + FPN

        Args:
            images: (N, 3, H, W), H and W multiples of 128

        Returns:
            [P3, P4, P5, P6, P7]
        """
        h, w = images.shape[-2:]
        top = self.strides[-1]
        if h < top or w < top or h % top or w % top:
            raise ConfigError(f"input {h}x{w} must be padded to a non-zero multiple of {top}")
        return self.fpn(self.backbone(images))

    def dense_heads(self, pyramid: Sequence[torch.Tensor]):
        """Per-level (cls logits, controller vectors) from the shared head"""
        cls_logits, controllers = [], []
        for feat in pyramid:
            logits, params = self.head(feat)
            cls_logits.append(logits)
            controllers.append(params)
        return cls_logits, controllers

    def keypoint_feature_branch(self, p3: torch.Tensor) -> torch.Tensor:
        return self._resample(self.kp_branch(p3))

    def disk_offset_branch(self, p3: torch.Tensor) -> torch.Tensor:
        if self.offset_head is None:
            raise ConfigError("disk offset branch is disabled (model.disk_offset = false)")
        return self._resample(self.offset_head(p3))

    def heatmap_branch(self, p3: torch.Tensor) -> torch.Tensor:
        """Stride-8 heatmap logits; training only"""
        if self.heatmap_head is None:
            raise BranchPrunedError("heatmap branch is not part of this model")
        if not self.training:
            raise BranchPrunedError("heatmap branch is removed at inference")
        return self.heatmap_head(p3)

    def forward(self, images: torch.Tensor) -> DenseOutputs:
        pyramid = self.forward_pyramid(images)
        cls_logits, controllers = self.dense_heads(pyramid)
        p3 = pyramid[0]
        return DenseOutputs(
            cls_logits=cls_logits,
            controllers=controllers,
            strides=self.strides,
            kp_features=self.keypoint_feature_branch(p3),
            offsets=self.disk_offset_branch(p3) if self.offset_head is not None else None,
            heatmap=self.heatmap_branch(p3) if self.heatmap_head is not None and self.training else None,
        )

    def prune_for_inference(self) -> "InsPoseNet":
        """Drop the heatmap branch and switch to eval mode"""
        self.heatmap_head = None
        return self.eval()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: InsPoseNet, config, epoch: int = 0, optimizer=None, scheduler=None):
    """
    Write weights, the flat configuration and optional optimizer state

    Args:
        path: Output file
        model: The network
        config: Full Config (stored as its flat key-value dict)
        epoch: Number of completed epochs
        optimizer: Optional optimizer
        scheduler: Optional lr scheduler
    """
    payload = {
        "model": model.state_dict(),
        "config": config.to_flat(),
        "epoch": int(epoch),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, config=None, map_location="cpu"):
    """
    Rebuild a model from a checkpoint

    Args:
        path: Checkpoint file
        config: Config to build the model from; defaults to the stored one
        map_location: torch.load map_location

    Returns:
        (model, config, payload)

    Raises:
        CheckpointMismatchError: stored tensors do not fit the model
    """
    from config import Config

    payload = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(payload, dict) or "model" not in payload:
        raise CheckpointMismatchError(f"{path} is not an InsPose checkpoint")
    if config is None:
        config = Config.from_flat(payload.get("config", {})).validate()

    model = InsPoseNet(config.model, config.assign.level_strides)
    state = payload["model"]
    expected = model.state_dict()

    if not any(k.startswith("heatmap_head.") for k in state):
        model.heatmap_head = None
        expected = model.state_dict()

    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    wrong = [
        f"{k}: checkpoint {tuple(state[k].shape)} vs model {tuple(v.shape)}"
        for k, v in expected.items()
        if k in state and tuple(state[k].shape) != tuple(v.shape)
    ]
    if missing or unexpected or wrong:
        problems = []
        if missing:
            problems.append(f"missing {len(missing)} tensor(s), e.g. {missing[0]}")
        if unexpected:
            problems.append(f"{len(unexpected)} unexpected tensor(s), e.g. {unexpected[0]}")
        problems.extend(wrong[:5])
        raise CheckpointMismatchError(f"{path}: " + "; ".join(problems))

    model.load_state_dict(state)
    logger.info(f"Loaded checkpoint {path} (epoch {payload.get('epoch', 0)})")
    return model, config, payload
