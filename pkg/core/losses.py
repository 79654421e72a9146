"""
Training losses

L = L_cls + L_kpf + L_do + L_hm, each term optionally weighted by the
loss section of the config (1.0 by default).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import sigmoid_focal_loss

from .assignment import TargetBatch
from .network import DenseOutputs, apply_kpnet, relative_coord_map, split_kpnet_params

logger = logging.getLogger(__name__)


def focal_cls_loss(
    logits: Sequence[torch.Tensor],
    labels: Sequence[torch.Tensor],
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """
    Sigmoid focal loss summed over every location of every level / max(N_pos, 1)

    Args:
        logits: Per level, any shape
        labels: Per level, 0/1 with the same number of elements

    Returns:
        Scalar
    """
    flat_logits = torch.cat([x.reshape(-1) for x in logits])
    flat_labels = torch.cat([y.reshape(-1) for y in labels]).to(flat_logits.dtype)
    num_pos = max(float(flat_labels.sum()), 1.0)
    loss = sigmoid_focal_loss(flat_logits, flat_labels, alpha=alpha, gamma=gamma, reduction="sum")
    return loss / num_pos


def kpnet_cross_entropy(logits: torch.Tensor, target_index: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """
    Spatial softmax cross-entropy of per-location KP-Net outputs

    Mean over valid keypoints within a location, then mean over locations.
    Locations without a valid keypoint are dropped.

    Args:
        logits: (P, K, h, w)
        target_index: (P, K) flat target cell
        valid: (P, K) bool

    Returns:
        Scalar (zero when nothing is valid)
    """
    p, k = logits.shape[:2]
    flat = logits.reshape(p * k, -1)
    ce = F.cross_entropy(flat, target_index.reshape(-1).clamp(min=0), reduction="none").view(p, k)
    valid = valid.to(ce.dtype)
    counts = valid.sum(dim=1)
    keep = counts > 0
    dropped = int((~keep).sum())
    if dropped:
        logger.warning(f"{dropped} positive location(s) have no visible keypoint and are excluded")
    if not bool(keep.any()):
        return logits.sum() * 0.0
    per_location = (ce * valid).sum(dim=1)[keep] / counts[keep]
    return per_location.mean()


def kpf_loss(
    controllers: Sequence[torch.Tensor],
    cls_labels: Sequence[torch.Tensor],
    instance_index: Sequence[torch.Tensor],
    kp_features: torch.Tensor,
    kp_index: torch.Tensor,
    kp_valid: torch.Tensor,
    model_cfg,
    strides: Sequence[int],
) -> torch.Tensor:
    """
    Instance-aware KP-Net loss

    Every positive location builds its KP-Net from its controller vector,
    runs it over its image's keypoint features concatenated with the
    relative coordinates to the location, and is scored against its
    instance's one-hot targets.

    Args:
        controllers: Per level (N, C_f, h, w)
        cls_labels: Per level (N, h, w)
        instance_index: Per level (N, h, w), global instance id, -1 background
        kp_features: (N, C_kp, h', w')
        kp_index: (M, K) flat target cells
        kp_valid: (M, K) bool
        model_cfg: ModelConfig
        strides: Level strides

    Returns:
        Scalar, zero without positives
    """
    params, ctrl_xy, img_ids, inst_ids = [], [], [], []
    for ctrl, labels, inst_map, stride in zip(controllers, cls_labels, instance_index, strides):
        n, y, x = torch.nonzero(labels > 0, as_tuple=True)
        if n.numel() == 0:
            continue
        params.append(ctrl[n, :, y, x])
        half = stride // 2
        ctrl_xy.append(torch.stack([x * stride + half, y * stride + half], dim=1))
        img_ids.append(n)
        inst_ids.append(inst_map[n, y, x])

    if not params:
        return sum(c.sum() for c in controllers) * 0.0 + kp_features.sum() * 0.0

    theta = torch.cat(params)
    img_ids = torch.cat(img_ids)
    inst_ids = torch.cat(inst_ids)
    ctrl_xy = torch.cat(ctrl_xy).to(kp_features.dtype)

    h, w = kp_features.shape[-2:]
    rel = relative_coord_map(ctrl_xy, (h, w), model_cfg.output_stride, model_cfg.rel_coord_scale)
    inputs = torch.cat([kp_features[img_ids], rel], dim=1)
    logits = apply_kpnet(inputs, split_kpnet_params(theta, model_cfg))
    return kpnet_cross_entropy(logits, kp_index[inst_ids], kp_valid[inst_ids])


def disk_offset_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over supervised entries; zero when none are"""
    mask = mask.to(pred.dtype)
    count = mask.sum()
    if float(count) == 0:
        return pred.sum() * 0.0
    return ((pred - target).abs() * mask).sum() / count


def heatmap_focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """
    Penalty-reduced focal loss on heatmap logits

    y=1 cells: -(1-p)^alpha log p; other cells: -(1-y)^beta p^alpha log(1-p);
    normalized by the number of y=1 cells.
    """
    prob = torch.sigmoid(logits)
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    pos = target.eq(1).to(logits.dtype)
    neg = 1.0 - pos

    pos_loss = -((1 - prob) ** alpha * log_p * pos).sum()
    neg_loss = -((1 - target) ** beta * prob ** alpha * log_not_p * neg).sum()
    num_pos = max(float(pos.sum()), 1.0)
    return (pos_loss + neg_loss) / num_pos


@dataclass
class LossReport:
    """Loss components; l_do / l_hm are None when their branch is disabled"""
    l_cls: torch.Tensor
    l_kpf: torch.Tensor
    l_do: Optional[torch.Tensor]
    l_hm: Optional[torch.Tensor]
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        out = {"l_cls": float(self.l_cls), "l_kpf": float(self.l_kpf)}
        if self.l_do is not None:
            out["l_do"] = float(self.l_do)
        if self.l_hm is not None:
            out["l_hm"] = float(self.l_hm)
        out["total"] = float(self.total)
        return out


def total_loss(l_cls, l_kpf, l_do=None, l_hm=None, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> LossReport:
    """Weighted sum of the components; a missing component counts as 0"""
    w_cls, w_kpf, w_do, w_hm = weights
    total = w_cls * l_cls + w_kpf * l_kpf
    if l_do is not None:
        total = total + w_do * l_do
    if l_hm is not None:
        total = total + w_hm * l_hm
    return LossReport(l_cls, l_kpf, l_do, l_hm, total)


class InsPoseCriterion(nn.Module):
    """
    All training losses from network outputs and collated targets

    Args:
        model_cfg: ModelConfig
        loss_cfg: LossConfig
    """

    def __init__(self, model_cfg, loss_cfg):
        super().__init__()
        self.model_cfg = model_cfg
        self.loss_cfg = loss_cfg

    def forward(self, outputs: DenseOutputs, targets: TargetBatch) -> LossReport:
        cfg = self.loss_cfg
        l_cls = focal_cls_loss(outputs.cls_logits, targets.cls_labels, cfg.focal_alpha, cfg.focal_gamma)
        l_kpf = kpf_loss(
            outputs.controllers,
            targets.cls_labels,
            targets.instance_index,
            outputs.kp_features,
            targets.kp_index,
            targets.kp_valid,
            self.model_cfg,
            outputs.strides,
        )
        l_do = None
        if self.model_cfg.disk_offset and outputs.offsets is not None:
            l_do = disk_offset_loss(outputs.offsets, targets.offset_target, targets.offset_mask)
        l_hm = None
        if self.model_cfg.heatmap and outputs.heatmap is not None:
            l_hm = heatmap_focal_loss(outputs.heatmap, targets.heatmap, cfg.heatmap_alpha, cfg.heatmap_beta)
        return total_loss(l_cls, l_kpf, l_do, l_hm, (cfg.weight_cls, cfg.weight_kpf, cfg.weight_do, cfg.weight_hm))


def loss_names(model_cfg) -> List[str]:
    """Components logged for a model configuration"""
    names = ["l_cls", "l_kpf"]
    if model_cfg.disk_offset:
        names.append("l_do")
    if model_cfg.heatmap:
        names.append("l_hm")
    return names
