# src/process/losses.py
"""Loss terms for detection, segmentation, pose and domain classification, and their weighted total."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Sequence, Union

import torch
import torch.nn.functional as F
from torchvision.ops import sigmoid_focal_loss

from src.classes.core import Domain, Heatmaps, Visibility
from src.classes.nets import DetectionOutputs, DetectionTargets
from src.utils.logs import get_logger

logger = get_logger(__name__)

EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {value}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class LossParts:
    """The six terms of the combined objective; absent terms stay at 0."""

    det_c: Scalar = 0.0
    det_m: Scalar = 0.0
    seg_c: Scalar = 0.0
    seg_m: Scalar = 0.0
    dc: Scalar = 0.0
    pe: Scalar = 0.0

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in fields(self))


@dataclass(frozen=True)
class LossBreakdown:
    det_c: float
    det_m: float
    seg_c: float
    seg_m: float
    dc: float
    pe: float
    total: float

    @classmethod
    def from_parts(cls, parts: LossParts, total: Scalar) -> "LossBreakdown":
        values = {name: as_float(value) for name, value in parts.items()}
        return cls(total=as_float(total), **values)

    def to_record(self) -> Dict[str, float]:
        return asdict(self)


def as_float(value: Scalar) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _clip(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1.0 - EPS)


def seg_loss(pred_prob: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over pixels."""
    gt = torch.as_tensor(gt_mask, dtype=pred_prob.dtype, device=pred_prob.device)
    if pred_prob.shape != gt.shape:
        raise ValueError(f"segmentation shapes differ: prediction {tuple(pred_prob.shape)} vs mask {tuple(gt.shape)}")
    p = _clip(pred_prob)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


@dataclass(frozen=True)
class DetectionLossTerms:
    classification: torch.Tensor
    box: torch.Tensor
    category: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.classification + self.box + self.category


def det_loss_terms(outputs: DetectionOutputs, targets: DetectionTargets) -> DetectionLossTerms:
    """Focal objectness + smooth-L1 box + category cross-entropy, each divided by max(1, #positives)."""
    objectness = outputs.objectness[0, 0]
    target_obj = targets.objectness.to(objectness)
    npos = targets.num_positive
    norm = float(max(1, npos))
    classification = sigmoid_focal_loss(
        objectness, target_obj, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, reduction="sum"
    ) / norm
    if npos == 0:
        logger.warning("detection targets have no positive cells; using the objectness term only")
        zero = objectness.sum() * 0.0
        return DetectionLossTerms(classification, zero, zero)
    pos = targets.positive
    box_pred = outputs.box[0][:, pos]
    box_target = targets.box.to(box_pred)[:, pos]
    box = F.smooth_l1_loss(box_pred, box_target, beta=1.0, reduction="sum") / norm
    category_logits = outputs.category[0][:, pos].transpose(0, 1)
    category = F.cross_entropy(category_logits, targets.category[pos], reduction="sum") / norm
    return DetectionLossTerms(classification, box, category)


def det_loss(outputs: DetectionOutputs, targets: DetectionTargets) -> torch.Tensor:
    return det_loss_terms(outputs, targets).total


def _values(h: Union[Heatmaps, torch.Tensor]) -> torch.Tensor:
    if isinstance(h, Heatmaps):
        return torch.from_numpy(h.values)
    return h


def pose_loss(
    pred: Union[Heatmaps, torch.Tensor],
    target: Union[Heatmaps, torch.Tensor],
    visibilities: Sequence[Visibility],
) -> torch.Tensor:
    """Heatmap MSE over the channels whose keypoint is labeled (visible or not)."""
    pred_values = _values(pred)
    target_values = _values(target).to(pred_values)
    if pred_values.shape != target_values.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(pred_values.shape)} vs {tuple(target_values.shape)}")
    if len(visibilities) != pred_values.shape[0]:
        raise ValueError(f"{len(visibilities)} visibilities for {pred_values.shape[0]} channels")
    included = [k for k, v in enumerate(visibilities) if Visibility(v) != Visibility.NOT_LABELED]
    if not included:
        logger.warning("every keypoint channel is not-labeled; pose loss is 0 for this instance")
        return pred_values.sum() * 0.0
    index = torch.tensor(included, dtype=torch.long)
    return ((pred_values[index] - target_values[index]) ** 2).mean()


def domain_loss(p_source: torch.Tensor, domain: Domain) -> torch.Tensor:
    """Binary cross-entropy with label 1 for source and 0 for target."""
    p = _clip(torch.as_tensor(p_source))
    label = 1.0 if Domain(domain) == Domain.SOURCE else 0.0
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p)).mean()


def total_loss(parts: LossParts, weights: LossWeights = LossWeights()) -> Scalar:
    """det_c + det_m + alpha*(seg_c + seg_m) + beta*dc + gamma*pe, term by term."""
    for name, value in parts.items():
        v = as_float(value)
        if not math.isfinite(v):
            raise ValueError(f"loss term {name} is not finite ({v})")
        if v < 0:
            raise ValueError(f"loss term {name} is negative ({v})")
    total = parts.det_c + parts.det_m
    weighted = (
        (weights.alpha, parts.seg_c),
        (weights.alpha, parts.seg_m),
        (weights.beta, parts.dc),
        (weights.gamma, parts.pe),
    )
    # zero-weighted terms stay out of the graph; their branches get no gradient at all
    for weight, value in weighted:
        if weight != 0:
            total = total + weight * value
    return total
