# src/classes/nets.py
"""
Differentiable components.

Two distribution-specific multi-task networks (FPN-style encoder, spatial
attention, detection and segmentation decoders), instance feature extraction
with masking, the pose encoder/decoder, the domain classifier and the
gradient-reversal layer that makes the domain game a single-optimizer problem.
Tensors are NCHW; a single image is a batch of one.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.autograd import Function
from torchvision.ops import nms, roi_align

from src.classes.core import NUM_KEYPOINTS, Box, Category, Domain, Heatmaps, Instance

BACKBONE_BLOCKS: Dict[str, int] = {"small": 8, "medium": 14, "large": 20}
GROUPED_BACKBONES = {"large": 4}

COMPONENT_NAMES: Tuple[str, ...] = (
    "enc_c", "enc_m", "det_c", "det_m", "seg_c", "seg_m", "pose_enc", "pose_dec", "dom_cls",
)
POSE_COMPONENTS: Tuple[str, ...] = ("pose_enc", "pose_dec", "dom_cls")

FOCAL_PRIOR = 0.01


@dataclass(frozen=True)
class ModelConfig:
    backbone_size: str = "small"
    fpn_levels: int = 3
    fpn_channels: int = 32
    heatmap_stride: int = 2  # image pixels per cell of the pyramid level used for detection and pose
    roi_size: int = 14
    grl_lambda: float = 1.0
    num_keypoints: int = NUM_KEYPOINTS
    num_categories: int = 2
    pose_channels: int = 64
    domain_hidden: int = 64
    adversarial: bool = True
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    mask_threshold: float = 0.5
    heatmap_sigma: float = 2.0

    def __post_init__(self) -> None:
        if self.num_keypoints != NUM_KEYPOINTS:
            raise ValueError(f"num_keypoints must be {NUM_KEYPOINTS}, got {self.num_keypoints}")
        if self.fpn_levels < 2:
            raise ValueError(f"fpn_levels must be >= 2, got {self.fpn_levels}")
        if self.backbone_size not in BACKBONE_BLOCKS:
            raise ValueError(f"backbone_size must be one of {sorted(BACKBONE_BLOCKS)}, got {self.backbone_size!r}")
        if self.grl_lambda < 0:
            raise ValueError(f"grl_lambda must be >= 0, got {self.grl_lambda}")
        level = math.log2(self.heatmap_stride) - 1
        if level != int(level) or not 0 <= level < self.fpn_levels:
            raise ValueError(
                f"heatmap_stride {self.heatmap_stride} does not match a pyramid level "
                f"(allowed: {[2 ** (i + 1) for i in range(self.fpn_levels)]})"
            )

    @property
    def feature_level(self) -> int:
        return int(math.log2(self.heatmap_stride)) - 1

    @property
    def size_multiple(self) -> int:
        return 2 ** self.fpn_levels

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _group_count(channels: int) -> int:
    for groups in (8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1, groups: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, groups=groups, bias=False),
            nn.GroupNorm(_group_count(cout), cout),
            nn.ReLU(inplace=False),
        )


class FPNEncoder(nn.Module):
    """Bottom-up conv stages (level i at stride 2^(i+1)) with a top-down lateral pathway."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        levels = cfg.fpn_levels
        total = BACKBONE_BLOCKS[cfg.backbone_size]
        groups = GROUPED_BACKBONES.get(cfg.backbone_size, 1)
        per_stage = [total // levels + (1 if i >= levels - total % levels else 0) for i in range(levels)]
        widths = [min(128, 16 * 2 ** i) for i in range(levels)]

        self.stem = ConvBlock(3, widths[0] // 2)
        stages = []
        cin = widths[0] // 2
        for i in range(levels):
            blocks = [ConvBlock(cin, widths[i], stride=2)]
            blocks += [ConvBlock(widths[i], widths[i], groups=groups) for _ in range(per_stage[i] - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = widths[i]
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(nn.Conv2d(w, cfg.fpn_channels, 1) for w in widths)
        self.output_convs = nn.ModuleList(
            nn.Conv2d(cfg.fpn_channels, cfg.fpn_channels, 3, padding=1) for _ in widths
        )

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        H, W = image.shape[-2:]
        multiple = self.cfg.size_multiple
        if H % multiple or W % multiple:
            raise ValueError(f"input size {H}x{W} must be a multiple of {multiple} for {self.cfg.fpn_levels} levels")
        x = self.stem(image)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        top = self.laterals[-1](features[-1])
        merged = [top]
        for i in range(len(features) - 2, -1, -1):
            top = self.laterals[i](features[i]) + F.interpolate(top, scale_factor=2.0, mode="nearest")
            merged.append(top)
        merged.reverse()
        return [conv(p) for conv, p in zip(self.output_convs, merged)]


def spatial_attention(f: torch.Tensor) -> torch.Tensor:
    """out[c, y, x] = f[c, y, x] * mean_{y,x} f[c]."""
    return f * f.mean(dim=(-2, -1), keepdim=True)


class SpatialAttention(nn.Module):
    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return spatial_attention(f)


def _deconv(channels: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1)


class DetectionOutputs(NamedTuple):
    objectness: torch.Tensor  # N x 1 x h x w logits
    category: torch.Tensor  # N x K x h x w logits
    box: torch.Tensor  # N x 4 x h x w (dx, dy, log w, log h)


class DetectionDecoder(nn.Module):
    """Anchor-free center/size head on the pose level; coarser levels arrive through deconvolutions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.fpn_channels
        self.attention = SpatialAttention()
        self.upsamplers = nn.ModuleList(
            nn.Sequential(*[_deconv(C) for _ in range(j - cfg.feature_level)])
            for j in range(cfg.feature_level + 1, cfg.fpn_levels)
        )
        self.trunk = ConvBlock(C, C)
        self.objectness = nn.Conv2d(C, 1, 1)
        self.category = nn.Conv2d(C, cfg.num_categories, 1)
        self.box = nn.Conv2d(C, 4, 1)
        nn.init.constant_(self.objectness.bias, -math.log((1 - FOCAL_PRIOR) / FOCAL_PRIOR))

    def forward(self, pyramid: Sequence[torch.Tensor]) -> DetectionOutputs:
        level = self.cfg.feature_level
        x = self.attention(pyramid[level])
        for up, p in zip(self.upsamplers, pyramid[level + 1:]):
            x = x + up(self.attention(p))
        x = self.trunk(x)
        return DetectionOutputs(self.objectness(x), self.category(x), self.box(x))


class SegmentationDecoder(nn.Module):
    """Deconvolution path from the coarsest level back to image resolution, one map per category."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.fpn_channels
        self.attention = SpatialAttention()
        self.deconvs = nn.ModuleList(_deconv(C) for _ in range(cfg.fpn_levels))
        self.classifier = nn.Conv2d(C, cfg.num_categories, 1)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self.attention(pyramid[-1])
        for i, deconv in enumerate(self.deconvs):
            x = F.relu(deconv(x))
            finer = len(pyramid) - 2 - i
            if finer >= 0:
                x = x + self.attention(pyramid[finer])
        return self.classifier(x)


class PoseEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        P = cfg.pose_channels
        self.blocks = nn.Sequential(
            ConvBlock(cfg.fpn_channels, P), ConvBlock(P, P), ConvBlock(P, P),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.blocks(features)

    @staticmethod
    def embed(fmap: torch.Tensor) -> torch.Tensor:
        return fmap.mean(dim=(-2, -1))


class PoseDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        P = cfg.pose_channels
        self.up = nn.ConvTranspose2d(P, P // 2, 4, stride=2, padding=1)
        self.norm = nn.GroupNorm(_group_count(P // 2), P // 2)
        self.refine = ConvBlock(P // 2, P // 2)
        self.head = nn.Conv2d(P // 2, cfg.num_keypoints, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm(self.up(fmap)))
        return torch.sigmoid(self.head(self.refine(x)))


class DomainClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.hidden = nn.Linear(cfg.pose_channels, cfg.domain_hidden)
        self.final = nn.Linear(cfg.domain_hidden, 1)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.final(F.relu(self.hidden(embedding)))).squeeze(-1)


class GradientReversalFunction(Function):
    """Identity forward; backward multiplies the incoming gradient by -lambda."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, lam: float) -> torch.Tensor:  # type: ignore[override]
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grads: torch.Tensor):  # type: ignore[override]
        return -ctx.lam * grads, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError(f"gradient reversal lambda must be >= 0, got {lam}")
    return GradientReversalFunction.apply(x, float(lam))


class ModelComponents(nn.Module):
    """The nine named sub-networks; every parameter belongs to exactly one of them."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_c = FPNEncoder(cfg)
        self.enc_m = FPNEncoder(cfg)
        self.det_c = DetectionDecoder(cfg)
        self.det_m = DetectionDecoder(cfg)
        self.seg_c = SegmentationDecoder(cfg)
        self.seg_m = SegmentationDecoder(cfg)
        self.pose_enc = PoseEncoder(cfg)
        self.pose_dec = PoseDecoder(cfg)
        self.dom_cls = DomainClassifier(cfg)

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENT_NAMES:
            raise KeyError(f"unknown component {name!r}")
        return getattr(self, name)

    def branch(self, domain: Domain) -> Tuple[FPNEncoder, DetectionDecoder, SegmentationDecoder]:
        """Source samples run through the M-side network, target samples through the C-side one."""
        if Domain(domain) == Domain.SOURCE:
            return self.enc_m, self.det_m, self.seg_m
        return self.enc_c, self.det_c, self.seg_c

    def parameter_groups(self) -> Dict[str, Dict[str, nn.Parameter]]:
        return {name: dict(self.component(name).named_parameters()) for name in COMPONENT_NAMES}

    def assert_disjoint(self) -> None:
        seen: Dict[int, str] = {}
        for name, params in self.parameter_groups().items():
            for pname, p in params.items():
                owner = seen.setdefault(id(p), f"{name}.{pname}")
                if owner != f"{name}.{pname}":
                    raise AssertionError(f"parameter {name}.{pname} is shared with {owner}")
        if len(seen) != sum(1 for _ in self.parameters()):
            raise AssertionError("some parameters belong to no named component")

    def parameters_of(self, names: Sequence[str]) -> Iterator[nn.Parameter]:
        for name in names:
            yield from self.component(name).parameters()


def build_components(cfg: ModelConfig, seed: int) -> ModelComponents:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelComponents(cfg)


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode())
        digest.update(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def image_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 array in [0,1] -> 1 x 3 x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0).float()


def fpn_encode(encoder: FPNEncoder, image: torch.Tensor | np.ndarray) -> List[torch.Tensor]:
    if isinstance(image, np.ndarray):
        image = image_tensor(image)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return encoder(image)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    category: Category


@dataclass(frozen=True)
class DetectionTargets:
    objectness: torch.Tensor  # h x w in {0,1}
    category: torch.Tensor  # h x w long, -1 off-center
    box: torch.Tensor  # 4 x h x w
    positive: torch.Tensor  # h x w bool

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def encode_detection_targets(
    instances: Sequence[Instance], grid_shape: Tuple[int, int], stride: int
) -> DetectionTargets:
    """Each box claims the cell holding its center: (cx/s - j, cy/s - i, log(w/s), log(h/s))."""
    h, w = grid_shape
    objectness = torch.zeros(h, w)
    category = torch.full((h, w), -1, dtype=torch.long)
    box = torch.zeros(4, h, w)
    claimed_area = torch.zeros(h, w)
    for inst in instances:
        cx, cy = inst.box.center
        j = min(w - 1, max(0, int(math.floor(cx / stride))))
        i = min(h - 1, max(0, int(math.floor(cy / stride))))
        if objectness[i, j] > 0 and claimed_area[i, j] >= inst.box.area:
            continue
        objectness[i, j] = 1.0
        category[i, j] = inst.category.index
        claimed_area[i, j] = inst.box.area
        box[:, i, j] = torch.tensor(
            [cx / stride - j, cy / stride - i, math.log(inst.box.width / stride), math.log(inst.box.height / stride)]
        )
    return DetectionTargets(objectness, category, box, objectness > 0)


def non_max_suppression(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    if not detections:
        return []
    boxes = torch.tensor([d.box.as_tuple() for d in detections], dtype=torch.float64)
    scores = torch.tensor([d.score for d in detections], dtype=torch.float64)
    keep = nms(boxes, scores, iou_threshold)
    return [detections[int(k)] for k in keep]


def decode_detections(
    outputs: DetectionOutputs,
    stride: int,
    image_size: Tuple[int, int],
    score_threshold: float = 0.3,
    nms_iou: float = 0.5,
) -> List[Detection]:
    """Decode the first image of a batch into scored, clipped, NMS-filtered boxes."""
    H, W = image_size
    scores = torch.sigmoid(outputs.objectness[0, 0]).detach()
    categories = outputs.category[0].detach().argmax(dim=0)
    offsets = outputs.box[0].detach()
    found = []
    for i, j in torch.nonzero(scores >= score_threshold).tolist():
        cx = (j + float(offsets[0, i, j])) * stride
        cy = (i + float(offsets[1, i, j])) * stride
        bw = math.exp(min(20.0, float(offsets[2, i, j]))) * stride
        bh = math.exp(min(20.0, float(offsets[3, i, j]))) * stride
        try:
            raw = Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        except ValueError:
            continue
        clipped = raw.clip(W, H)
        if clipped is None:
            continue
        found.append(Detection(clipped, float(scores[i, j]), list(Category)[int(categories[i, j])]))
    kept = non_max_suppression(found, nms_iou)
    return sorted(kept, key=lambda d: -d.score)


def detect(decoder: DetectionDecoder, pyramid: Sequence[torch.Tensor], image_size: Tuple[int, int]) -> List[Detection]:
    cfg = decoder.cfg
    with torch.no_grad():
        outputs = decoder(pyramid)
    return decode_detections(outputs, cfg.heatmap_stride, image_size, cfg.score_threshold, cfg.nms_iou)


def segment(decoder: SegmentationDecoder, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-category foreground probability at image resolution (N x K x H x W)."""
    return torch.sigmoid(decoder(pyramid))


@dataclass(frozen=True, eq=False)
class InstanceMask:
    mask: np.ndarray
    low_confidence: bool


def instance_masks(
    probabilities: torch.Tensor, detections: Sequence[Detection], threshold: float = 0.5
) -> List[InstanceMask]:
    """Thresholded category map intersected with each detected box."""
    prob = probabilities.detach()
    if prob.dim() == 4:
        prob = prob[0]
    fg = (prob >= threshold).cpu().numpy()
    H, W = fg.shape[-2:]
    out = []
    for det in detections:
        rows, cols = det.box.pixel_slices(W, H)
        mask = np.zeros((H, W), dtype=bool)
        mask[rows, cols] = fg[det.category.index][rows, cols]
        out.append(InstanceMask(mask, not mask.any()))
    return out


@dataclass(frozen=True, eq=False)
class InstanceFeature:
    values: torch.Tensor  # C x r x r
    provenance: Tuple[str, int, Domain]

    def __post_init__(self) -> None:
        if not torch.isfinite(self.values).all():
            raise ValueError(f"non-finite instance feature for {self.provenance}")

    @property
    def domain(self) -> Domain:
        return self.provenance[2]


def downsample_mask(mask: np.ndarray, box: Box, roi_size: int) -> torch.Tensor:
    """Area-average the box region of the mask to roi_size x roi_size, then binarize at 0.5."""
    rows, cols = box.pixel_slices(mask.shape[1], mask.shape[0])
    crop = torch.from_numpy(np.ascontiguousarray(mask[rows, cols], dtype=np.float32))
    pooled = F.adaptive_avg_pool2d(crop[None, None], roi_size)[0, 0]
    return (pooled >= 0.5).float()


def roi_extract_masked(
    feature_map: torch.Tensor,
    box: Box,
    mask: np.ndarray,
    roi_size: int,
    stride: int,
    provenance: Tuple[str, int, Domain] = ("", 0, Domain.SOURCE),
) -> InstanceFeature:
    """Bilinear ROI-align of one box (aligned pixel-center convention), masked by the instance mask."""
    fmap = feature_map if feature_map.dim() == 4 else feature_map.unsqueeze(0)
    H, W = mask.shape
    if box.x0 < 0 or box.y0 < 0 or box.x1 > W or box.y1 > H:
        raise ValueError(f"box {box.as_tuple()} leaves the {W}x{H} image")
    if box.width / stride < 2 or box.height / stride < 2:
        raise ValueError(
            f"box {box.as_tuple()} spans fewer than 2 feature cells at stride {stride}"
        )
    rois = torch.tensor([[0.0, box.x0, box.y0, box.x1, box.y1]], dtype=fmap.dtype)
    pooled = roi_align(fmap, rois, output_size=roi_size, spatial_scale=1.0 / stride, sampling_ratio=1, aligned=True)[0]
    gate = downsample_mask(mask, box, roi_size).to(pooled.dtype)
    return InstanceFeature(pooled * gate, provenance)


def pose_forward(pose_enc: PoseEncoder, pose_dec: PoseDecoder, feat: InstanceFeature | torch.Tensor) -> torch.Tensor:
    """13 x 2r x 2r heatmaps (or N x 13 x 2r x 2r for a batch of features)."""
    values = feat.values if isinstance(feat, InstanceFeature) else feat
    batched = values.dim() == 4
    out = pose_dec(pose_enc(values if batched else values.unsqueeze(0)))
    return out if batched else out[0]


def to_heatmaps(values: torch.Tensor) -> Heatmaps:
    return Heatmaps(values.detach().cpu().numpy().astype(np.float32), stride=1)


def domain_classify(dom_cls: DomainClassifier, embedding: torch.Tensor) -> torch.Tensor:
    return dom_cls(embedding)
