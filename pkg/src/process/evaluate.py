# src/process/evaluate.py
"""
Inference over evaluation splits and report assembly.

PosePredictor runs the branch that matches a sample's domain: detection and
segmentation give boxes and instance masks, and the pose branch reads masked
instance features at those boxes. evaluate() scores every split and, on
request, the occlusion sweep; EvalReport renders markdown tables and a flat
key/value YAML file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from src.classes.core import Box, Category, Keypoint, Sample, decode_heatmaps, from_roi_frame
from src.classes.nets import (
    BACKBONE_BLOCKS,
    Detection,
    InstanceMask,
    ModelComponents,
    ModelConfig,
    detect,
    fpn_encode,
    instance_masks,
    pose_forward,
    roi_extract_masked,
    segment,
    to_heatmaps,
)
from src.classes.output import Output, format_metric
from src.process.metrics import (
    VISIBILITY_BINS,
    APSuite,
    BoxGroundTruth,
    KeypointGroundTruth,
    KeypointPrediction,
    LabeledMask,
    ScoredBox,
    SweepPoint,
    instance_seg_iou,
    keypoint_ap,
    miss_rate,
    occlusion_sweep,
)
from src.process.synthdata import SWEEP_FRACTIONS, DatasetLoader
from src.utils.atomic_ops import atomic_writer
from src.utils.logs import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class EvalOptions:
    occlusion_sweep: bool = False
    sweep_fractions: Tuple[float, ...] = SWEEP_FRACTIONS
    sweep_seeds: Tuple[int, ...] = (0, 1, 2)
    sweep_split: str = "source_eval"
    keypoint_threshold: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "sweep_fractions", tuple(float(f) for f in self.sweep_fractions))
        object.__setattr__(self, "sweep_seeds", tuple(int(s) for s in self.sweep_seeds))
        if not 0.0 < self.keypoint_threshold < 1.0:
            raise ValueError(f"keypoint_threshold must be in (0,1), got {self.keypoint_threshold}")


@dataclass(frozen=True)
class InstancePose:
    box: Box
    category: Category
    keypoints: Tuple[Keypoint, ...]
    score: float


@dataclass(frozen=True)
class SamplePrediction:
    sample_id: str
    detections: List[Detection]
    masks: List[InstanceMask]
    poses: List[InstancePose]


class PosePredictor:
    """Detection, segmentation and instance pose for one sample at a time."""

    def __init__(self, components: ModelComponents, keypoint_threshold: float = 0.1):
        self.components = components
        self.cfg: ModelConfig = components.cfg
        self.keypoint_threshold = keypoint_threshold
        components.eval()

    def _pose(
        self, fmap: torch.Tensor, box: Box, mask: np.ndarray, provenance
    ) -> Optional[Tuple[Tuple[Keypoint, ...], float]]:
        try:
            feat = roi_extract_masked(fmap, box, mask, self.cfg.roi_size, self.cfg.heatmap_stride, provenance)
        except ValueError:
            return None
        heat = pose_forward(self.components.pose_enc, self.components.pose_dec, feat)
        heatmaps = to_heatmaps(heat)
        local = decode_heatmaps(heatmaps, self.keypoint_threshold)
        confidence = float(heatmaps.values.reshape(heatmaps.values.shape[0], -1).max(axis=1).mean())
        return from_roi_frame(local, box, heatmaps.values.shape[-1]), confidence

    @torch.no_grad()
    def predict(self, sample: Sample) -> SamplePrediction:
        encoder, detector, segmenter = self.components.branch(sample.domain)
        pyramid = fpn_encode(encoder, sample.image)
        detections = detect(detector, pyramid, (sample.height, sample.width))
        masks = instance_masks(segment(segmenter, pyramid), detections, self.cfg.mask_threshold)
        fmap = pyramid[self.cfg.feature_level][0]
        poses = []
        for k, (det, inst_mask) in enumerate(zip(detections, masks)):
            mask = inst_mask.mask
            if inst_mask.low_confidence:
                # empty segmentation inside the box: fall back to the whole box
                mask = np.zeros_like(mask)
                rows, cols = det.box.pixel_slices(sample.width, sample.height)
                mask[rows, cols] = True
            result = self._pose(fmap, det.box, mask, (sample.sample_id, k, sample.domain))
            if result is not None:
                poses.append(InstancePose(det.box, det.category, result[0], det.score * result[1]))
        return SamplePrediction(sample.sample_id, detections, masks, poses)

    @torch.no_grad()
    def predict_with_boxes(self, sample: Sample, instance_indices: Sequence[int]) -> List[KeypointPrediction]:
        """Pose at ground-truth boxes with predicted masks clipped to each box."""
        encoder, _, segmenter = self.components.branch(sample.domain)
        pyramid = fpn_encode(encoder, sample.image)
        fg = (segment(segmenter, pyramid)[0] >= self.cfg.mask_threshold).cpu().numpy()
        fmap = pyramid[self.cfg.feature_level][0]
        out = []
        for k in instance_indices:
            inst = sample.instances[k]
            rows, cols = inst.box.pixel_slices(sample.width, sample.height)
            mask = np.zeros((sample.height, sample.width), dtype=bool)
            mask[rows, cols] = fg[inst.category.index][rows, cols]
            if not mask.any():
                mask[rows, cols] = True
            result = self._pose(fmap, inst.box, mask, (sample.sample_id, k, sample.domain))
            if result is None:
                continue
            out.append(KeypointPrediction(sample.sample_id, result[0], result[1], inst.box.area))
        return out


@dataclass(frozen=True)
class SplitMetrics:
    split: str
    n_samples: int
    keypoints: Optional[APSuite]
    miss_rate: Dict[str, Optional[float]]
    iou: Dict[str, Optional[float]]


@dataclass
class AblationRow:
    backbone_size: str
    keypoints: Optional[APSuite]


@dataclass
class EvalReport:
    splits: Dict[str, SplitMetrics] = field(default_factory=dict)
    sweep: Dict[float, SweepPoint] = field(default_factory=dict)
    ablation: List[AblationRow] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {f"meta.{k}": v for k, v in self.meta.items()}
        for name, metrics in self.splits.items():
            flat[f"{name}.n_samples"] = metrics.n_samples
            suite = metrics.keypoints.to_dict() if metrics.keypoints else dict.fromkeys(("AP", "AP50", "AP75", "AP_M", "AP_L"))
            flat.update({f"{name}.{key}": value for key, value in suite.items()})
            flat.update({f"{name}.MR.{key}": value for key, value in metrics.miss_rate.items()})
            flat.update({f"{name}.IoU.{key}": value for key, value in metrics.iou.items()})
        for fraction, point in sorted(self.sweep.items()):
            pct = int(round(fraction * 100))
            flat[f"sweep.{pct}.mean"] = point.mean
            flat[f"sweep.{pct}.std"] = point.std
        for row in self.ablation:
            suite = row.keypoints.to_dict() if row.keypoints else {}
            flat.update({f"ablation.{row.backbone_size}.{key}": value for key, value in suite.items()})
        return flat

    def to_markdown(self) -> str:
        out = Output()
        out.addTitle("evaluation report")
        out.newLine()
        if self.splits:
            out.addTitle("keypoint AP", level=2)
            out.addTable(
                ["split", "AP", "AP50", "AP75", "AP_M", "AP_L"],
                [
                    [name] + list((m.keypoints.to_dict() if m.keypoints else dict.fromkeys(range(5))).values())
                    for name, m in self.splits.items()
                ],
            )
            out.newLine()
            out.addTitle("miss rate", level=2)
            out.addTable(["split"] + list(VISIBILITY_BINS), [[n] + [m.miss_rate.get(b) for b in VISIBILITY_BINS] for n, m in self.splits.items()])
            out.newLine()
            out.addTitle("instance segmentation IoU", level=2)
            categories = [c.value for c in Category]
            out.addTable(["split"] + categories, [[n] + [m.iou.get(c) for c in categories] for n, m in self.splits.items()])
            out.newLine()
        if self.sweep:
            out.addTitle("AP under occlusion", level=2)
            fractions = sorted(self.sweep)
            out.addTable(
                ["occlusion"] + [f"{int(round(f * 100))}%" for f in fractions],
                [["AP"] + [f"{format_metric(self.sweep[f].mean)} ± {format_metric(self.sweep[f].std)}" for f in fractions]],
            )
            out.newLine()
        if self.ablation:
            out.addTitle("backbone ablation", level=2)
            out.addTable(
                ["backbone", "AP", "AP50", "AP75", "AP_M", "AP_L"],
                [
                    [row.backbone_size] + list((row.keypoints.to_dict() if row.keypoints else dict.fromkeys(range(5))).values())
                    for row in self.ablation
                ],
            )
            out.newLine()
        if self.meta:
            out.addTitle("provenance", level=2)
            out.addCodeBlock(yaml.safe_dump(self.meta, sort_keys=True), "yaml")
        return out.text()

    def save(self, report_dir: Path) -> Tuple[Path, Path]:
        report_dir = Path(report_dir)
        flat_path = report_dir / "eval.yaml"
        md_path = report_dir / "eval.md"
        atomic_writer.atomic_write(flat_path, yaml.safe_dump(self.to_flat(), sort_keys=True))
        atomic_writer.atomic_write(md_path, self.to_markdown())
        return flat_path, md_path


def load_flat_report(path: Path) -> Dict[str, Any]:
    return yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}


def evaluate_split(predictor: PosePredictor, name: str, dataset: DatasetLoader) -> SplitMetrics:
    kp_preds: List[KeypointPrediction] = []
    kp_gts: List[KeypointGroundTruth] = []
    boxes: List[ScoredBox] = []
    box_gts: List[BoxGroundTruth] = []
    pred_masks: List[LabeledMask] = []
    gt_masks: List[LabeledMask] = []
    for sample in dataset:
        prediction = predictor.predict(sample)
        for pose in prediction.poses:
            kp_preds.append(KeypointPrediction(sample.sample_id, pose.keypoints, pose.score, pose.box.area))
        for det, inst_mask in zip(prediction.detections, prediction.masks):
            boxes.append(ScoredBox(sample.sample_id, det.box, det.score))
            pred_masks.append(LabeledMask(sample.sample_id, inst_mask.mask, det.category))
        for inst in sample.instances:
            box_gts.append(BoxGroundTruth(sample.sample_id, inst.box, inst.visibility_ratio))
            gt_masks.append(LabeledMask(sample.sample_id, inst.mask, inst.category))
            reference = inst.eval_keypoints
            if reference is not None and any(kp.labeled for kp in reference):
                kp_gts.append(KeypointGroundTruth(sample.sample_id, reference, inst.box.area))
    if not kp_gts:
        logger.warning(f"{name}: no pose ground truth; keypoint AP is absent")
    return SplitMetrics(
        split=name,
        n_samples=len(dataset),
        keypoints=keypoint_ap(kp_preds, kp_gts),
        miss_rate={b: miss_rate(boxes, box_gts, b, num_images=len(dataset)) for b in VISIBILITY_BINS},
        iou={c.value: instance_seg_iou(pred_masks, gt_masks, c) for c in Category},
    )


def evaluate(
    components: ModelComponents,
    eval_sets: Mapping[str, DatasetLoader],
    options: EvalOptions = EvalOptions(),
) -> EvalReport:
    predictor = PosePredictor(components, options.keypoint_threshold)
    report = EvalReport()
    for name, dataset in eval_sets.items():
        report.splits[name] = evaluate_split(predictor, name, dataset)
        suite = report.splits[name].keypoints
        logger.info(f"{name}: AP {format_metric(suite.ap if suite else None)}")
    if options.occlusion_sweep:
        if options.sweep_split not in eval_sets:
            raise KeyError(f"sweep split {options.sweep_split!r} is not among {sorted(eval_sets)}")
        report.sweep = occlusion_sweep(
            predictor, eval_sets[options.sweep_split], options.sweep_fractions, options.sweep_seeds
        )
    return report


def ablate_backbones(
    train_fn,
    model_cfg: ModelConfig,
    eval_set: DatasetLoader,
    options: EvalOptions = EvalOptions(),
) -> List[AblationRow]:
    """
    Train one model per backbone size with ``train_fn(model_cfg) -> ModelComponents``
    and score keypoint AP on ``eval_set``.
    """
    rows = []
    for size in BACKBONE_BLOCKS:
        components = train_fn(replace(model_cfg, backbone_size=size))
        split = evaluate_split(PosePredictor(components, options.keypoint_threshold), size, eval_set)
        rows.append(AblationRow(size, split.keypoints))
        logger.info(f"backbone {size}: AP {format_metric(split.keypoints.ap if split.keypoints else None)}")
    return rows
