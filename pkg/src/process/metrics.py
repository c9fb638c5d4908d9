# src/process/metrics.py
"""
Evaluation metrics: OKS keypoint AP, log-average miss rate over visibility
bins, per-category instance segmentation IoU and the occlusion sweep.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import yaml
from scipy.optimize import linear_sum_assignment

from src.classes.core import KEYPOINT_NAMES, NUM_KEYPOINTS, Box, Category, Keypoint, Sample, box_iou, mask_iou
from src.process.synthdata import SWEEP_FRACTIONS, DatasetLoader, derive_seed, occlude_instance
from src.utils.logs import get_logger

logger = get_logger(__name__)

KAPPA_FILE = Path(__file__).resolve().parent.parent / "data" / "kappas.yaml"

OKS_THRESHOLDS: Tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MEDIUM_AREA = (32.0 ** 2, 96.0 ** 2)
LARGE_AREA = (96.0 ** 2, math.inf)
ALL_AREA = (0.0, math.inf)

FPPI_POINTS = np.logspace(-2.0, 0.0, 9)
MR_IOU = 0.5
MR_FLOOR = 1e-10

# visibility bins, lower bound inclusive and upper bound exclusive
VISIBILITY_BINS: Dict[str, Tuple[float, float]] = {
    "R": (0.65, math.inf),
    "HO": (0.20, 0.65),
    "R+HO": (0.20, math.inf),
}


@lru_cache(maxsize=1)
def load_kappas(path: Path = KAPPA_FILE) -> Tuple[float, ...]:
    table = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    missing = [name for name in KEYPOINT_NAMES if name not in table]
    if missing:
        raise ValueError(f"kappa table {path} lacks {missing}")
    kappas = tuple(float(table[name]) for name in KEYPOINT_NAMES)
    if any(k <= 0 for k in kappas):
        raise ValueError("kappa values must be positive")
    return kappas


def oks(pred: Sequence[Keypoint], gt: Sequence[Keypoint], area: float, kappas: Optional[Sequence[float]] = None) -> float:
    """Mean over labeled gt keypoints of exp(-d^2 / (2 area kappa^2)); unlabeled predictions score 0."""
    if area <= 0:
        raise ValueError(f"OKS area must be positive, got {area}")
    if len(pred) != NUM_KEYPOINTS or len(gt) != NUM_KEYPOINTS:
        raise ValueError(f"OKS needs {NUM_KEYPOINTS} keypoints on both sides")
    kappas = load_kappas() if kappas is None else kappas
    scores = []
    for p, g, k in zip(pred, gt, kappas):
        if not g.labeled:
            continue
        if not p.labeled:
            scores.append(0.0)
            continue
        d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
        scores.append(math.exp(-d2 / (2.0 * area * k * k)))
    if not scores:
        raise ValueError("OKS is undefined without labeled ground-truth keypoints")
    return float(np.mean(scores))


# ---------------------------------------------------------------- keypoint AP


@dataclass(frozen=True)
class KeypointPrediction:
    image_id: str
    keypoints: Tuple[Keypoint, ...]
    score: float
    area: Optional[float] = None


@dataclass(frozen=True)
class KeypointGroundTruth:
    image_id: str
    keypoints: Tuple[Keypoint, ...]
    area: float


@dataclass(frozen=True)
class APSuite:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_m: Optional[float]
    ap_l: Optional[float]

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "AP_M": self.ap_m, "AP_L": self.ap_l}


def _in_range(area: float, area_range: Tuple[float, float]) -> bool:
    return area_range[0] <= area < area_range[1]


def interpolated_ap(scores: np.ndarray, matched: np.ndarray, npos: int) -> float:
    """101-point interpolated area under precision/recall; ``scores`` and ``matched`` cover counted predictions."""
    if npos == 0:
        raise ValueError("AP needs at least one positive")
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(matched[order])
    fp = np.cumsum(~matched[order])
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


def _match_image(
    preds: List[KeypointPrediction],
    gts: List[KeypointGroundTruth],
    threshold: float,
    area_range: Tuple[float, float],
    kappas: Sequence[float],
) -> Tuple[List[float], List[bool]]:
    """Greedy matching for one image; returns (scores, matched) for the predictions that count."""
    gt_ignore = [not _in_range(g.area, area_range) for g in gts]
    # non-ignored gts first, as in the usual protocol
    gt_order = sorted(range(len(gts)), key=lambda i: gt_ignore[i])
    gts = [gts[i] for i in gt_order]
    gt_ignore = [gt_ignore[i] for i in gt_order]
    preds = sorted(preds, key=lambda p: -p.score)
    similarity = np.array([[oks(p.keypoints, g.keypoints, g.area, kappas) for g in gts] for p in preds]).reshape(
        len(preds), len(gts)
    )
    taken = [False] * len(gts)
    scores: List[float] = []
    matched: List[bool] = []
    for d, pred in enumerate(preds):
        best_iou = min(threshold, 1.0 - 1e-10)
        m = -1
        for g in range(len(gts)):
            if taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if similarity[d, g] < best_iou:
                continue
            best_iou = similarity[d, g]
            m = g
        if m > -1:
            taken[m] = True
            if gt_ignore[m]:
                continue
            scores.append(pred.score)
            matched.append(True)
            continue
        if pred.area is not None and not _in_range(pred.area, area_range):
            continue
        scores.append(pred.score)
        matched.append(False)
    return scores, matched


def _average_precision(
    predictions: Sequence[KeypointPrediction],
    gts: Sequence[KeypointGroundTruth],
    threshold: float,
    area_range: Tuple[float, float],
    kappas: Sequence[float],
) -> Optional[float]:
    npos = sum(1 for g in gts if _in_range(g.area, area_range))
    if npos == 0:
        return None
    by_image_pred: Dict[str, List[KeypointPrediction]] = defaultdict(list)
    by_image_gt: Dict[str, List[KeypointGroundTruth]] = defaultdict(list)
    for p in predictions:
        by_image_pred[p.image_id].append(p)
    for g in gts:
        by_image_gt[g.image_id].append(g)
    scores: List[float] = []
    matched: List[bool] = []
    for image_id in sorted(set(by_image_pred) | set(by_image_gt)):
        s, m = _match_image(by_image_pred[image_id], by_image_gt[image_id], threshold, area_range, kappas)
        scores.extend(s)
        matched.extend(m)
    return interpolated_ap(np.asarray(scores, dtype=np.float64), np.asarray(matched, dtype=bool), npos)


def _mean_over_thresholds(predictions, gts, thresholds, area_range, kappas) -> Optional[float]:
    values = [_average_precision(predictions, gts, t, area_range, kappas) for t in thresholds]
    if values[0] is None:
        return None
    return float(np.mean(values))


def keypoint_ap(
    predictions: Sequence[KeypointPrediction],
    gts: Sequence[KeypointGroundTruth],
    oks_thresholds: Sequence[float] = OKS_THRESHOLDS,
    kappas: Optional[Sequence[float]] = None,
) -> Optional[APSuite]:
    """AP averaged over OKS thresholds, AP50, AP75 and the medium/large area variants. None without gts."""
    if not gts:
        return None
    kappas = load_kappas() if kappas is None else tuple(kappas)
    return APSuite(
        ap=_mean_over_thresholds(predictions, gts, oks_thresholds, ALL_AREA, kappas),
        ap50=_average_precision(predictions, gts, 0.5, ALL_AREA, kappas),
        ap75=_average_precision(predictions, gts, 0.75, ALL_AREA, kappas),
        ap_m=_mean_over_thresholds(predictions, gts, oks_thresholds, MEDIUM_AREA, kappas),
        ap_l=_mean_over_thresholds(predictions, gts, oks_thresholds, LARGE_AREA, kappas),
    )


# ---------------------------------------------------------------- miss rate


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    box: Box
    score: float


@dataclass(frozen=True)
class BoxGroundTruth:
    image_id: str
    box: Box
    visibility_ratio: float


def in_bin(visibility_ratio: float, bin_name: str) -> bool:
    lo, hi = VISIBILITY_BINS[bin_name]
    return lo <= visibility_ratio < hi


def _classify_detections(
    detections: Sequence[ScoredBox], gts: Sequence[BoxGroundTruth], bin_name: str
) -> Tuple[np.ndarray, np.ndarray]:
    """Per counted detection: (score, is_true_positive). Detections on ignore regions are dropped."""
    by_image_det: Dict[str, List[ScoredBox]] = defaultdict(list)
    by_image_gt: Dict[str, List[BoxGroundTruth]] = defaultdict(list)
    for d in detections:
        by_image_det[d.image_id].append(d)
    for g in gts:
        by_image_gt[g.image_id].append(g)
    scores: List[float] = []
    hits: List[bool] = []
    for image_id in sorted(by_image_det):
        image_gts = by_image_gt.get(image_id, [])
        counted = [g for g in image_gts if in_bin(g.visibility_ratio, bin_name)]
        ignored = [g for g in image_gts if not in_bin(g.visibility_ratio, bin_name)]
        taken = [False] * len(counted)
        for det in sorted(by_image_det[image_id], key=lambda d: -d.score):
            best, best_iou = -1, MR_IOU
            for g, gt in enumerate(counted):
                if taken[g]:
                    continue
                iou = box_iou(det.box, gt.box)
                if iou >= best_iou:
                    best, best_iou = g, iou
            if best > -1:
                taken[best] = True
                scores.append(det.score)
                hits.append(True)
            elif any(box_iou(det.box, gt.box) >= MR_IOU for gt in ignored):
                continue
            else:
                scores.append(det.score)
                hits.append(False)
    return np.asarray(scores, dtype=np.float64), np.asarray(hits, dtype=bool)


def miss_rate_curve(
    detections: Sequence[ScoredBox], gts: Sequence[BoxGroundTruth], bin_name: str, num_images: int
) -> Tuple[np.ndarray, np.ndarray]:
    """(fppi, miss rate) at every distinct score threshold, starting from the empty operating point."""
    npos = sum(1 for g in gts if in_bin(g.visibility_ratio, bin_name))
    scores, hits = _classify_detections(detections, gts, bin_name)
    order = np.argsort(-scores, kind="mergesort")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    # operating points only where the score changes
    last_of_group = np.append(scores[1:] != scores[:-1], True) if scores.size else np.zeros(0, dtype=bool)
    fppi = np.concatenate([[0.0], fp[last_of_group] / num_images])
    mr = np.concatenate([[1.0], 1.0 - tp[last_of_group] / npos])
    return fppi, mr


def miss_rate(
    detections: Sequence[ScoredBox],
    gts: Sequence[BoxGroundTruth],
    bin_name: str,
    num_images: Optional[int] = None,
) -> Optional[float]:
    """Log-average miss rate over nine FPPI points in [1e-2, 1]; None when the bin holds no gts."""
    if bin_name not in VISIBILITY_BINS:
        raise ValueError(f"unknown visibility bin {bin_name!r}; expected one of {list(VISIBILITY_BINS)}")
    if not any(in_bin(g.visibility_ratio, bin_name) for g in gts):
        return None
    if num_images is None:
        num_images = len({g.image_id for g in gts} | {d.image_id for d in detections})
    fppi, mr = miss_rate_curve(detections, gts, bin_name, num_images)
    sampled = []
    for ref in FPPI_POINTS:
        # most permissive operating point whose fppi does not exceed the reference
        idx = np.flatnonzero(fppi <= ref + 1e-12)
        sampled.append(mr[idx[-1]])
    value = float(np.exp(np.mean(np.log(np.maximum(sampled, MR_FLOOR)))))
    return 0.0 if value <= MR_FLOOR * (1.0 + 1e-9) else value


# ---------------------------------------------------------------- instance segmentation


@dataclass(frozen=True, eq=False)
class LabeledMask:
    image_id: str
    mask: np.ndarray
    category: Category


def instance_seg_iou(
    pred_masks: Sequence[LabeledMask], gt_masks: Sequence[LabeledMask], category: Category
) -> Optional[float]:
    """Mean over gts of the IoU of their one-to-one match (maximum total IoU); unmatched gts count 0."""
    category = Category(category)
    gts = [g for g in gt_masks if g.category == category]
    if not gts:
        return None
    preds_by_image: Dict[str, List[LabeledMask]] = defaultdict(list)
    gts_by_image: Dict[str, List[LabeledMask]] = defaultdict(list)
    for p in pred_masks:
        if p.category == category:
            preds_by_image[p.image_id].append(p)
    for g in gts:
        gts_by_image[g.image_id].append(g)
    total = 0.0
    for image_id, image_gts in gts_by_image.items():
        image_preds = preds_by_image.get(image_id, [])
        if not image_preds:
            continue
        ious = np.array([[mask_iou(g.mask, p.mask) for p in image_preds] for g in image_gts])
        rows, cols = linear_sum_assignment(ious, maximize=True)
        total += float(ious[rows, cols].sum())
    return total / len(gts)


# ---------------------------------------------------------------- occlusion sweep


class BoxPosePredictor(Protocol):
    def predict_with_boxes(self, sample: Sample, instance_indices: Sequence[int]) -> List[KeypointPrediction]:
        ...


@dataclass(frozen=True)
class SweepPoint:
    fraction: float
    mean: float
    std: float
    per_seed: Tuple[float, ...]


def fully_visible(sample: Sample) -> List[int]:
    return [k for k, inst in enumerate(sample.instances) if inst.visibility_ratio >= 1.0 and inst.eval_keypoints is not None]


def _sweep_ap(predictor: BoxPosePredictor, eval_set: DatasetLoader, fraction: float, seed: int) -> Optional[float]:
    predictions: List[KeypointPrediction] = []
    gts: List[KeypointGroundTruth] = []
    for index, sample in enumerate(eval_set):
        chosen = fully_visible(sample)
        if not chosen:
            continue
        for k in chosen:
            inst = sample.instances[k]
            gts.append(KeypointGroundTruth(sample.sample_id, inst.eval_keypoints, inst.box.area))
        occluded = sample
        for k in chosen:
            occluded = occlude_instance(occluded, k, fraction, derive_seed(derive_seed(seed, index), k))
        predictions.extend(predictor.predict_with_boxes(occluded, chosen))
    suite = keypoint_ap(predictions, gts)
    return None if suite is None else suite.ap


def occlusion_sweep(
    predictor: BoxPosePredictor,
    eval_set: DatasetLoader,
    fractions: Sequence[float] = SWEEP_FRACTIONS,
    seeds: Sequence[int] = (0, 1, 2),
) -> Dict[float, SweepPoint]:
    """
    Keypoint AP per occlusion fraction against the unoccluded ground truth,
    mean and standard deviation over seeds. Only fully visible annotated
    instances are occluded and scored.
    """
    out: Dict[float, SweepPoint] = {}
    for fraction in fractions:
        values = [_sweep_ap(predictor, eval_set, fraction, seed) for seed in seeds]
        kept = [v for v in values if v is not None]
        if not kept:
            logger.warning(f"occlusion sweep at {fraction:.0%}: no fully visible annotated instances")
            continue
        out[float(fraction)] = SweepPoint(float(fraction), float(np.mean(kept)), float(np.std(kept)), tuple(kept))
        logger.info(f"occlusion {fraction:.0%}: AP {out[float(fraction)].mean:.3f} ± {out[float(fraction)].std:.3f}")
    return out
