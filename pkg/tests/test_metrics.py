"""
Tests for OKS, keypoint AP, log-average miss rate, instance IoU and the occlusion sweep.
"""
import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_pose
from src.classes.core import NUM_KEYPOINTS, Box, Category, Keypoint, Visibility, box_iou, mask_iou
from src.process.metrics import (
    FPPI_POINTS,
    MR_FLOOR,
    RECALL_POINTS,
    BoxGroundTruth,
    KeypointGroundTruth,
    KeypointPrediction,
    LabeledMask,
    ScoredBox,
    in_bin,
    instance_seg_iou,
    keypoint_ap,
    load_kappas,
    miss_rate,
    occlusion_sweep,
    oks,
)
from src.process.synthdata import build_dataset

KAPPAS = (0.1,) * NUM_KEYPOINTS


def shifted(keypoints, dx, dy=0.0):
    return tuple(Keypoint(kp.x + dx, kp.y + dy, kp.visibility) for kp in keypoints)


def brute_force_ap(scores, matched, npos):
    """For each recall point: best precision among cut-offs reaching that recall."""
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    hits = np.asarray(matched)[order]
    cutoffs = []
    for k in range(1, len(hits) + 1):
        tp = hits[:k].sum()
        cutoffs.append((tp / npos, tp / k))
    values = []
    for r in RECALL_POINTS:
        reachable = [p for rec, p in cutoffs if rec >= r]
        values.append(max(reachable) if reachable else 0.0)
    return float(np.mean(values))


def greedy_oks_hits(preds, gts, threshold):
    """Per image, highest score first: claim the best untaken gt with OKS at or above threshold."""
    scores, hits = [], []
    for image_id in sorted({p.image_id for p in preds}):
        image_gts = [g for g in gts if g.image_id == image_id]
        taken = set()
        for pred in sorted((p for p in preds if p.image_id == image_id), key=lambda p: -p.score):
            candidates = [
                (oks(pred.keypoints, g.keypoints, g.area, KAPPAS), k)
                for k, g in enumerate(image_gts)
                if k not in taken
            ]
            candidates = [c for c in candidates if c[0] >= threshold]
            if candidates:
                taken.add(max(candidates)[1])
            scores.append(pred.score)
            hits.append(bool(candidates))
    return scores, hits


def enumerated_miss_rate(dets, gts, bin_name, num_images):
    """Rebuild every operating point from scratch at each score threshold."""
    counted = [g for g in gts if in_bin(g.visibility_ratio, bin_name)]
    ignored = [g for g in gts if not in_bin(g.visibility_ratio, bin_name)]
    points = [(0.0, 1.0)]
    for threshold in sorted({d.score for d in dets}, reverse=True):
        tp = fp = 0
        taken = set()
        for det in sorted((d for d in dets if d.score >= threshold), key=lambda d: -d.score):
            overlaps = [
                (box_iou(det.box, g.box), k)
                for k, g in enumerate(counted)
                if k not in taken and g.image_id == det.image_id
            ]
            overlaps = [o for o in overlaps if o[0] >= 0.5]
            if overlaps:
                taken.add(max(overlaps)[1])
                tp += 1
            elif not any(g.image_id == det.image_id and box_iou(det.box, g.box) >= 0.5 for g in ignored):
                fp += 1
        points.append((fp / num_images, 1.0 - tp / len(counted)))
    sampled = [min(mr for fppi, mr in points if fppi <= ref + 1e-12) for ref in FPPI_POINTS]
    value = math.exp(np.mean(np.log(np.maximum(sampled, MR_FLOOR))))
    return 0.0 if value <= MR_FLOOR * (1.0 + 1e-9) else value


def best_assignment_iou(preds, gts):
    """Mean gt IoU under the best one-to-one assignment, by trying every assignment."""
    total = 0.0
    for image_id in {g.image_id for g in gts}:
        image_gts = [g for g in gts if g.image_id == image_id]
        image_preds = [p for p in preds if p.image_id == image_id] + [None] * len(image_gts)
        best = 0.0
        for chosen in itertools.permutations(image_preds, len(image_gts)):
            value = sum(mask_iou(g.mask, p.mask) for g, p in zip(image_gts, chosen) if p is not None)
            best = max(best, value)
        total += best
    return total / len(gts)


class TestOKS:
    def test_identical_pose_scores_one(self):
        pose = make_pose(Box(0, 0, 40, 80))
        assert oks(pose, pose, 3200.0) == pytest.approx(1.0)

    def test_single_displacement_formula(self):
        pose = make_pose(Box(0, 0, 40, 80))
        moved = list(pose)
        moved[4] = Keypoint(pose[4].x + 3.0, pose[4].y + 4.0)
        expected = (NUM_KEYPOINTS - 1 + math.exp(-25.0 / (2 * 100.0 * 0.1 ** 2))) / NUM_KEYPOINTS
        assert oks(tuple(moved), pose, 100.0, KAPPAS) == pytest.approx(expected)

    def test_unlabeled_gt_skipped_and_unlabeled_pred_scores_zero(self):
        gt = list(make_pose(Box(0, 0, 40, 80)))
        gt[0] = Keypoint.unlabeled()
        pred = list(gt)
        pred[1] = Keypoint.unlabeled()
        assert oks(tuple(pred), tuple(gt), 100.0, KAPPAS) == pytest.approx((NUM_KEYPOINTS - 2) / (NUM_KEYPOINTS - 1))

    def test_invisible_gt_still_counts(self):
        gt = make_pose(Box(0, 0, 40, 80), Visibility.LABELED_INVISIBLE)
        assert oks(shifted(gt, 50.0), gt, 100.0, KAPPAS) < 1e-6

    def test_errors(self):
        pose = make_pose(Box(0, 0, 40, 80))
        with pytest.raises(ValueError):
            oks(pose, pose, 0.0)
        with pytest.raises(ValueError):
            oks(pose, tuple(Keypoint.unlabeled() for _ in range(NUM_KEYPOINTS)), 10.0)

    def test_kappa_table(self):
        kappas = load_kappas()
        assert len(kappas) == NUM_KEYPOINTS
        assert kappas[0] == pytest.approx(0.052)


class TestKeypointAP:
    def test_perfect_predictions(self):
        gts, preds = [], []
        for i in range(4):
            pose = make_pose(Box(0, 0, 40, 60))
            gts.append(KeypointGroundTruth(f"img{i}", pose, 2400.0))
            preds.append(KeypointPrediction(f"img{i}", pose, 0.9))
        suite = keypoint_ap(preds, gts)
        assert suite.ap == pytest.approx(1.0)
        assert suite.ap50 == pytest.approx(1.0)
        assert suite.ap_m == pytest.approx(1.0)
        assert suite.ap_l is None

    def test_half_recall_example(self):
        a = make_pose(Box(0, 0, 40, 50))
        b = make_pose(Box(60, 0, 100, 50))
        gts = [KeypointGroundTruth("img", a, 2000.0), KeypointGroundTruth("img", b, 2000.0)]
        preds = [KeypointPrediction("img", a, 0.9), KeypointPrediction("img", shifted(b, 0.0, 200.0), 0.8)]
        suite = keypoint_ap(preds, gts)
        assert suite.ap == pytest.approx(51 / 101)
        assert suite.ap75 == pytest.approx(51 / 101)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        pose = make_pose(Box(0, 0, 40, 60))
        for _ in range(5):
            gts, preds, scores, matched = [], [], [], []
            for i in range(12):
                gts.append(KeypointGroundTruth(f"img{i}", pose, 2400.0))
                hit = bool(rng.random() < 0.6)
                score = float(rng.random())
                preds.append(KeypointPrediction(f"img{i}", pose if hit else shifted(pose, 300.0), score))
                scores.append(score)
                matched.append(hit)
            suite = keypoint_ap(preds, gts)
            assert suite.ap50 == pytest.approx(brute_force_ap(scores, matched, len(gts)))

    def test_three_people_four_predictions(self):
        pose = make_pose(Box(0, 0, 40, 60))
        a, b, c = pose, shifted(pose, 4.0), shifted(pose, 40.0)
        gts = [KeypointGroundTruth("img", g, 2400.0) for g in (a, b, c)]
        preds = [
            KeypointPrediction("img", shifted(a, 3.0), 0.9),  # closer to b than to a
            KeypointPrediction("img", a, 0.8),
            KeypointPrediction("img", b, 0.7),  # a and b are both taken by now
            KeypointPrediction("img", shifted(a, 200.0), 0.6),
        ]
        suite = keypoint_ap(preds, gts, kappas=KAPPAS)
        # hits at ranks 1 and 2: precision 1 up to recall 2/3, nothing beyond
        assert suite.ap50 == pytest.approx(67 / 101)
        scores, hits = greedy_oks_hits(preds, gts, 0.5)
        assert hits == [True, True, False, False]
        assert suite.ap50 == pytest.approx(brute_force_ap(scores, hits, 3))

    def test_crowded_images_match_greedy_oracle(self):
        rng = np.random.default_rng(11)
        base = make_pose(Box(0, 0, 40, 60))
        for _ in range(8):
            gts, preds = [], []
            for i in range(4):
                offsets = rng.uniform(0.0, 12.0, size=int(rng.integers(1, 4)))
                for dx in offsets:
                    gts.append(KeypointGroundTruth(f"img{i}", shifted(base, float(dx)), 2400.0))
                for _ in range(int(rng.integers(0, 5))):
                    jitter = rng.normal(0.0, rng.uniform(0.5, 6.0), size=(NUM_KEYPOINTS, 2))
                    dx = float(rng.uniform(0.0, 12.0))
                    pose = tuple(
                        Keypoint(kp.x + dx + float(jx), kp.y + float(jy)) for kp, (jx, jy) in zip(base, jitter)
                    )
                    preds.append(KeypointPrediction(f"img{i}", pose, float(rng.random())))
            suite = keypoint_ap(preds, gts, kappas=KAPPAS)
            for threshold, value in ((0.5, suite.ap50), (0.75, suite.ap75)):
                scores, hits = greedy_oks_hits(preds, gts, threshold)
                expected = brute_force_ap(scores, hits, len(gts)) if scores else 0.0
                assert value == pytest.approx(expected)

    def test_duplicates_count_as_false_positives(self):
        pose = make_pose(Box(0, 0, 40, 60))
        gts = [KeypointGroundTruth("img", pose, 2400.0)]
        preds = [KeypointPrediction("img", pose, 0.9), KeypointPrediction("img", pose, 0.8)]
        assert keypoint_ap(preds, gts).ap50 == pytest.approx(1.0)
        preds = [KeypointPrediction("img", pose, 0.8), KeypointPrediction("img", pose, 0.9)]
        assert keypoint_ap(preds, gts).ap50 == pytest.approx(1.0)

    def test_no_ground_truth(self):
        assert keypoint_ap([], []) is None

    def test_no_predictions(self):
        pose = make_pose(Box(0, 0, 40, 60))
        assert keypoint_ap([], [KeypointGroundTruth("img", pose, 2400.0)]).ap == 0.0


class TestMissRate:
    def test_bins(self):
        assert in_bin(0.65, "R") and not in_bin(0.65, "HO")
        assert in_bin(0.2, "HO") and in_bin(0.2, "R+HO")
        assert not any(in_bin(0.1, b) for b in ("R", "HO", "R+HO"))
        assert in_bin(1.0, "R")

    def test_perfect_and_empty_detectors(self):
        gts = [BoxGroundTruth(f"i{k}", Box(0, 0, 10, 20), 1.0) for k in range(5)]
        perfect = [ScoredBox(g.image_id, g.box, 0.9) for g in gts]
        assert miss_rate(perfect, gts, "R") == 0.0
        assert miss_rate([], gts, "R", num_images=5) == pytest.approx(1.0)

    def test_hand_computed_curve(self):
        gts = [BoxGroundTruth(f"i{k}", Box(0, 0, 10, 20), 1.0) for k in range(10)]
        dets = [ScoredBox(f"i{k}", Box(0, 0, 10, 20), 0.9) for k in range(5)]
        dets += [ScoredBox(f"i{k}", Box(50, 50, 60, 70), 0.8) for k in range(5)]
        dets += [ScoredBox(f"i{k}", Box(0, 0, 10, 20), 0.7) for k in range(5, 10)]
        # operating points: (0, 1), (0, .5), (.5, .5), (.5, 0)
        sampled = [0.5 if ref < 0.5 else MR_FLOOR for ref in FPPI_POINTS]
        expected = math.exp(np.mean(np.log(sampled)))
        assert miss_rate(dets, gts, "R", num_images=10) == pytest.approx(expected)

    def test_matches_threshold_enumeration(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            gts, dets = [], []
            for i in range(6):
                for _ in range(int(rng.integers(0, 3))):
                    x, y = rng.uniform(0, 80, size=2)
                    box = Box(float(x), float(y), float(x) + 10.0, float(y) + 24.0)
                    gts.append(BoxGroundTruth(f"i{i}", box, float(rng.uniform(0.15, 1.0))))
                    if rng.random() < 0.7:
                        dx, dy = (float(v) for v in rng.uniform(-3.0, 3.0, size=2))
                        moved = Box(box.x0 + dx, box.y0 + dy, box.x1 + dx, box.y1 + dy)
                        dets.append(ScoredBox(f"i{i}", moved, float(rng.random())))
                for _ in range(int(rng.integers(0, 3))):
                    x, y = rng.uniform(0, 80, size=2)
                    clutter = Box(float(x), float(y), float(x) + 10.0, float(y) + 24.0)
                    dets.append(ScoredBox(f"i{i}", clutter, float(rng.random())))
            for bin_name in ("R", "HO", "R+HO"):
                if not any(in_bin(g.visibility_ratio, bin_name) for g in gts):
                    continue
                expected = enumerated_miss_rate(dets, gts, bin_name, 6)
                assert miss_rate(dets, gts, bin_name, num_images=6) == pytest.approx(expected), (trial, bin_name)

    def test_detections_on_other_bins_are_ignored(self):
        gts = [BoxGroundTruth("img", Box(0, 0, 10, 20), 0.3), BoxGroundTruth("img", Box(40, 0, 50, 20), 1.0)]
        dets = [ScoredBox("img", Box(0, 0, 10, 20), 0.9)]
        assert miss_rate(dets, gts, "R") == pytest.approx(1.0)
        assert miss_rate(dets, gts, "HO") == 0.0

    def test_absent_bin_and_unknown_bin(self):
        gts = [BoxGroundTruth("img", Box(0, 0, 10, 20), 1.0)]
        assert miss_rate([], gts, "HO") is None
        with pytest.raises(ValueError):
            miss_rate([], gts, "XL")


class TestInstanceIoU:
    def _mask(self, rows, cols, shape=(10, 10)):
        mask = np.zeros(shape, dtype=bool)
        mask[rows, cols] = True
        return mask

    def test_one_to_one_assignment(self):
        g1 = self._mask(slice(0, 4), slice(0, 4))
        g2 = self._mask(slice(5, 10), slice(5, 10))
        gts = [LabeledMask("a", g1, Category.PERSON), LabeledMask("a", g2, Category.PERSON)]
        preds = [LabeledMask("a", g2, Category.PERSON), LabeledMask("a", g1, Category.PERSON)]
        assert instance_seg_iou(preds, gts, Category.PERSON) == pytest.approx(1.0)

    def test_unmatched_gts_count_zero(self):
        g1 = self._mask(slice(0, 4), slice(0, 4))
        g2 = self._mask(slice(5, 10), slice(5, 10))
        half = self._mask(slice(0, 4), slice(0, 2))
        gts = [LabeledMask("a", g1, Category.PERSON), LabeledMask("a", g2, Category.PERSON)]
        preds = [LabeledMask("a", half, Category.PERSON)]
        assert instance_seg_iou(preds, gts, Category.PERSON) == pytest.approx(0.25)

    def test_crossed_overlaps_prefer_best_total(self):
        row = (1, 10)
        g1 = self._mask(0, slice(4, 10), row)
        g2 = self._mask(0, slice(0, 5), row)
        p1 = self._mask(0, slice(0, 10), row)
        p2 = self._mask(0, slice(7, 10), row)
        # IoU table (gt x pred): [[0.6, 0.5], [0.5, 0.0]]
        assert [[mask_iou(g, p) for p in (p1, p2)] for g in (g1, g2)] == pytest.approx([[0.6, 0.5], [0.5, 0.0]])
        gts = [LabeledMask("a", g1, Category.PERSON), LabeledMask("a", g2, Category.PERSON)]
        preds = [LabeledMask("a", p1, Category.PERSON), LabeledMask("a", p2, Category.PERSON)]
        # taking the single best pair first would leave 0.3
        assert instance_seg_iou(preds, gts, Category.PERSON) == pytest.approx(0.5)

    def test_random_overlaps_match_exhaustive_assignment(self):
        rng = np.random.default_rng(8)

        def random_mask():
            r0, c0 = rng.integers(0, 8, size=2)
            h, w = rng.integers(2, 6, size=2)
            return self._mask(slice(int(r0), int(r0 + h)), slice(int(c0), int(c0 + w)), (12, 12))

        for _ in range(20):
            gts = [LabeledMask(f"img{i % 2}", random_mask(), Category.PERSON) for i in range(int(rng.integers(1, 5)))]
            preds = [LabeledMask(f"img{i % 2}", random_mask(), Category.PERSON) for i in range(int(rng.integers(0, 5)))]
            assert instance_seg_iou(preds, gts, Category.PERSON) == pytest.approx(best_assignment_iou(preds, gts))

    def test_categories_are_separate(self):
        g = self._mask(slice(0, 4), slice(0, 4))
        gts = [LabeledMask("a", g, Category.RIDER)]
        preds = [LabeledMask("a", g, Category.PERSON)]
        assert instance_seg_iou(preds, gts, Category.RIDER) == 0.0
        assert instance_seg_iou(preds, gts, Category.PERSON) is None


class _GroundTruthPredictor:
    """Returns the annotated pose at every requested box."""

    def __init__(self):
        self.visibility = []

    def predict_with_boxes(self, sample, instance_indices):
        out = []
        for k in instance_indices:
            inst = sample.instances[k]
            self.visibility.append(inst.visibility_ratio)
            out.append(KeypointPrediction(sample.sample_id, inst.eval_keypoints, 1.0, inst.box.area))
        return out


class TestOcclusionSweep:
    def test_oracle_predictor_keeps_full_ap(self, tiny_source_params):
        params = replace(tiny_source_params, occluder_rate=0.0, pedestrians_per_image=(1, 1))
        dataset = build_dataset(params, 3, seed=2, workers=1)
        predictor = _GroundTruthPredictor()
        sweep = occlusion_sweep(predictor, dataset, fractions=(0.2, 0.5), seeds=(0, 1))
        assert sorted(sweep) == [0.2, 0.5]
        for point in sweep.values():
            assert point.mean == pytest.approx(1.0)
            assert point.std == pytest.approx(0.0)
            assert len(point.per_seed) == 2
        assert max(predictor.visibility) < 1.0
