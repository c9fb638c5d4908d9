"""
Tests for the loss terms and their weighted total.
"""
import math
import warnings

import numpy as np
import pytest
import torch

from conftest import make_sample
from src.classes.core import NUM_KEYPOINTS, Domain, Visibility
from src.classes.nets import DetectionOutputs, encode_detection_targets
from src.process.losses import (
    EPS,
    LossBreakdown,
    LossParts,
    LossWeights,
    det_loss,
    det_loss_terms,
    domain_loss,
    pose_loss,
    seg_loss,
    total_loss,
)


class TestSegLoss:
    def test_matches_hand_computed_bce(self):
        pred = torch.tensor([[0.9, 0.2], [0.5, 0.7]])
        gt = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        expected = -(math.log(0.9) + math.log(0.8) + math.log(0.5) + math.log(0.3)) / 4
        assert float(seg_loss(pred, gt)) == pytest.approx(expected, rel=1e-5)

    def test_clipping_keeps_it_finite(self):
        loss = seg_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
        assert math.isfinite(float(loss))
        assert float(loss) == pytest.approx(-math.log(EPS), rel=2e-2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            seg_loss(torch.zeros(2, 2), torch.zeros(2, 3))


class TestDetLoss:
    def _outputs(self, h=16, w=16):
        return DetectionOutputs(torch.zeros(1, 1, h, w), torch.zeros(1, 2, h, w), torch.zeros(1, 4, h, w))

    def test_perfect_prediction_has_small_box_and_category_terms(self):
        sample = make_sample(boxes=((4.0, 4.0, 12.0, 28.0),), size=(32, 32))
        targets = encode_detection_targets(sample.instances, (16, 16), stride=2)
        objectness = torch.where(targets.positive, 20.0, -20.0)[None, None]
        category = torch.zeros(1, 2, 16, 16)
        category[0, 0] = 20.0
        terms = det_loss_terms(DetectionOutputs(objectness, category, targets.box[None]), targets)
        assert float(terms.box) == pytest.approx(0.0, abs=1e-6)
        assert float(terms.category) == pytest.approx(0.0, abs=1e-6)
        assert float(terms.classification) < 1e-3

    def test_normalized_by_positive_count(self):
        sample = make_sample(boxes=((4.0, 4.0, 12.0, 28.0), (18.0, 2.0, 30.0, 30.0)), size=(32, 32))
        targets = encode_detection_targets(sample.instances, (16, 16), stride=2)
        terms = det_loss_terms(self._outputs(), targets)
        # category logits are all zero: cross-entropy is log 2 per positive, averaged
        assert targets.num_positive == 2
        assert float(terms.category) == pytest.approx(math.log(2.0), rel=1e-5)

    def test_no_positives_warns_and_stays_finite(self, caplog):
        targets = encode_detection_targets((), (16, 16), stride=2)
        with caplog.at_level("WARNING", logger="occlupose"):
            loss = det_loss(self._outputs(), targets)
        assert math.isfinite(float(loss))
        assert float(loss) > 0.0
        assert "no positive" in caplog.text


class TestPoseLoss:
    def test_excludes_not_labeled_channels(self):
        pred = torch.zeros(NUM_KEYPOINTS, 4, 4)
        target = torch.zeros(NUM_KEYPOINTS, 4, 4)
        target[0] = 1.0
        vis = [Visibility.NOT_LABELED] + [Visibility.LABELED_VISIBLE] * (NUM_KEYPOINTS - 1)
        assert float(pose_loss(pred, target, vis)) == 0.0
        vis[0] = Visibility.LABELED_INVISIBLE
        assert float(pose_loss(pred, target, vis)) == pytest.approx(1.0 / NUM_KEYPOINTS)

    def test_all_unlabeled_is_zero(self, caplog):
        pred = torch.rand(NUM_KEYPOINTS, 4, 4, requires_grad=True)
        with caplog.at_level("WARNING", logger="occlupose"):
            loss = pose_loss(pred, torch.zeros(NUM_KEYPOINTS, 4, 4), [Visibility.NOT_LABELED] * NUM_KEYPOINTS)
        assert float(loss) == 0.0
        loss.backward()
        assert "not-labeled" in caplog.text

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            pose_loss(torch.zeros(NUM_KEYPOINTS, 4, 4), torch.zeros(NUM_KEYPOINTS, 8, 8), [2] * NUM_KEYPOINTS)
        with pytest.raises(ValueError):
            pose_loss(torch.zeros(NUM_KEYPOINTS, 4, 4), torch.zeros(NUM_KEYPOINTS, 4, 4), [2] * 3)


class TestDomainLoss:
    def test_labels(self):
        p = torch.tensor(0.8)
        assert float(domain_loss(p, Domain.SOURCE)) == pytest.approx(-math.log(0.8), rel=1e-5)
        assert float(domain_loss(p, Domain.TARGET)) == pytest.approx(-math.log(0.2), rel=1e-5)

    def test_chance_level(self):
        assert float(domain_loss(torch.tensor(0.5), Domain.SOURCE)) == pytest.approx(math.log(2.0), rel=1e-6)


class TestTotalLoss:
    def test_weighted_sum(self):
        parts = LossParts(det_c=1.0, det_m=2.0, seg_c=3.0, seg_m=4.0, dc=5.0, pe=6.0)
        weights = LossWeights(alpha=0.5, beta=2.0, gamma=3.0)
        assert total_loss(parts, weights) == pytest.approx(1 + 2 + 0.5 * 7 + 2 * 5 + 3 * 6)

    def test_beta_zero_removes_domain_term(self):
        parts = LossParts(det_m=1.0, dc=100.0)
        assert total_loss(parts, LossWeights(beta=0.0)) == pytest.approx(1.0)

    def test_zero_weight_term_gets_no_gradient(self):
        det = torch.tensor(1.0, requires_grad=True)
        pe = torch.tensor(4.0, requires_grad=True)
        total_loss(LossParts(det_m=det * 2.0, pe=pe * 3.0), LossWeights(gamma=0.0)).backward()
        assert float(det.grad) == 2.0
        assert pe.grad is None

    def test_rejects_non_finite_and_negative_terms(self):
        with pytest.raises(ValueError, match="pe"):
            total_loss(LossParts(pe=float("nan")))
        with pytest.raises(ValueError, match="seg_c"):
            total_loss(LossParts(seg_c=torch.tensor(-1.0)))

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)
        with pytest.raises(ValueError):
            LossWeights(gamma=float("inf"))

    def test_breakdown_record(self):
        parts = LossParts(det_m=torch.tensor(1.5), pe=0.25)
        record = LossBreakdown.from_parts(parts, 1.75).to_record()
        assert record["det_m"] == 1.5 and record["pe"] == 0.25 and record["total"] == 1.75
        assert set(record) == {"det_c", "det_m", "seg_c", "seg_m", "dc", "pe", "total"}
        assert np.isclose(sum(v for k, v in record.items() if k != "total"), record["total"])

    def test_breakdown_of_live_graph_is_silent(self):
        w = torch.tensor(2.0, requires_grad=True)
        parts = LossParts(det_m=w * 1.5, pe=w * 0.25)
        total = total_loss(parts)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            record = LossBreakdown.from_parts(parts, total).to_record()
        assert record["det_m"] == 3.0 and record["total"] == 3.5
        total.backward()
        assert float(w.grad) == pytest.approx(1.75)
