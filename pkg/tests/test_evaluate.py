"""
Tests for inference, split evaluation, the report files and trained-model trends.
"""
from dataclasses import replace

import pytest

from src.classes.core import NUM_KEYPOINTS, Domain
from src.classes.nets import ModelConfig, build_components
from src.process.evaluate import (
    AblationRow,
    EvalOptions,
    EvalReport,
    PosePredictor,
    SplitMetrics,
    ablate_backbones,
    evaluate,
    load_flat_report,
)
from src.process.losses import LossWeights
from src.process.metrics import APSuite, SweepPoint
from src.process.synthdata import SOURCE_PRESET, SWEEP_FRACTIONS, TARGET_PRESET, build_dataset
from src.process.train import TrainConfig, run_training


@pytest.fixture
def eval_sets(tiny_source_params, tiny_target_params):
    return {
        "source_eval": build_dataset(tiny_source_params, 2, seed=21, workers=1),
        "target_eval": build_dataset(tiny_target_params, 2, seed=22, reveal_pose=True, workers=1),
    }


class TestPredictor:
    def test_predictions_are_well_formed(self, tiny_model_cfg, eval_sets):
        # a low score threshold makes the untrained detector emit boxes
        cfg = replace(tiny_model_cfg, score_threshold=0.001)
        predictor = PosePredictor(build_components(cfg, seed=0))
        sample = eval_sets["target_eval"][0]
        prediction = predictor.predict(sample)
        assert len(prediction.masks) == len(prediction.detections)
        scores = [d.score for d in prediction.detections]
        assert scores == sorted(scores, reverse=True)
        for pose in prediction.poses:
            assert len(pose.keypoints) == NUM_KEYPOINTS
            assert 0.0 <= pose.score <= 1.0
        for mask in prediction.masks:
            assert mask.mask.shape == (sample.height, sample.width)

    def test_pose_at_ground_truth_boxes(self, tiny_model_cfg, eval_sets):
        predictor = PosePredictor(build_components(tiny_model_cfg, seed=0))
        sample = eval_sets["source_eval"][0]
        indices = list(range(len(sample.instances)))
        predictions = predictor.predict_with_boxes(sample, indices)
        assert len(predictions) <= len(indices)
        for p in predictions:
            assert p.image_id == sample.sample_id
            assert len(p.keypoints) == NUM_KEYPOINTS


class TestEvaluate:
    def test_report_has_every_metric(self, tmp_path, tiny_model_cfg, eval_sets):
        options = EvalOptions(occlusion_sweep=True, sweep_fractions=(0.2, 0.4), sweep_seeds=(0,))
        report = evaluate(build_components(tiny_model_cfg, seed=0), eval_sets, options)
        flat = report.to_flat()
        for split in eval_sets:
            assert flat[f"{split}.n_samples"] == 2
            for key in ("AP", "AP50", "AP75", "AP_M", "AP_L", "MR.R", "MR.HO", "MR.R+HO", "IoU.person", "IoU.rider"):
                assert f"{split}.{key}" in flat
        flat_path, md_path = report.save(tmp_path)
        loaded = load_flat_report(flat_path)
        assert loaded == flat
        assert "Keypoint AP" in md_path.read_text()

    def test_unknown_sweep_split(self, tiny_model_cfg, eval_sets):
        options = EvalOptions(occlusion_sweep=True, sweep_split="nowhere")
        with pytest.raises(KeyError):
            evaluate(build_components(tiny_model_cfg, seed=0), eval_sets, options)

    def test_ablation_covers_every_backbone(self, tiny_model_cfg, eval_sets):
        trained = []

        def train_fn(model_cfg):
            trained.append(model_cfg.backbone_size)
            return build_components(model_cfg, seed=0)

        rows = ablate_backbones(train_fn, tiny_model_cfg, eval_sets["target_eval"])
        assert trained == ["small", "medium", "large"]
        assert [row.backbone_size for row in rows] == trained


class TestReport:
    def test_flat_keys_and_markdown(self):
        suite = APSuite(0.5, 0.75, 0.4, None, 0.6)
        report = EvalReport(
            sweep={0.2: SweepPoint(0.2, 0.4, 0.05, (0.35, 0.45)), 0.7: SweepPoint(0.7, 0.1, 0.0, (0.1,))},
            meta={"checkpoint": "step_10.ckpt"},
        )
        report.splits["source_eval"] = SplitMetrics("source_eval", 3, suite, {"R": 0.2, "HO": None, "R+HO": 0.3}, {"person": 0.5, "rider": None})
        report.ablation.append(AblationRow("small", suite))
        flat = report.to_flat()
        assert flat["sweep.20.mean"] == 0.4 and flat["sweep.70.std"] == 0.0
        assert flat["source_eval.AP_M"] is None
        assert flat["ablation.small.AP"] == 0.5
        assert flat["meta.checkpoint"] == "step_10.ckpt"
        text = report.to_markdown()
        assert "| source_eval | 0.500 | 0.750 | 0.400 | - | 0.600 |" in text
        assert "20%" in text and "70%" in text
        assert "backbone ablation" in text.lower()

    def test_absent_keypoints_render_as_dashes(self):
        report = EvalReport()
        report.splits["target_eval"] = SplitMetrics("target_eval", 1, None, {}, {})
        assert report.to_flat()["target_eval.AP"] is None
        assert "| target_eval | - | - | - | - | - |" in report.to_markdown()


DESK_MODEL = ModelConfig(fpn_levels=2, fpn_channels=16, heatmap_stride=2, roi_size=8, pose_channels=32, domain_hidden=32)
TREND_SEEDS = (0, 1, 2)


def _declines(means, slack=0.01):
    """Non-increasing, allowing one adjacent rise of at most ``slack``."""
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    return len(rises) <= 1 and all(r <= slack for r in rises)


@pytest.fixture(scope="module")
def desk_splits():
    source = replace(SOURCE_PRESET, image_size=(64, 64), pedestrian_height=(28.0, 52.0), pedestrians_per_image=(1, 2))
    target = replace(TARGET_PRESET, image_size=(64, 64), pedestrian_height=(28.0, 52.0), pedestrians_per_image=(1, 2))
    train = {
        Domain.SOURCE: build_dataset(source, 200, seed=101, workers=1),
        Domain.TARGET: build_dataset(target, 200, seed=102, workers=1),
    }
    eval_sets = {
        "source_eval": build_dataset(replace(source, occluder_rate=0.0), 40, seed=103, workers=1),
        "target_eval": build_dataset(target, 40, seed=104, reveal_pose=True, workers=1),
    }
    return train, eval_sets


def _train(splits, seed, beta=1.0):
    cfg = TrainConfig(stage1_steps=300, stage2_steps=2000, seed=seed, weights=LossWeights(beta=beta))
    return run_training(cfg, DESK_MODEL, splits[0]).components


@pytest.mark.slow
class TestTrends:
    def test_ap_falls_as_occlusion_grows(self, desk_splits):
        options = EvalOptions(occlusion_sweep=True, sweep_fractions=SWEEP_FRACTIONS, sweep_seeds=(0, 1, 2))
        declining = 0
        for seed in TREND_SEEDS:
            report = evaluate(_train(desk_splits, seed), {"source_eval": desk_splits[1]["source_eval"]}, options)
            means = [report.sweep[f].mean for f in SWEEP_FRACTIONS]
            declining += _declines(means)
        assert declining >= 2

    def test_domain_alignment_helps_target_ap(self, desk_splits):
        target_eval = {"target_eval": desk_splits[1]["target_eval"]}
        wins = 0
        for seed in TREND_SEEDS:
            adapted = evaluate(_train(desk_splits, seed, beta=1.0), target_eval).splits["target_eval"].keypoints
            plain = evaluate(_train(desk_splits, seed, beta=0.0), target_eval).splits["target_eval"].keypoints
            wins += adapted.ap > plain.ap
        assert wins >= 2
