"""
Command-line flow: gen-data -> train -> eval -> plot, and the exit-code contract.
"""
import pytest
from typer.testing import CliRunner

from src.classes.filesystems import RunDirectory
from src.process.evaluate import load_flat_report
from src.utils.cli import app

runner = CliRunner()

TINY_CONFIG = """\
seed: 3
n_train: 2
n_eval: 2
source.image_size: [64, 64]
source.pedestrian_height: [28.0, 52.0]
source.pedestrians_per_image: [1, 2]
target.image_size: [64, 64]
target.pedestrian_height: [28.0, 52.0]
target.pedestrians_per_image: [1, 2]
model.fpn_levels: 2
model.fpn_channels: 8
model.heatmap_stride: 2
model.roi_size: 4
model.pose_channels: 8
model.domain_hidden: 8
train.stage1_steps: 1
train.stage2_steps: 2
train.checkpoint_every: 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("OCCLUPOSE_OUTPUT_ROOT", str(tmp_path / "outputs"))
    return tmp_path / "outputs"


def gen_data(config, out, *extra):
    return runner.invoke(app, ["gen-data", "--config", str(config), "--out", str(out), "--workers", "1", *extra])


class TestGenData:
    def test_writes_every_split(self, tmp_path, tiny_config):
        data = tmp_path / "data"
        result = gen_data(tiny_config, data)
        assert result.exit_code == 0, result.output
        for split in ("source_train", "source_eval", "target_train", "target_eval"):
            assert (data / split / "manifest.yaml").exists()
        assert (data / "config.yaml").exists()

    def test_refuses_non_empty_directory_without_force(self, tmp_path, tiny_config):
        data = tmp_path / "data"
        assert gen_data(tiny_config, data).exit_code == 0
        assert gen_data(tiny_config, data).exit_code == 2
        assert gen_data(tiny_config, data, "--force").exit_code == 0

    def test_default_root_comes_from_environment(self, tiny_config, output_root):
        result = runner.invoke(app, ["gen-data", "--config", str(tiny_config), "--workers", "1"])
        assert result.exit_code == 0, result.output
        assert (output_root / "data" / "target_eval" / "manifest.yaml").exists()

    def test_bad_arguments_exit_2(self, tmp_path, tiny_config):
        assert gen_data(tiny_config, tmp_path / "data", "--n-train", "0").exit_code == 2
        (tmp_path / "bad.yaml").write_text("train.learning_rate: 0.1\n")
        assert gen_data(tmp_path / "bad.yaml", tmp_path / "other").exit_code == 2


class TestMissingInputs:
    def test_train_without_data(self, tmp_path, tiny_config):
        result = runner.invoke(
            app, ["train", "--config", str(tiny_config), "--out", str(tmp_path / "run"), "--data", str(tmp_path / "none")]
        )
        assert result.exit_code == 3

    def test_eval_without_checkpoint(self, tmp_path, tiny_config):
        result = runner.invoke(app, ["eval", "--config", str(tiny_config), "--out", str(tmp_path / "run")])
        assert result.exit_code == 3

    def test_plot_without_step_log(self, tmp_path):
        assert runner.invoke(app, ["plot", "--out", str(tmp_path / "run")]).exit_code == 3

    def test_resume_without_run(self, tmp_path, tiny_config):
        result = runner.invoke(app, ["train", "--config", str(tiny_config), "--out", str(tmp_path / "run"), "--resume"])
        assert result.exit_code == 3

    def test_missing_config_file(self, tmp_path):
        assert gen_data(tmp_path / "absent.yaml", tmp_path / "data").exit_code == 3


class TestPipeline:
    def test_train_eval_plot(self, tmp_path, tiny_config):
        data, run_path = tmp_path / "data", tmp_path / "run"
        assert gen_data(tiny_config, data).exit_code == 0

        result = runner.invoke(app, ["train", "--config", str(tiny_config), "--out", str(run_path), "--data", str(data)])
        assert result.exit_code == 0, result.output
        run = RunDirectory(run_path)
        assert run.config_path.exists() and run.manifest_path.exists()
        assert run.latest_checkpoint().name == "step_4.ckpt"
        assert len(run.read_records(RunDirectory.STEPS_LOG)) == 4
        assert (run.report_dir / "eval.yaml").exists()

        result = runner.invoke(app, ["eval", "--out", str(run_path), "--data", str(data)])
        assert result.exit_code == 0, result.output
        flat = load_flat_report(run.report_dir / "eval.yaml")
        assert flat["target_eval.n_samples"] == 2
        assert flat["meta.checkpoint"] == "step_4.ckpt"

        result = runner.invoke(app, ["plot", "--out", str(run_path), "--data", str(data), "--overlays", "2"])
        assert result.exit_code == 0, result.output
        assert (run.plots_dir / "loss_curve.png").exists()
        assert len(list((run.plots_dir / "overlays").glob("*.png"))) == 2

    def test_resume_with_changed_config_exits_4(self, tmp_path, tiny_config):
        data, run_path = tmp_path / "data", tmp_path / "run"
        assert gen_data(tiny_config, data).exit_code == 0
        base = ["train", "--config", str(tiny_config), "--out", str(run_path), "--data", str(data)]
        assert runner.invoke(app, base).exit_code == 0
        assert runner.invoke(app, [*base, "--resume"]).exit_code == 0
        assert runner.invoke(app, [*base, "--resume", "--stage2-steps", "3"]).exit_code == 4
