# src/utils/cli.py
import shutil
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, Optional

import typer
import yaml
from dotenv import load_dotenv
from rich.panel import Panel
from rich.table import Table

from src.classes.checkpoint import Checkpoint
from src.classes.core import Domain
from src.classes.errors import InconsistentStateError, MissingInputError, OccluPoseError
from src.classes.execute import Execute
from src.classes.filesystems import SPLITS, DataDirectory, FileSystem, RunDirectory, resolve_out
from src.classes.nets import ModelComponents, ModelConfig, build_components
from src.process.evaluate import PosePredictor, ablate_backbones, evaluate, load_flat_report
from src.process.synthdata import SyntheticDataset, build_dataset, derive_seed
from src.process.train import run_training, summarize_history
from src.utils.atomic_ops import atomic_writer
from src.utils.config import ConfigError, RunConfig, diff_configs, load_config, save_config
from src.utils.logs import (
    console,
    get_logger,
    print_error,
    print_info,
    print_section_header,
    print_success,
    print_warning,
    setup_logging,
)
from src.utils.optimized_executor import MODE_CONFIGS
from src.utils.plotting import plot_loss_curve, plot_occlusion_ap, save_overlay, sweep_points

app = typer.Typer(help="occlupose: occluded pedestrian pose estimation with domain adaptation")
logger = get_logger(__name__)

SMOKE_STAGE1_STEPS = 20
SMOKE_STAGE2_STEPS = 50
ABLATION_STAGE1_STEPS = 10
ABLATION_STAGE2_STEPS = 20

ConfigOption = typer.Option(None, "--config", "-c", help="Flat dotted-key YAML config")
SeedOption = typer.Option(None, "--seed", help="Base seed (data, initialization, training streams)")


def _banner(title: str, detail: str) -> None:
    console.print(Panel.fit(f"[bold cyan]occlupose[/bold cyan] - {title}\n[dim]{detail}[/dim]", border_style="cyan"))


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map pipeline errors onto the CLI exit-code contract."""
    try:
        yield
    except ConfigError as exc:
        print_error(str(exc))
        raise typer.Exit(code=2)
    except OccluPoseError as exc:
        logger.debug("command failed", exc_info=True)
        print_error(str(exc))
        raise typer.Exit(code=exc.exit_code)


def _resolve_config(config: Optional[Path], seed: Optional[int], fallback: Optional[Path] = None) -> RunConfig:
    """--config, else a config.yaml next to the outputs, else defaults; --seed wins over all."""
    if config is None and fallback is not None and fallback.exists():
        config = fallback
    cfg = load_config(config)
    return cfg.with_seed(seed) if seed is not None else cfg


def _load_split(data: DataDirectory, name: str) -> SyntheticDataset:
    return SyntheticDataset.load(data.require(name))


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides OCCLUPOSE_LOG_LEVEL"),
):
    """occlupose: two-stage multi-task pedestrian pose estimation under occlusion.

    Generates dual-distribution synthetic data, trains the detection/segmentation
    networks and the domain-adapted pose branch, evaluates, and plots.
    """
    load_dotenv()
    setup_logging(log_level)


@app.command("gen-data")
def gen_data(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Data root (default: OCCLUPOSE_OUTPUT_ROOT/data)"),
    n_train: Optional[int] = typer.Option(None, "--n-train", min=1, help="Samples per training split"),
    n_eval: Optional[int] = typer.Option(None, "--n-eval", min=1, help="Samples per evaluation split"),
    workers: Optional[int] = typer.Option(None, "--workers", min=1, help="Generation threads"),
    force: bool = typer.Option(False, "--force", help="Replace existing splits"),
):
    """Build the source/target train and eval splits."""
    with _exit_codes():
        root = out if out is not None else resolve_out(None) / "data"
        cfg = _resolve_config(config, seed)
        cfg = replace(cfg, n_train=n_train or cfg.n_train, n_eval=n_eval or cfg.n_eval)
        data = DataDirectory(root)
        if not data.is_empty() and not force:
            print_error(f"{data.base} is not empty; pass --force to regenerate")
            raise typer.Exit(code=2)
        _banner("dataset generation", f"{data.base}  seed={cfg.seed}  train={cfg.n_train}  eval={cfg.n_eval}")

        table = Table(title="splits")
        table.add_column("split")
        table.add_column("samples", justify="right")
        table.add_column("sha256")
        for index, (name, domain) in enumerate(SPLITS.items()):
            target = data.split(name)
            if target.exists():
                shutil.rmtree(target)
            params = cfg.source if domain == Domain.SOURCE else cfg.target
            n = cfg.n_train if name.endswith("train") else cfg.n_eval
            dataset = build_dataset(
                params, n, derive_seed(cfg.seed, index), reveal_pose=(name == "target_eval"), workers=workers
            )
            dataset.save(target)
            table.add_row(name, str(n), dataset.manifest["dataset_sha256"][:16])
        save_config(cfg, data.base / "config.yaml")
        console.print(table)
        print_success(f"Datasets written to {data.base}")


def _train_config(cfg: RunConfig, smoke: bool, stage1_steps, stage2_steps, beta) -> RunConfig:
    train = cfg.train
    if smoke:
        train = replace(
            train,
            stage1_steps=SMOKE_STAGE1_STEPS,
            stage2_steps=SMOKE_STAGE2_STEPS,
            checkpoint_every=25,
            prefetch_depth=MODE_CONFIGS["smoke"]["prefetch_depth"],
        )
    if stage1_steps is not None:
        train = replace(train, stage1_steps=stage1_steps)
    if stage2_steps is not None:
        train = replace(train, stage2_steps=stage2_steps)
    if beta is not None:
        train = replace(train, weights=replace(train.weights, beta=beta))
    return replace(cfg, train=train)


def _write_manifest(run: RunDirectory, cfg: RunConfig, datasets: Dict[Domain, SyntheticDataset]) -> None:
    manifest = {
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "code_version": Execute(Path(__file__).resolve().parent).code_version(),
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "curriculum": {
            "shape": cfg.train.curriculum.shape,
            "p_start": cfg.train.curriculum.p_start,
            "p_end": cfg.train.curriculum.p_end,
        },
        "datasets": {d.value: ds.manifest["dataset_sha256"] for d, ds in datasets.items()},
    }
    atomic_writer.atomic_write(run.manifest_path, yaml.safe_dump(manifest, sort_keys=False))


def _eval_sets(data: DataDirectory) -> Dict[str, SyntheticDataset]:
    found = {}
    for name in ("source_eval", "target_eval"):
        try:
            found[name] = _load_split(data, name)
        except MissingInputError as exc:
            print_warning(str(exc))
    return found


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory (default: OCCLUPOSE_OUTPUT_ROOT/runs/default)"),
    data: Optional[Path] = typer.Option(None, "--data", help="Data root written by gen-data"),
    stage1_steps: Optional[int] = typer.Option(None, "--stage1-steps", min=0),
    stage2_steps: Optional[int] = typer.Option(None, "--stage2-steps", min=0),
    beta: Optional[float] = typer.Option(None, "--beta", min=0.0, help="Domain-classifier weight; 0 disables adaptation"),
    smoke: bool = typer.Option(False, "--smoke", help="Short desk-scale budget"),
    resume: bool = typer.Option(False, "--resume", help="Continue from checkpoints/latest"),
):
    """Run both training stages and evaluate the final model."""
    with _exit_codes():
        root = resolve_out(None)
        run = RunDirectory(out if out is not None else root / "runs" / "default")
        data_dir = DataDirectory(data if data is not None else root / "data")
        cfg = _resolve_config(config, seed, run.config_path if resume else None)
        cfg = _train_config(cfg, smoke, stage1_steps, stage2_steps, beta)
        if resume:
            if not run.config_path.exists():
                raise MissingInputError(f"nothing to resume in {run.base}")
            saved = load_config(run.config_path)
            changed = diff_configs(saved, cfg)
            if changed:
                raise InconsistentStateError(f"resume config differs from {run.config_path}: {', '.join(changed)}")

        datasets = {
            Domain.SOURCE: _load_split(data_dir, "source_train"),
            Domain.TARGET: _load_split(data_dir, "target_train"),
        }
        _banner(
            "training",
            f"{run.base}  steps={cfg.train.stage1_steps}x2+{cfg.train.stage2_steps}  "
            f"lr0={cfg.train.lr0}  beta={cfg.train.weights.beta}",
        )
        if not resume:
            run.createFolder("logs")
            run.truncate_records(RunDirectory.STEPS_LOG, 0)
            run.truncate_records(RunDirectory.HISTORY, 0)
            save_config(cfg, run.config_path)
            _write_manifest(run, cfg, datasets)

        result = run_training(cfg.train, cfg.model, datasets, run_dir=run, resume=resume)
        summary = summarize_history(result.history)
        print_info(f"{int(summary['steps'])} steps, parameter hash {result.parameter_hash[:16]}")

        eval_sets = _eval_sets(data_dir)
        if eval_sets:
            report = evaluate(result.components, eval_sets, cfg.evaluation)
            report.meta = {"checkpoint": run.latest_checkpoint().name, "parameter_hash": result.parameter_hash}
            flat_path, _ = report.save(run.report_dir)
            print_info(f"report written to {flat_path}")
        print_success(f"Training finished: {run.base}")


def _restore(run: RunDirectory, model_cfg: ModelConfig, checkpoint: Optional[Path]) -> ModelComponents:
    ckpt = Checkpoint.load(checkpoint if checkpoint is not None else run.latest_checkpoint())
    components = build_components(model_cfg, 0)
    ckpt.restore(components)
    return components


@app.command("eval")
def eval_cmd(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory holding checkpoints"),
    data: Optional[Path] = typer.Option(None, "--data", help="Data root written by gen-data"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Checkpoint file (default: checkpoints/latest)"),
    occlusion_sweep: bool = typer.Option(False, "--occlusion-sweep", help="AP at 20%..70% synthetic occlusion"),
    ablate_backbone: bool = typer.Option(False, "--ablate-backbone", help="Train and score small/medium/large encoders"),
):
    """Score a checkpoint on the evaluation splits."""
    with _exit_codes():
        root = resolve_out(None)
        run = RunDirectory(out if out is not None else root / "runs" / "default")
        data_dir = DataDirectory(data if data is not None else root / "data")
        cfg = _resolve_config(config, seed, run.config_path)
        if occlusion_sweep:
            cfg = replace(cfg, evaluation=replace(cfg.evaluation, occlusion_sweep=True))
        _banner("evaluation", f"{run.base}")

        components = _restore(run, cfg.model, checkpoint)
        eval_sets = {name: _load_split(data_dir, name) for name in ("source_eval", "target_eval")}
        report = evaluate(components, eval_sets, cfg.evaluation)

        if ablate_backbone:
            print_section_header("Backbone ablation", "🧪")
            datasets = {
                Domain.SOURCE: _load_split(data_dir, "source_train"),
                Domain.TARGET: _load_split(data_dir, "target_train"),
            }
            budget = replace(
                cfg.train, stage1_steps=ABLATION_STAGE1_STEPS, stage2_steps=ABLATION_STAGE2_STEPS
            )
            report.ablation = ablate_backbones(
                lambda model_cfg: run_training(budget, model_cfg, datasets).components,
                cfg.model,
                eval_sets["target_eval"],
                cfg.evaluation,
            )
        report.meta = {"checkpoint": str(checkpoint or run.latest_checkpoint().name)}
        flat_path, md_path = report.save(run.report_dir)
        console.print(report.to_markdown())
        print_success(f"Report written to {flat_path} and {md_path}")


@app.command()
def plot(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Run directory"),
    data: Optional[Path] = typer.Option(None, "--data", help="Data root for overlays"),
    overlays: int = typer.Option(4, "--overlays", min=0, help="Number of overlay images"),
):
    """Loss curve, AP-vs-occlusion curve and skeleton overlays."""
    with _exit_codes():
        root = resolve_out(None)
        run = RunDirectory(out if out is not None else root / "runs" / "default")
        records = run.read_records(RunDirectory.STEPS_LOG)
        if not records:
            raise MissingInputError(f"no step log at {run.steps_log}")
        cfg = _resolve_config(config, seed, run.config_path)
        _banner("plots", f"{run.base}")

        path = plot_loss_curve(records, run.plots_dir / "loss_curve.png")
        print_info(f"{path.name}: {len(records)} steps")

        report_path = run.report_dir / "eval.yaml"
        if report_path.exists() and sweep_points(load_flat_report(report_path)):
            plot_occlusion_ap(load_flat_report(report_path), run.plots_dir / "occlusion_ap.png")
            print_info("occlusion_ap.png")

        if overlays:
            data_dir = DataDirectory(data if data is not None else root / "data")
            components = _restore(run, cfg.model, None)
            predictor = PosePredictor(components, cfg.evaluation.keypoint_threshold)
            split = _load_split(data_dir, "target_eval")
            fs = FileSystem(run.plots_dir)
            target = fs.createFolder("overlays")
            for sample in list(split)[:overlays]:
                save_overlay(sample, predictor.predict(sample).poses, target)
            print_info(f"{min(overlays, len(split))} overlays in {target}")
        print_success(f"Plots written to {run.plots_dir}")
