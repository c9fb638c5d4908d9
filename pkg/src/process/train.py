# src/process/train.py
"""
Two-stage training.

Stage 1 pretrains each distribution-specific detection/segmentation network
on its own data. Stage 2 alternates source and target samples: masked
instance features feed the pose encoder, the domain classifier plays against
it through gradient reversal, and the pose decoder learns from source
samples only. Global step numbers run across both stages; everything random
derives from counter seeds so a resumed run replays the same trajectory.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

from src.classes.checkpoint import Checkpoint
from src.classes.core import Box, Domain, Instance, Sample, flip_keypoints, render_heatmaps, to_roi_frame
from src.classes.filesystems import RunDirectory
from src.classes.nets import (
    COMPONENT_NAMES,
    ModelComponents,
    ModelConfig,
    PoseEncoder,
    build_components,
    domain_classify,
    encode_detection_targets,
    grad_reverse,
    image_tensor,
    parameter_hash,
    roi_extract_masked,
)
from src.process.losses import LossBreakdown, LossParts, LossWeights, det_loss, domain_loss, pose_loss, seg_loss, total_loss
from src.process.synthdata import DatasetLoader, derive_seed
from src.utils.logs import get_logger
from src.utils.optimized_executor import Prefetcher

logger = get_logger(__name__)

STAGE1_SOURCE = "stage1_source"
STAGE1_TARGET = "stage1_target"
STAGE2 = "stage2"

# counter-seed streams
_ORDER_STREAM = 1
_AUGMENT_STREAM = 2
_CURRICULUM_STREAM = 3


@dataclass(frozen=True)
class Curriculum:
    p_start: float = 0.0
    p_end: float = 0.5
    shape: str = "linear"

    def __post_init__(self) -> None:
        if self.shape != "linear":
            raise ValueError(f"curriculum shape must be 'linear', got {self.shape!r}")
        if not 0.0 <= self.p_start <= self.p_end < 1.0:
            raise ValueError(f"curriculum needs 0 <= p_start <= p_end < 1, got ({self.p_start}, {self.p_end})")


@dataclass(frozen=True)
class AugmentationToggles:
    flip: bool = True
    blur: bool = True
    brightness: bool = True


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    decay_every: int = 1500
    decay_factor: float = 10.0
    batch_size: int = 1
    stage1_steps: int = 200
    stage2_steps: int = 400
    curriculum: Curriculum = field(default_factory=Curriculum)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    augmentation: AugmentationToggles = field(default_factory=AugmentationToggles)
    checkpoint_every: int = 100
    prefetch_depth: int = 2

    def __post_init__(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size != 1:
            raise ValueError(f"batch_size must be 1, got {self.batch_size}")
        if self.decay_every <= 0 or self.decay_factor <= 0:
            raise ValueError("decay_every and decay_factor must be positive")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("stage step counts must be >= 0")
        if self.checkpoint_every <= 0:
            raise ValueError(f"checkpoint_every must be positive, got {self.checkpoint_every}")

    @property
    def total_steps(self) -> int:
        return 2 * self.stage1_steps + self.stage2_steps

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class StepReport:
    step: int
    stage: str
    domain: Domain
    losses: LossBreakdown
    lr: float
    mask_fraction: float
    wall_time: float
    sample_id: str = ""
    skipped: bool = False

    def to_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            "step": self.step,
            "stage": self.stage,
            "domain": self.domain.value,
            "sample_id": self.sample_id,
            "lr": self.lr,
            "mask_fraction": self.mask_fraction,
            "wall_time": self.wall_time,
            "skipped": self.skipped,
        }
        record.update({f"loss.{k}": v for k, v in self.losses.to_record().items()})
        return record


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return cfg.lr0 / cfg.decay_factor ** (step // cfg.decay_every)


def mask_schedule(step: int, total: int, p_start: float, p_end: float) -> float:
    if not 0 <= step <= max(total, 0):
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0 or step == 0:
        return p_start
    if step == total:
        return p_end
    return p_start + (p_end - p_start) * step / total


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    blur_sigma: float = 0.0
    brightness: float = 1.0


def draw_augmentation(seed: int, toggles: AugmentationToggles = AugmentationToggles()) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    sigma = float(rng.uniform(0.0, 1.5))
    brightness = float(rng.uniform(0.8, 1.2))
    return AugmentParams(
        flip=flip and toggles.flip,
        blur_sigma=sigma if toggles.blur else 0.0,
        brightness=brightness if toggles.brightness else 1.0,
    )


def _flip_instance(inst: Instance, width: int) -> Instance:
    box = inst.box
    return inst.with_updates(
        box=Box(width - box.x1, box.y0, width - box.x0, box.y1),
        mask=np.ascontiguousarray(inst.mask[:, ::-1]),
        keypoints=flip_keypoints(inst.keypoints, width) if inst.keypoints is not None else None,
        reference_keypoints=(
            flip_keypoints(inst.reference_keypoints, width) if inst.reference_keypoints is not None else None
        ),
    )


def apply_augmentation(sample: Sample, params: AugmentParams) -> Sample:
    image = sample.image
    instances = sample.instances
    if params.flip:
        image = np.ascontiguousarray(image[:, ::-1])
        instances = tuple(_flip_instance(inst, sample.width) for inst in instances)
    if params.blur_sigma > 0:
        image = cv2.GaussianBlur(image, (0, 0), sigmaX=params.blur_sigma, borderType=cv2.BORDER_REFLECT)
    if params.brightness != 1.0:
        image = np.clip(image * np.float32(params.brightness), 0.0, 1.0)
    if image is sample.image:
        return sample
    return sample.with_updates(image=image, instances=instances)


def augment(sample: Sample, seed: int, toggles: AugmentationToggles = AugmentationToggles()) -> Sample:
    return apply_augmentation(sample, draw_augmentation(seed, toggles))


# ---------------------------------------------------------------- step planning


@dataclass(frozen=True)
class StagePlan:
    name: str
    start: int
    steps: int

    @property
    def stop(self) -> int:
        return self.start + self.steps


def stage_plan(cfg: TrainConfig) -> Tuple[StagePlan, ...]:
    s1 = cfg.stage1_steps
    return (
        StagePlan(STAGE1_SOURCE, 0, s1),
        StagePlan(STAGE1_TARGET, s1, s1),
        StagePlan(STAGE2, 2 * s1, cfg.stage2_steps),
    )


def locate(step: int, cfg: TrainConfig) -> Tuple[StagePlan, int]:
    for plan in stage_plan(cfg):
        if plan.start <= step < plan.stop:
            return plan, step - plan.start
    raise ValueError(f"step {step} is outside the run (0..{cfg.total_steps - 1})")


def stage_domain(stage: str, local_step: int) -> Domain:
    if stage == STAGE1_SOURCE:
        return Domain.SOURCE
    if stage == STAGE1_TARGET:
        return Domain.TARGET
    return Domain.SOURCE if local_step % 2 == 0 else Domain.TARGET


def sample_index(seed: int, stream_step: int, n: int, domain: Domain) -> int:
    """Epoch-wise permutation drawn from (seed, domain, epoch)."""
    epoch, offset = divmod(stream_step, n)
    salt = 0 if domain == Domain.SOURCE else 1
    rng = np.random.default_rng(derive_seed(derive_seed(seed, _ORDER_STREAM * 2 + salt), epoch))
    return int(rng.permutation(n)[offset])


@dataclass(frozen=True)
class PreparedStep:
    step: int
    stage: str
    local_step: int
    domain: Domain
    sample: Sample
    mask_fraction: float


def prepare_step(step: int, cfg: TrainConfig, datasets: Mapping[Domain, DatasetLoader]) -> PreparedStep:
    plan, local = locate(step, cfg)
    domain = stage_domain(plan.name, local)
    stream_step = local // 2 if plan.name == STAGE2 else local
    dataset = datasets[domain]
    raw = dataset[sample_index(cfg.seed, stream_step, len(dataset), domain)]
    sample = augment(raw, derive_seed(derive_seed(cfg.seed, _AUGMENT_STREAM), step), cfg.augmentation)
    fraction = 0.0
    if plan.name == STAGE2:
        fraction = mask_schedule(local, cfg.stage2_steps, cfg.curriculum.p_start, cfg.curriculum.p_end)
    return PreparedStep(step, plan.name, local, domain, sample, fraction)


# ---------------------------------------------------------------- losses per step


def category_targets(sample: Sample, num_categories: int) -> torch.Tensor:
    """1 x K x H x W union of instance masks per category."""
    target = np.zeros((1, num_categories, sample.height, sample.width), dtype=np.float32)
    for inst in sample.instances:
        target[0, inst.category.index][inst.mask] = 1.0
    return torch.from_numpy(target)


def mtl_losses(components: ModelComponents, sample: Sample) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
    """(L_det, L_seg, pyramid) for the branch matching the sample's domain."""
    cfg = components.cfg
    encoder, detector, segmenter = components.branch(sample.domain)
    pyramid = encoder(image_tensor(sample.image))
    grid = tuple(pyramid[cfg.feature_level].shape[-2:])
    targets = encode_detection_targets(sample.instances, grid, cfg.heatmap_stride)
    det = det_loss(detector(pyramid), targets)
    seg = seg_loss(torch.sigmoid(segmenter(pyramid)), category_targets(sample, cfg.num_categories))
    return det, seg, pyramid


def curriculum_block(values: torch.Tensor, fraction: float, rng: np.random.Generator) -> torch.Tensor:
    """Zero a random square block covering ``fraction`` of the r x r feature cells."""
    r = values.shape[-1]
    side = int(round(math.sqrt(fraction) * r))
    if side <= 0:
        return values
    side = min(side, r)
    y0 = int(rng.integers(0, r - side + 1))
    x0 = int(rng.integers(0, r - side + 1))
    keep = torch.ones_like(values)
    keep[..., y0:y0 + side, x0:x0 + side] = 0.0
    return values * keep


def _branch_parts(domain: Domain, det: torch.Tensor, seg: torch.Tensor) -> Dict[str, torch.Tensor]:
    if domain == Domain.SOURCE:
        return {"det_m": det, "seg_m": seg}
    return {"det_c": det, "seg_c": seg}


def compute_stage2_losses(
    sample: Sample,
    components: ModelComponents,
    weights: LossWeights,
    mask_fraction: float,
    rng: np.random.Generator,
    sigma: Optional[float] = None,
) -> Tuple[LossParts, int]:
    """
    Loss parts for one stage-2 sample and the number of instances that reached the pose branch.
    The pose term only exists for source samples; the domain term only when beta > 0.
    """
    cfg = components.cfg
    sigma = cfg.heatmap_sigma if sigma is None else sigma
    det, seg, pyramid = mtl_losses(components, sample)
    fmap = pyramid[cfg.feature_level][0]
    size = 2 * cfg.roi_size
    dc_terms: List[torch.Tensor] = []
    pe_terms: List[torch.Tensor] = []
    reached = 0
    for k, inst in enumerate(sample.instances):
        try:
            feat = roi_extract_masked(
                fmap, inst.box, inst.mask, cfg.roi_size, cfg.heatmap_stride, (sample.sample_id, k, sample.domain)
            )
        except ValueError as exc:
            logger.debug(f"{sample.sample_id}: instance {k} skipped ({exc})")
            continue
        reached += 1
        hidden = components.pose_enc(curriculum_block(feat.values, mask_fraction, rng).unsqueeze(0))
        if weights.beta > 0:
            embedding = PoseEncoder.embed(hidden)
            if cfg.adversarial:
                embedding = grad_reverse(embedding, cfg.grl_lambda)
            dc_terms.append(domain_loss(domain_classify(components.dom_cls, embedding), sample.domain))
        if sample.domain == Domain.SOURCE:
            target = render_heatmaps(to_roi_frame(inst.keypoints, inst.box, size), (size, size), stride=1, sigma=sigma)
            pe_terms.append(pose_loss(components.pose_dec(hidden)[0], target, [kp.visibility for kp in inst.keypoints]))
    parts = LossParts(**_branch_parts(sample.domain, det, seg))
    if dc_terms:
        parts.dc = torch.stack(dc_terms).mean()
    if pe_terms:
        parts.pe = torch.stack(pe_terms).mean()
    return parts, reached


# ---------------------------------------------------------------- optimizers and steps


def stage_components(stage: str, weights: LossWeights) -> Tuple[str, ...]:
    if stage == STAGE1_SOURCE:
        return ("enc_m", "det_m", "seg_m")
    if stage == STAGE1_TARGET:
        return ("enc_c", "det_c", "seg_c")
    if weights.beta <= 0:
        return tuple(name for name in COMPONENT_NAMES if name != "dom_cls")
    return COMPONENT_NAMES


def make_optimizer(components: ModelComponents, stage: str, cfg: TrainConfig) -> torch.optim.SGD:
    params = list(components.parameters_of(stage_components(stage, cfg.weights)))
    return torch.optim.SGD(params, lr=cfg.lr0, momentum=cfg.momentum, weight_decay=0.0)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def pretrain_step(
    prepared: PreparedStep, components: ModelComponents, optimizer: torch.optim.Optimizer, cfg: TrainConfig
) -> StepReport:
    started = time.perf_counter()
    lr = lr_schedule(prepared.local_step, cfg)
    _set_lr(optimizer, lr)
    det, seg, _ = mtl_losses(components, prepared.sample)
    parts = LossParts(**_branch_parts(prepared.domain, det, seg))
    total = total_loss(parts, LossWeights(alpha=cfg.weights.alpha, beta=0.0, gamma=0.0))
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepReport(
        prepared.step, prepared.stage, prepared.domain, LossBreakdown.from_parts(parts, total),
        lr, 0.0, time.perf_counter() - started, prepared.sample.sample_id,
    )


def train_step_stage2(
    sample: Sample,
    components: ModelComponents,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    step: int,
    global_step: Optional[int] = None,
    mask_fraction: Optional[float] = None,
) -> StepReport:
    """
    One stage-2 update. ``step`` is the stage-local index (lr schedule, curriculum);
    ``global_step`` seeds the curriculum block and labels the report.
    """
    started = time.perf_counter()
    global_step = step if global_step is None else global_step
    if mask_fraction is None:
        mask_fraction = mask_schedule(step, cfg.stage2_steps, cfg.curriculum.p_start, cfg.curriculum.p_end)
    lr = lr_schedule(step, cfg)
    domain = sample.domain
    zero = LossBreakdown.from_parts(LossParts(), 0.0)
    if not sample.instances:
        logger.warning(f"step {global_step}: sample {sample.sample_id} has no instances; skipped")
        return StepReport(global_step, STAGE2, domain, zero, lr, mask_fraction, 0.0, sample.sample_id, skipped=True)

    rng = np.random.default_rng(derive_seed(derive_seed(cfg.seed, _CURRICULUM_STREAM), global_step))
    parts, reached = compute_stage2_losses(sample, components, cfg.weights, mask_fraction, rng)
    if reached == 0:
        logger.warning(f"step {global_step}: no instance of {sample.sample_id} is large enough for pose; skipped")
        return StepReport(global_step, STAGE2, domain, zero, lr, mask_fraction, 0.0, sample.sample_id, skipped=True)

    _set_lr(optimizer, lr)
    total = total_loss(parts, cfg.weights)
    # set_to_none keeps parameters outside this step's graph (D_Pose on target steps) untouched
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return StepReport(
        global_step, STAGE2, domain, LossBreakdown.from_parts(parts, total),
        lr, mask_fraction, time.perf_counter() - started, sample.sample_id,
    )


def execute_step(
    prepared: PreparedStep, components: ModelComponents, optimizer: torch.optim.Optimizer, cfg: TrainConfig
) -> StepReport:
    if prepared.stage == STAGE2:
        return train_step_stage2(
            prepared.sample, components, optimizer, cfg, prepared.local_step, prepared.step, prepared.mask_fraction
        )
    return pretrain_step(prepared, components, optimizer, cfg)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    history: List[StepReport]


def pretrain_mtl(dataset: DatasetLoader, components: ModelComponents, cfg: TrainConfig) -> StageResult:
    """Stage 1 for the dataset's domain alone: minimizes L_det + alpha * L_seg on that branch."""
    stage = STAGE1_SOURCE if dataset.domain == Domain.SOURCE else STAGE1_TARGET
    offset = stage_plan(cfg)[0 if stage == STAGE1_SOURCE else 1].start
    datasets = {dataset.domain: dataset}
    optimizer = make_optimizer(components, stage, cfg)
    history = []
    for local in range(cfg.stage1_steps):
        prepared = prepare_step(offset + local, cfg, datasets)
        history.append(pretrain_step(prepared, components, optimizer, cfg))
    logger.info(f"{stage}: {len(history)} steps, final loss {history[-1].losses.total:.4f}" if history else f"{stage}: 0 steps")
    return StageResult(Checkpoint.capture(components, stage, offset + cfg.stage1_steps, optimizer), history)


# ---------------------------------------------------------------- full run


@dataclass
class TrainingResult:
    components: ModelComponents
    history: List[StepReport]
    checkpoint: Optional[Checkpoint]
    parameter_hash: str


def _save_checkpoint(
    run_dir: RunDirectory,
    components: ModelComponents,
    optimizer: torch.optim.Optimizer,
    stage: str,
    next_step: int,
) -> Checkpoint:
    ckpt = Checkpoint.capture(components, stage, next_step, optimizer)
    path = ckpt.save(run_dir.checkpoint_path(next_step))
    run_dir.mark_latest(path)
    run_dir.appendOutput(
        RunDirectory.HISTORY,
        {"step": next_step, "stage": stage, "checkpoint": path.name, "parameter_hash": parameter_hash(components)},
    )
    logger.info(f"checkpoint {path.name} ({stage})")
    return ckpt


def run_training(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    datasets: Mapping[Domain, DatasetLoader],
    run_dir: Optional[RunDirectory] = None,
    resume: bool = False,
    stop_after: Optional[int] = None,
) -> TrainingResult:
    """
    Run every stage in order. With ``resume`` the run continues from
    checkpoints/latest; ``stop_after`` ends the loop early at that global step
    (used to emulate interruptions).
    """
    for domain in (Domain.SOURCE, Domain.TARGET):
        if domain not in datasets or len(datasets[domain]) == 0:
            raise ValueError(f"a non-empty {domain.value} dataset is required")
    components = build_components(model_cfg, cfg.seed)
    components.assert_disjoint()
    start = 0
    restored: Optional[Checkpoint] = None
    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        restored = Checkpoint.load(run_dir.latest_checkpoint())
        restored.restore(components)
        start = restored.step
        run_dir.truncate_records(RunDirectory.STEPS_LOG, start)
        run_dir.truncate_records(RunDirectory.HISTORY, start + 1)
        logger.info(f"resuming at step {start} from {restored.stage}")
    if cfg.weights.beta <= 0:
        logger.info("domain adaptation disabled (beta=0): domain classifier is frozen in stage 2")

    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    history: List[StepReport] = []
    optimizer: Optional[torch.optim.Optimizer] = None
    current_stage: Optional[str] = None
    last_ckpt = restored
    components.train()
    prefetch = Prefetcher(lambda s: prepare_step(s, cfg, datasets), range(start, end), depth=cfg.prefetch_depth)
    for prepared in prefetch:
        if prepared.stage != current_stage:
            optimizer = make_optimizer(components, prepared.stage, cfg)
            if restored is not None and restored.stage == prepared.stage and prepared.step == start:
                restored.restore(components, optimizer)
            current_stage = prepared.stage
            logger.info(f"entering {prepared.stage} at step {prepared.step}")
        assert optimizer is not None
        report = execute_step(prepared, components, optimizer, cfg)
        history.append(report)
        if run_dir is not None:
            run_dir.appendOutput(RunDirectory.STEPS_LOG, report.to_record())
            next_step = prepared.step + 1
            plan, _ = locate(prepared.step, cfg)
            if next_step % cfg.checkpoint_every == 0 or next_step == plan.stop or next_step == end:
                last_ckpt = _save_checkpoint(run_dir, components, optimizer, prepared.stage, next_step)
    if run_dir is None:
        last_ckpt = Checkpoint.capture(components, current_stage or STAGE2, end, optimizer)
    digest = parameter_hash(components)
    logger.info(f"training stopped at step {end}; parameter hash {digest[:12]}")
    return TrainingResult(components, history, last_ckpt, digest)


def summarize_history(history: Sequence[StepReport]) -> Dict[str, float]:
    done = [r for r in history if not r.skipped]
    if not done:
        return {"steps": float(len(history))}
    return {
        "steps": float(len(history)),
        "skipped": float(len(history) - len(done)),
        "final_total": done[-1].losses.total,
        "mean_total": float(np.mean([r.losses.total for r in done])),
    }
