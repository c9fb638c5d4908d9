# src/process/synthdata.py
"""
Synthetic dual-distribution pedestrian data.

Two presets render articulated stick-figure pedestrians over textured
backgrounds. The source preset keeps pose annotations and the target preset
drops them; they differ in body hue, texture scale, noise, limb proportions,
occluder rate and the share of riders, which produces a measurable domain gap.
Generation is a pure function of (params, seed).
"""
from __future__ import annotations

import hashlib
import json
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml

from src.classes.core import (
    NUM_KEYPOINTS,
    SKELETON,
    Box,
    Category,
    Domain,
    Instance,
    Keypoint,
    Sample,
    Visibility,
)
from src.classes.errors import InconsistentStateError, MissingInputError
from src.utils.atomic_ops import atomic_writer
from src.utils.logs import get_logger
from src.utils.optimized_executor import map_ordered

logger = get_logger(__name__)

SCHEMA_VERSION = 1
SWEEP_FRACTIONS: Tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
OCCLUSION_TOLERANCE = 0.005


@dataclass(frozen=True)
class DistributionParams:
    domain: Domain
    image_size: Tuple[int, int] = (128, 128)
    pedestrians_per_image: Tuple[int, int] = (1, 3)
    pedestrian_height: Tuple[float, float] = (48.0, 112.0)
    limb_length_scale: float = 1.0
    limb_width: float = 0.07
    body_hue: float = 0.6
    background_texture_scale: float = 8.0
    noise_level: float = 0.02
    occluder_rate: float = 0.3
    rider_rate: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "domain", Domain(self.domain))
        for name in ("image_size", "pedestrians_per_image", "pedestrian_height"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.pedestrians_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"pedestrians_per_image must satisfy 1 <= min <= max, got {self.pedestrians_per_image}")
        if not 0.0 <= self.occluder_rate <= 1.0 or not 0.0 <= self.rider_rate <= 1.0:
            raise ValueError("occluder_rate and rider_rate must be probabilities")
        if self.background_texture_scale <= 0 or self.noise_level < 0 or self.limb_width <= 0:
            raise ValueError("texture scale and limb width must be positive, noise non-negative")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["domain"] = self.domain.value
        for name in ("image_size", "pedestrians_per_image", "pedestrian_height"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DistributionParams":
        return cls(**data)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# "M-like": pose-annotated, cool hues, fine texture, clean images
SOURCE_PRESET = DistributionParams(
    domain=Domain.SOURCE,
    limb_length_scale=1.0,
    limb_width=0.075,
    body_hue=0.62,
    background_texture_scale=6.0,
    noise_level=0.01,
    occluder_rate=0.2,
    rider_rate=0.0,
)

# "C-like": pose-free street scenes, warm hues, coarse texture, sensor noise, riders
TARGET_PRESET = DistributionParams(
    domain=Domain.TARGET,
    limb_length_scale=0.92,
    limb_width=0.065,
    body_hue=0.05,
    background_texture_scale=20.0,
    noise_level=0.05,
    occluder_rate=0.4,
    rider_rate=0.25,
)


def preset(domain: Domain | str) -> DistributionParams:
    return SOURCE_PRESET if Domain(domain) == Domain.SOURCE else TARGET_PRESET


@dataclass(frozen=True)
class PedestrianSpec:
    joints: Tuple[Tuple[int, int], ...]
    height: float
    category: Category
    color: Tuple[float, float, float]
    facing: int


@dataclass(frozen=True)
class OccluderSpec:
    x0: int
    y0: int
    x1: int
    y1: int
    color: Tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int]
    pedestrians: Tuple[PedestrianSpec, ...]
    occluders: Tuple[OccluderSpec, ...]
    texture_seed: int
    noise_seed: int
    rng_seed: int


def derive_seed(seed: int, index: int) -> int:
    """Counter-based child seed for (seed, index); independent of evaluation order."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def _hsv_color(hue: float, saturation: float, value: float) -> Tuple[float, float, float]:
    hsv = np.array([[[(hue % 1.0) * 179.0, saturation * 255.0, value * 255.0]]], dtype=np.uint8)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0]
    return tuple(float(c) / 255.0 for c in rgb)


def _skeleton_units(rng: np.random.Generator, params: DistributionParams, category: Category, facing: int) -> np.ndarray:
    """Joint layout in units of body height, neck at the origin, y down."""
    s = params.limb_length_scale
    pts = np.zeros((NUM_KEYPOINTS, 2))
    pts[0] = (rng.uniform(-0.02, 0.02), -0.10)
    pts[1] = (0.10, 0.02)
    pts[2] = (-0.10, 0.02)
    lean = rng.uniform(-0.04, 0.04)
    pelvis = np.array([lean, 0.30])
    pts[7] = pelvis + (0.06, 0.0)
    pts[8] = pelvis - (0.06, 0.0)

    upper, fore, thigh, shin = 0.15 * s, 0.13 * s, 0.24 * s, 0.24 * s
    for shoulder, elbow, wrist, side in ((1, 3, 5, 1.0), (2, 4, 6, -1.0)):
        if category == Category.RIDER:
            a, b = facing * side * 0.9, 0.3
        else:
            a, b = rng.uniform(-0.3, 0.9), rng.uniform(0.0, 1.0)
        pts[elbow] = pts[shoulder] + upper * np.array([side * math.sin(a), math.cos(a)])
        pts[wrist] = pts[elbow] + fore * np.array([side * math.sin(a + b), math.cos(a + b)])

    stride = rng.uniform(-0.35, 0.35)
    for hip, knee, ankle, sign in ((7, 9, 11, 1.0), (8, 10, 12, -1.0)):
        if category == Category.RIDER:
            t, k = facing * 1.25, facing * -1.05
        else:
            t = sign * stride
            k = -sign * rng.uniform(0.0, 0.4)
        pts[knee] = pts[hip] + thigh * np.array([math.sin(t), math.cos(t)])
        pts[ankle] = pts[knee] + shin * np.array([math.sin(t + k), math.cos(t + k)])
    return pts


def _plan_pedestrian(rng: np.random.Generator, params: DistributionParams) -> PedestrianSpec:
    H, W = params.image_size
    category = Category.RIDER if rng.random() < params.rider_rate else Category.PERSON
    facing = 1 if rng.random() < 0.5 else -1
    units = _skeleton_units(rng, params, category, facing)
    lo, hi = params.pedestrian_height
    height = float(rng.uniform(lo, min(hi, H - 8)))

    pts = units * height
    head_r = 0.07 * height
    pad = max(2.0, params.limb_width * height) + 2.0
    x_lo = pts[:, 0].min() - pad
    x_hi = pts[:, 0].max() + pad
    y_lo = pts[0, 1] - 0.02 * height - head_r - pad
    y_hi = pts[:, 1].max() + pad
    if x_hi - x_lo > W - 2 or y_hi - y_lo > H - 2:
        shrink = min((W - 2) / (x_hi - x_lo), (H - 2) / (y_hi - y_lo))
        pts, height = pts * shrink, height * shrink
        x_lo, x_hi, y_lo, y_hi = x_lo * shrink, x_hi * shrink, y_lo * shrink, y_hi * shrink
    ox = rng.uniform(1 - x_lo, W - 1 - x_hi)
    oy = rng.uniform(1 - y_lo, H - 1 - y_hi)
    joints = tuple((int(round(x + ox)), int(round(y + oy))) for x, y in pts)

    hue = params.body_hue + rng.uniform(-0.04, 0.04)
    color = _hsv_color(hue, rng.uniform(0.55, 0.8), rng.uniform(0.6, 0.9))
    return PedestrianSpec(joints=joints, height=height, category=category, color=color, facing=facing)


def _plan_occluder(rng: np.random.Generator, ped: PedestrianSpec, params: DistributionParams) -> OccluderSpec:
    H, W = params.image_size
    xs = [x for x, _ in ped.joints]
    ys = [y for _, y in ped.joints]
    bx0, bx1, by0, by1 = min(xs), max(xs) + 1, min(ys), max(ys) + 1
    bw, bh = bx1 - bx0, by1 - by0
    if rng.random() < 0.6:
        # low wall / parked car covering the legs
        top = by0 + int(bh * rng.uniform(0.4, 0.8))
        x0 = bx0 - int(bw * rng.uniform(0.0, 1.0))
        x1 = bx1 + int(bw * rng.uniform(0.0, 1.0))
        rect = (x0, top, x1, by1 + int(rng.integers(2, 8)))
    else:
        # pole or pillar on one side
        width = max(2, int(bw * rng.uniform(0.25, 0.6)))
        left = bx0 - width // 2 if rng.random() < 0.5 else bx1 - width + width // 2
        rect = (left, by0 - int(rng.integers(4, 16)), left + width, by1 + int(rng.integers(2, 8)))
    x0, y0, x1, y1 = max(0, rect[0]), max(0, rect[1]), min(W, rect[2]), min(H, rect[3])
    grey = rng.uniform(0.2, 0.55)
    color = (grey, grey * rng.uniform(0.9, 1.1), grey * rng.uniform(0.9, 1.1))
    return OccluderSpec(x0, y0, max(x0 + 1, x1), max(y0 + 1, y1), tuple(min(1.0, c) for c in color))


def plan_scene(params: DistributionParams, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    lo, hi = params.pedestrians_per_image
    count = int(rng.integers(lo, hi + 1))
    pedestrians = tuple(_plan_pedestrian(rng, params) for _ in range(count))
    occluders = tuple(
        _plan_occluder(rng, ped, params) for ped in pedestrians if rng.random() < params.occluder_rate
    )
    return SceneSpec(
        image_size=tuple(params.image_size),
        pedestrians=pedestrians,
        occluders=occluders,
        texture_seed=int(rng.integers(0, 2**62)),
        noise_seed=int(rng.integers(0, 2**62)),
        rng_seed=int(seed),
    )


def _background(params: DistributionParams, spec: SceneSpec) -> np.ndarray:
    H, W = spec.image_size
    rng = np.random.default_rng(spec.texture_seed)
    cells = (int(math.ceil(H / params.background_texture_scale)) + 1,
             int(math.ceil(W / params.background_texture_scale)) + 1)
    coarse = rng.random((cells[0], cells[1], 3)).astype(np.float32)
    texture = cv2.resize(coarse, (W, H), interpolation=cv2.INTER_LINEAR).astype(np.float64)
    tint = np.array(_hsv_color(params.body_hue + 0.5, 0.25, 0.6))
    return 0.25 + 0.5 * (0.5 * texture + 0.5 * tint)


def _full_body_mask(ped: PedestrianSpec, params: DistributionParams, shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    j = ped.joints
    thickness = max(2, int(round(params.limb_width * ped.height)))
    torso = np.array([j[1], j[7], j[8], j[2]], dtype=np.int32)
    cv2.fillConvexPoly(mask, torso, 1)
    for a, b in SKELETON:
        cv2.line(mask, j[a], j[b], 1, thickness, lineType=cv2.LINE_8)
    neck = ((j[1][0] + j[2][0]) // 2, (j[1][1] + j[2][1]) // 2)
    cv2.line(mask, neck, j[0], 1, thickness, lineType=cv2.LINE_8)
    head_center = (j[0][0], j[0][1] - int(round(0.02 * ped.height)))
    cv2.circle(mask, head_center, max(2, int(round(0.07 * ped.height))), 1, -1)
    for point in j:
        cv2.circle(mask, point, thickness // 2 + 1, 1, -1)
    return mask.astype(bool)


def _draw_bicycle(image: np.ndarray, ped: PedestrianSpec) -> None:
    j = ped.joints
    radius = max(3, int(round(0.16 * ped.height)))
    hip_x = (j[7][0] + j[8][0]) // 2
    ground = max(j[11][1], j[12][1])
    rear = (hip_x - ped.facing * radius, ground - radius // 2)
    front = (hip_x + ped.facing * 2 * radius, ground - radius // 2)
    frame = np.zeros(image.shape[:2], dtype=np.uint8)
    cv2.circle(frame, rear, radius, 1, 2)
    cv2.circle(frame, front, radius, 1, 2)
    cv2.line(frame, rear, (hip_x, j[7][1]), 1, 2)
    cv2.line(frame, (hip_x, j[7][1]), front, 1, 2)
    image[frame.astype(bool)] = (0.12, 0.12, 0.14)


def _quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so PNG storage is lossless."""
    levels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels_to_float(levels)


def levels_to_float(levels: np.ndarray) -> np.ndarray:
    return levels.astype(np.float32) / np.float32(255.0)


def _pose_annotation(joints: Sequence[Tuple[int, int]], visible_mask: np.ndarray) -> Tuple[Keypoint, ...]:
    near_visible = cv2.dilate(visible_mask.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool)
    keypoints = []
    for x, y in joints:
        seen = near_visible[y, x]
        keypoints.append(
            Keypoint(float(x), float(y), Visibility.LABELED_VISIBLE if seen else Visibility.LABELED_INVISIBLE)
        )
    return tuple(keypoints)


def render_scene(params: DistributionParams, spec: SceneSpec, reveal_pose: bool = False) -> Sample:
    H, W = spec.image_size
    image = _background(params, spec)
    full_masks = []
    for ped in spec.pedestrians:
        if ped.category == Category.RIDER:
            _draw_bicycle(image, ped)
        mask = _full_body_mask(ped, params, (H, W))
        image[mask] = ped.color
        full_masks.append(mask)

    occluded = np.zeros((H, W), dtype=bool)
    for occ in spec.occluders:
        image[occ.y0:occ.y1, occ.x0:occ.x1] = occ.color
        occluded[occ.y0:occ.y1, occ.x0:occ.x1] = True

    noise = np.random.default_rng(spec.noise_seed).normal(0.0, params.noise_level, image.shape)
    image = _quantize(image + noise)

    instances: List[Instance] = []
    covered = occluded.copy()
    for k in range(len(full_masks) - 1, -1, -1):
        full = full_masks[k]
        visible = full & ~covered
        covered |= full
        if not visible.any():
            continue
        ped = spec.pedestrians[k]
        pose = _pose_annotation(ped.joints, visible)
        annotated = params.domain == Domain.SOURCE
        instances.append(
            Instance(
                box=Box.from_mask(full),
                mask=visible,
                category=ped.category,
                keypoints=pose if annotated else None,
                visibility_ratio=float(visible.sum()) / float(full.sum()),
                reference_keypoints=pose if (reveal_pose and not annotated) else None,
            )
        )
    instances.reverse()
    sample_id = f"{params.domain.value[0]}{spec.rng_seed:016x}"
    return Sample(image=image, instances=tuple(instances), domain=params.domain, sample_id=sample_id, rng_seed=spec.rng_seed)


def generate_sample(params: DistributionParams, seed: int, reveal_pose: bool = False) -> Sample:
    """
    Render one scene. Target samples never carry ``keypoints``; with
    ``reveal_pose`` they carry evaluation-only ``reference_keypoints``.
    """
    return render_scene(params, plan_scene(params, seed), reveal_pose=reveal_pose)


def _inpainted_background(sample: Sample) -> np.ndarray:
    levels = np.round(sample.image * 255.0).astype(np.uint8)
    union = np.zeros(levels.shape[:2], dtype=np.uint8)
    for inst in sample.instances:
        union |= inst.mask.astype(np.uint8)
    union = cv2.dilate(union, np.ones((3, 3), np.uint8))
    filled = cv2.inpaint(levels, union * 255, 3, cv2.INPAINT_TELEA)
    return levels_to_float(filled)


def _mark_covered(keypoints: Optional[Tuple[Keypoint, ...]], occluded: np.ndarray) -> Optional[Tuple[Keypoint, ...]]:
    if keypoints is None:
        return None
    H, W = occluded.shape
    out = []
    for kp in keypoints:
        row, col = int(round(kp.y)), int(round(kp.x))
        if kp.labeled and 0 <= row < H and 0 <= col < W and occluded[row, col]:
            kp = Keypoint(kp.x, kp.y, Visibility.LABELED_INVISIBLE)
        out.append(kp)
    return tuple(out)


def occlude_instance(sample: Sample, instance_index: int, fraction: float, seed: int) -> Sample:
    """
    Hide ``fraction`` of a fully visible instance behind rectangular patches of
    inpainted background. Rectangles are drawn greedily, largest first, inside
    the instance box and finished with single-pixel rectangles, so the cleared
    share of the original mask lands within OCCLUSION_TOLERANCE of the request.
    Pixels of other instances are left untouched.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"occlusion fraction must be in [0, 1), got {fraction}")
    inst = sample.instances[instance_index]
    if inst.visibility_ratio < 1.0:
        raise ValueError(
            f"instance {instance_index} of {sample.sample_id} is already occluded "
            f"(visibility {inst.visibility_ratio:.3f})"
        )
    if fraction == 0.0:
        return sample

    H, W = sample.height, sample.width
    mask = inst.mask
    total = int(mask.sum())
    target = min(fraction * total, total - 1.0)
    tol = OCCLUSION_TOLERANCE * total
    others = np.zeros((H, W), dtype=bool)
    for k, other in enumerate(sample.instances):
        if k != instance_index:
            others |= other.mask

    rng = np.random.default_rng(seed)
    rows, cols = inst.box.pixel_slices(W, H)
    r0, r1, c0, c1 = rows.start, rows.stop, cols.start, cols.stop
    occluded = np.zeros((H, W), dtype=bool)
    cleared = np.zeros((H, W), dtype=bool)
    count = 0

    for _ in range(64):
        need = target - count
        if need <= tol:
            break
        remaining = mask & ~cleared
        best = None
        for _ in range(24):
            rh = int(rng.integers(1, r1 - r0 + 1))
            rw = int(rng.integers(1, c1 - c0 + 1))
            ry = int(rng.integers(r0, r1 - rh + 1))
            rx = int(rng.integers(c0, c1 - rw + 1))
            gain = int(remaining[ry:ry + rh, rx:rx + rw].sum())
            if 0 < gain <= need + tol and (best is None or gain > best[0]):
                best = (gain, ry, rx, rh, rw)
        if best is None:
            continue
        gain, ry, rx, rh, rw = best
        occluded[ry:ry + rh, rx:rx + rw] = True
        cleared |= mask & occluded
        count = int(cleared.sum())

    need = int(round(target - count))
    if need > 0:
        candidates = np.flatnonzero((mask & ~cleared).reshape(-1))
        picks = rng.choice(candidates, size=need, replace=False)
        occluded.reshape(-1)[picks] = True
        cleared |= mask & occluded

    occluded &= ~others
    background = _inpainted_background(sample)
    image = np.where(occluded[..., None], background, sample.image)
    new_mask = mask & ~cleared
    updated = inst.with_updates(
        mask=new_mask,
        visibility_ratio=1.0 - float(cleared.sum()) / float(total),
        keypoints=_mark_covered(inst.keypoints, occluded),
        reference_keypoints=_mark_covered(inst.reference_keypoints, occluded),
    )
    instances = list(sample.instances)
    instances[instance_index] = updated
    return sample.with_updates(image=image, instances=tuple(instances))


class DatasetLoader(ABC):
    """Ordered, indexable collection of Samples with a manifest.

    Real-dataset loaders (pedestrian detection or keypoint corpora converted
    to Sample records) plug in by implementing this interface.
    """

    @abstractmethod
    def __len__(self) -> int:
        ...

    @abstractmethod
    def __getitem__(self, index: int) -> Sample:
        ...

    @property
    @abstractmethod
    def manifest(self) -> Dict[str, Any]:
        ...

    @property
    def domain(self) -> Domain:
        return Domain(self.manifest["domain"])

    def __iter__(self) -> Iterator[Sample]:
        for index in range(len(self)):
            yield self[index]


def _keypoints_record(keypoints: Optional[Sequence[Keypoint]]) -> Optional[List[List[float]]]:
    if keypoints is None:
        return None
    return [[kp.x, kp.y, int(kp.visibility)] for kp in keypoints]


def _keypoints_from_record(record: Optional[List[List[float]]]) -> Optional[Tuple[Keypoint, ...]]:
    if record is None:
        return None
    return tuple(Keypoint(float(x), float(y), Visibility(int(v))) for x, y, v in record)


def annotation_record(sample: Sample) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "sample_id": sample.sample_id,
        "rng_seed": sample.rng_seed,
        "domain": sample.domain.value,
        "height": sample.height,
        "width": sample.width,
        "instances": [
            {
                "box": list(inst.box.as_tuple()),
                "category": inst.category.value,
                "visibility_ratio": inst.visibility_ratio,
                "keypoints": _keypoints_record(inst.keypoints),
                "reference_keypoints": _keypoints_record(inst.reference_keypoints),
            }
            for inst in sample.instances
        ],
    }


def label_map(sample: Sample) -> np.ndarray:
    labels = np.zeros((sample.height, sample.width), dtype=np.uint8)
    for k, inst in enumerate(sample.instances):
        labels[inst.mask] = k + 1
    return labels


def sample_digest(sample: Sample) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(sample.image).tobytes())
    digest.update(label_map(sample).tobytes())
    digest.update(json.dumps(annotation_record(sample), sort_keys=True).encode())
    return digest.hexdigest()


class SyntheticDataset(DatasetLoader):
    """In-memory split of generated samples; saves to and loads from a split directory."""

    def __init__(self, samples: Sequence[Sample], manifest: Dict[str, Any]):
        self._samples = list(samples)
        self._manifest = manifest

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index: int) -> Sample:
        return self._samples[index]

    @property
    def manifest(self) -> Dict[str, Any]:
        return self._manifest

    @property
    def params(self) -> DistributionParams:
        return DistributionParams.from_dict(self._manifest["params"])

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        (directory / "masks").mkdir(parents=True, exist_ok=True)
        lines = []
        for sample in self._samples:
            levels = np.round(sample.image * 255.0).astype(np.uint8)
            cv2.imwrite(str(directory / "images" / f"{sample.sample_id}.png"), cv2.cvtColor(levels, cv2.COLOR_RGB2BGR))
            cv2.imwrite(str(directory / "masks" / f"{sample.sample_id}.png"), label_map(sample))
            lines.append(json.dumps(annotation_record(sample), sort_keys=True))
        atomic_writer.atomic_write(directory / "annotations.jsonl", "\n".join(lines) + "\n")
        atomic_writer.atomic_write(directory / "manifest.yaml", yaml.safe_dump(self._manifest, sort_keys=False))
        logger.info(f"Wrote {len(self._samples)} samples to {directory}")
        return directory

    @classmethod
    def load(cls, directory: Path) -> "SyntheticDataset":
        directory = Path(directory)
        manifest_path = directory / "manifest.yaml"
        annotations_path = directory / "annotations.jsonl"
        if not manifest_path.exists() or not annotations_path.exists():
            raise MissingInputError(f"No dataset split at {directory}")
        manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise InconsistentStateError(
                f"{manifest_path} has schema version {manifest.get('schema_version')}, expected {SCHEMA_VERSION}"
            )
        samples = []
        for line in annotations_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            sample_id = record["sample_id"]
            bgr = cv2.imread(str(directory / "images" / f"{sample_id}.png"), cv2.IMREAD_COLOR)
            labels = cv2.imread(str(directory / "masks" / f"{sample_id}.png"), cv2.IMREAD_UNCHANGED)
            if bgr is None or labels is None:
                raise MissingInputError(f"Raster files for {sample_id} missing under {directory}")
            instances = tuple(
                Instance(
                    box=Box(*entry["box"]),
                    mask=labels == k + 1,
                    category=Category(entry["category"]),
                    keypoints=_keypoints_from_record(entry["keypoints"]),
                    visibility_ratio=float(entry["visibility_ratio"]),
                    reference_keypoints=_keypoints_from_record(entry.get("reference_keypoints")),
                )
                for k, entry in enumerate(record["instances"])
            )
            samples.append(
                Sample(
                    image=levels_to_float(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)),
                    instances=instances,
                    domain=Domain(record["domain"]),
                    sample_id=sample_id,
                    rng_seed=int(record["rng_seed"]),
                )
            )
        if len(samples) != manifest["n"]:
            raise InconsistentStateError(f"{directory} holds {len(samples)} samples, manifest says {manifest['n']}")
        return cls(samples, manifest)


def build_dataset(
    params: DistributionParams,
    n: int,
    seed: int,
    reveal_pose: bool = False,
    workers: Optional[int] = None,
) -> SyntheticDataset:
    """Generate ``n`` samples from counter seeds (seed, index); parallel and serial builds agree."""
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    seeds = [derive_seed(seed, index) for index in range(n)]
    samples = map_ordered(lambda s: generate_sample(params, s, reveal_pose=reveal_pose), seeds, workers=workers)
    hashes = [sample_digest(s) for s in samples]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "domain": params.domain.value,
        "n": n,
        "seed": int(seed),
        "reveal_pose": bool(reveal_pose),
        "params": params.to_dict(),
        "params_sha256": params.digest(),
        "seeds": seeds,
        "sample_sha256": hashes,
        "dataset_sha256": hashlib.sha256("".join(hashes).encode()).hexdigest(),
    }
    return SyntheticDataset(samples, manifest)
