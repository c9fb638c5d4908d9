# src/classes/core.py
"""
Domain data model and geometry/heatmap primitives.

Boxes use continuous pixel coordinates in the half-open convention
[x0, x1) x [y0, y1). Keypoints live in the same frame. Rasters are numpy
arrays indexed [row, col].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Optional, Sequence, Tuple

import numpy as np

NUM_KEYPOINTS = 13

KEYPOINT_NAMES: Tuple[str, ...] = (
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# index k of a flipped instance holds what index FLIP_PERMUTATION[k] held before
FLIP_PERMUTATION: Tuple[int, ...] = (0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11)

# skeleton edges, used for rendering figures and overlays
SKELETON: Tuple[Tuple[int, int], ...] = (
    (1, 2), (1, 3), (3, 5), (2, 4), (4, 6),
    (1, 7), (2, 8), (7, 8),
    (7, 9), (9, 11), (8, 10), (10, 12),
)

DEFAULT_KEYPOINT_MARGIN = 0.10
DEFAULT_SIGMA = 2.0


class Visibility(IntEnum):
    NOT_LABELED = 0
    LABELED_INVISIBLE = 1
    LABELED_VISIBLE = 2


class Category(str, Enum):
    PERSON = "person"
    RIDER = "rider"

    @property
    def index(self) -> int:
        return list(Category).index(self)


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Box coordinates must be finite, got {coords}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"Box needs x0<x1 and y0<y1, got {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def expand(self, margin: float) -> "Box":
        """Grow every side by ``margin`` times the diagonal."""
        pad = margin * self.diagonal
        return Box(self.x0 - pad, self.y0 - pad, self.x1 + pad, self.y1 + pad)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def clip(self, width: int, height: int) -> Optional["Box"]:
        """Clip to the image; None when nothing is left."""
        x0, y0 = max(0.0, self.x0), max(0.0, self.y0)
        x1, y1 = min(float(width), self.x1), min(float(height), self.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def pixel_slices(self, width: int, height: int) -> Tuple[slice, slice]:
        """Row/col slices of the pixels the box touches, clipped to the raster."""
        r0 = max(0, int(math.floor(self.y0)))
        r1 = min(height, int(math.ceil(self.y1)))
        c0 = max(0, int(math.floor(self.x0)))
        c1 = min(width, int(math.ceil(self.x1)))
        return slice(r0, r1), slice(c0, c1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Box":
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValueError("Cannot build a box from an empty mask")
        return cls(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: Visibility = Visibility.LABELED_VISIBLE

    @property
    def labeled(self) -> bool:
        return self.visibility != Visibility.NOT_LABELED

    @classmethod
    def unlabeled(cls) -> "Keypoint":
        return cls(0.0, 0.0, Visibility.NOT_LABELED)


def _validate_pose(keypoints: Sequence[Keypoint], box: Box, margin: float, what: str) -> None:
    if len(keypoints) != NUM_KEYPOINTS:
        raise ValueError(f"{what} must hold exactly {NUM_KEYPOINTS} keypoints, got {len(keypoints)}")
    allowed = box.expand(margin)
    for name, kp in zip(KEYPOINT_NAMES, keypoints):
        if kp.labeled and not allowed.contains(kp.x, kp.y):
            raise ValueError(f"{what} {name} at ({kp.x:.1f}, {kp.y:.1f}) lies outside its box")


@dataclass(frozen=True, eq=False)
class Instance:
    box: Box
    mask: np.ndarray
    category: Category = Category.PERSON
    keypoints: Optional[Tuple[Keypoint, ...]] = None
    visibility_ratio: float = 1.0
    # evaluation-only pose for splits whose training annotations carry none
    reference_keypoints: Optional[Tuple[Keypoint, ...]] = None
    keypoint_margin: float = DEFAULT_KEYPOINT_MARGIN

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if mask.ndim != 2:
            raise ValueError(f"Instance mask must be 2-D, got shape {mask.shape}")
        rows, cols = self.box.pixel_slices(mask.shape[1], mask.shape[0])
        if not mask[rows, cols].any():
            raise ValueError("Instance mask has no set pixel inside its box")
        if not 0.0 <= self.visibility_ratio <= 1.0:
            raise ValueError(f"visibility_ratio must be in [0,1], got {self.visibility_ratio}")
        if self.keypoints is not None:
            object.__setattr__(self, "keypoints", tuple(self.keypoints))
            _validate_pose(self.keypoints, self.box, self.keypoint_margin, "keypoints")
        if self.reference_keypoints is not None:
            object.__setattr__(self, "reference_keypoints", tuple(self.reference_keypoints))
            _validate_pose(self.reference_keypoints, self.box, self.keypoint_margin, "reference_keypoints")

    @property
    def eval_keypoints(self) -> Optional[Tuple[Keypoint, ...]]:
        """Ground-truth pose for scoring: annotated keypoints, else the reference copy."""
        return self.keypoints if self.keypoints is not None else self.reference_keypoints

    def with_updates(self, **changes) -> "Instance":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    instances: Tuple[Instance, ...]
    domain: Domain
    sample_id: str
    rng_seed: int

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float32)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "instances", tuple(self.instances))
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"Sample image must be HxWx3, got {image.shape}")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise ValueError("Sample image values must lie in [0,1]")
        for k, inst in enumerate(self.instances):
            if inst.mask.shape != image.shape[:2]:
                raise ValueError(f"instance {k} mask shape {inst.mask.shape} != image {image.shape[:2]}")
            if self.domain == Domain.TARGET and inst.keypoints is not None:
                raise ValueError(f"target-domain sample {self.sample_id} carries keypoints on instance {k}")
            if self.domain == Domain.SOURCE and inst.keypoints is None:
                raise ValueError(f"source-domain sample {self.sample_id} lacks keypoints on instance {k}")

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def with_updates(self, **changes) -> "Sample":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Heatmaps:
    values: np.ndarray
    stride: int = 1

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", values)
        if values.ndim != 3 or values.shape[0] != NUM_KEYPOINTS:
            raise ValueError(f"Heatmaps must be {NUM_KEYPOINTS} x h x w, got {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("Heatmap values must lie in [0,1]")
        if self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def render_heatmaps(
    keypoints: Sequence[Keypoint],
    shape: Tuple[int, int],
    stride: int = 1,
    sigma: float = DEFAULT_SIGMA,
) -> Heatmaps:
    """
    Unnormalized Gaussian per keypoint. Image point (x, y) maps to heatmap
    coordinate (x / stride, y / stride); sigma is in heatmap cells.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if len(keypoints) != NUM_KEYPOINTS:
        raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got {len(keypoints)}")
    h, w = shape
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((NUM_KEYPOINTS, h, w), dtype=np.float32)
    for k, kp in enumerate(keypoints):
        if not kp.labeled:
            continue
        cx, cy = kp.x / stride, kp.y / stride
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return Heatmaps(out, stride)


def decode_heatmaps(heatmaps: Heatmaps, threshold: float = 0.1) -> Tuple[Keypoint, ...]:
    """Per-channel argmax; ties resolve to the first cell in row-major order."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    values = heatmaps.values
    width = values.shape[2]
    out = []
    for channel in values:
        flat = int(np.argmax(channel))
        row, col = divmod(flat, width)
        if channel.reshape(-1)[flat] < threshold:
            out.append(Keypoint.unlabeled())
        else:
            out.append(Keypoint(float(col * heatmaps.stride), float(row * heatmaps.stride)))
    return tuple(out)


def to_roi_frame(keypoints: Sequence[Keypoint], box: Box, size: int) -> Tuple[Keypoint, ...]:
    """Map image keypoints onto a size x size grid spanning ``box`` (one cell per unit)."""
    sx, sy = size / box.width, size / box.height
    return tuple(
        Keypoint((kp.x - box.x0) * sx, (kp.y - box.y0) * sy, kp.visibility) if kp.labeled else kp
        for kp in keypoints
    )


def from_roi_frame(keypoints: Sequence[Keypoint], box: Box, size: int) -> Tuple[Keypoint, ...]:
    sx, sy = box.width / size, box.height / size
    return tuple(
        Keypoint(box.x0 + kp.x * sx, box.y0 + kp.y * sy, kp.visibility) if kp.labeled else kp
        for kp in keypoints
    )


def flip_keypoints(keypoints: Sequence[Keypoint], width: int) -> Tuple[Keypoint, ...]:
    """Mirror x to width-1-x and swap left/right identities."""
    mirrored = [
        Keypoint(width - 1 - kp.x, kp.y, kp.visibility) if kp.labeled else kp for kp in keypoints
    ]
    return tuple(mirrored[FLIP_PERMUTATION[k]] for k in range(NUM_KEYPOINTS))
