"""
Shared fixtures: a tiny model, tiny synthetic splits and hand-built samples.
"""
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.classes.core import Box, Category, Domain, Instance, Keypoint, Sample, Visibility  # noqa: E402
from src.classes.nets import ModelConfig  # noqa: E402
from src.process.synthdata import SOURCE_PRESET, TARGET_PRESET, build_dataset  # noqa: E402
from src.process.train import Curriculum, TrainConfig  # noqa: E402

TINY_IMAGE = (64, 64)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        backbone_size="small",
        fpn_levels=2,
        fpn_channels=8,
        heatmap_stride=2,
        roi_size=4,
        pose_channels=8,
        domain_hidden=8,
    )


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(
        lr0=0.01,
        stage1_steps=2,
        stage2_steps=4,
        checkpoint_every=3,
        prefetch_depth=2,
        curriculum=Curriculum(0.0, 0.5),
        seed=7,
    )


@pytest.fixture
def tiny_source_params():
    return replace(SOURCE_PRESET, image_size=TINY_IMAGE, pedestrian_height=(28.0, 52.0), pedestrians_per_image=(1, 2))


@pytest.fixture
def tiny_target_params():
    return replace(TARGET_PRESET, image_size=TINY_IMAGE, pedestrian_height=(28.0, 52.0), pedestrians_per_image=(1, 2))


@pytest.fixture
def tiny_datasets(tiny_source_params, tiny_target_params):
    return {
        Domain.SOURCE: build_dataset(tiny_source_params, 3, seed=11, workers=1),
        Domain.TARGET: build_dataset(tiny_target_params, 3, seed=12, workers=1),
    }


def make_pose(box: Box, visibility: Visibility = Visibility.LABELED_VISIBLE):
    """13 keypoints spread on a grid inside ``box``."""
    xs = np.linspace(box.x0 + 2, box.x1 - 3, 4)
    ys = np.linspace(box.y0 + 2, box.y1 - 3, 4)
    return tuple(Keypoint(float(xs[k % 4]), float(ys[k // 4]), visibility) for k in range(13))


def make_sample(
    domain: Domain = Domain.SOURCE,
    boxes=((8.0, 8.0, 32.0, 56.0),),
    size=TINY_IMAGE,
    sample_id: str = "s0",
    category: Category = Category.PERSON,
) -> Sample:
    """Flat grey image with one filled rectangle instance per box."""
    H, W = size
    image = np.full((H, W, 3), 0.4, dtype=np.float32)
    instances = []
    for coords in boxes:
        box = Box(*coords)
        mask = np.zeros((H, W), dtype=bool)
        rows, cols = box.pixel_slices(W, H)
        mask[rows, cols] = True
        image[mask] = (0.8, 0.2, 0.2)
        pose = make_pose(box)
        instances.append(
            Instance(
                box=box,
                mask=mask,
                category=category,
                keypoints=pose if domain == Domain.SOURCE else None,
                reference_keypoints=None if domain == Domain.SOURCE else pose,
            )
        )
    return Sample(image=image, instances=tuple(instances), domain=domain, sample_id=sample_id, rng_seed=0)


@pytest.fixture
def source_sample() -> Sample:
    return make_sample(Domain.SOURCE)


@pytest.fixture
def target_sample() -> Sample:
    return make_sample(Domain.TARGET, sample_id="t0")
