# src/utils/plotting.py
"""Static plots: loss curve, AP against occlusion, and skeleton overlays."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.classes.core import SKELETON, Sample  # noqa: E402
from src.process.evaluate import InstancePose  # noqa: E402

SWEEP_KEY = re.compile(r"^sweep\.(\d+)\.mean$")

STAGE_COLORS = {"stage1_source": "tab:blue", "stage1_target": "tab:orange", "stage2": "tab:green"}


def loss_curve_points(records: Sequence[Dict[str, Any]]) -> Tuple[List[int], List[float]]:
    """One (step, total loss) point per logged step."""
    ordered = sorted(records, key=lambda r: int(r["step"]))
    return [int(r["step"]) for r in ordered], [float(r["loss.total"]) for r in ordered]


def plot_loss_curve(records: Sequence[Dict[str, Any]], path: Path) -> Path:
    steps, totals = loss_curve_points(records)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(steps, totals, linewidth=0.8, color="0.6", label="total")
    for stage, color in STAGE_COLORS.items():
        xs = [int(r["step"]) for r in records if r["stage"] == stage]
        ys = [float(r["loss.total"]) for r in records if r["stage"] == stage]
        if xs:
            ax.scatter(xs, ys, s=4, color=color, label=stage)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(loc="upper right")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def sweep_points(flat_report: Dict[str, Any]) -> List[Tuple[float, float, float]]:
    """(fraction, mean AP, std) from the flat report, sorted by fraction."""
    points = []
    for key, value in flat_report.items():
        m = SWEEP_KEY.match(key)
        if m and value is not None:
            pct = int(m.group(1))
            points.append((pct / 100.0, float(value), float(flat_report.get(f"sweep.{pct}.std") or 0.0)))
    return sorted(points)


def plot_occlusion_ap(flat_report: Dict[str, Any], path: Path) -> List[float]:
    """Error-bar plot of AP against occlusion; returns the x ticks used."""
    points = sweep_points(flat_report)
    if not points:
        raise ValueError("report holds no occlusion sweep")
    xs = [p[0] for p in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(xs, [p[1] for p in points], yerr=[p[2] for p in points], marker="o", capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([f"{int(round(x * 100))}%" for x in xs])
    ax.set_xlabel("occluded share of the instance")
    ax.set_ylabel("keypoint AP")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [float(t) for t in ax.get_xticks()]


def render_overlay(sample: Sample, poses: Sequence[InstancePose]) -> np.ndarray:
    """RGB uint8 copy of the sample with predicted boxes and skeletons drawn on top."""
    canvas = np.ascontiguousarray(np.round(sample.image * 255.0).astype(np.uint8))
    for pose in poses:
        x0, y0, x1, y1 = (int(round(v)) for v in pose.box.as_tuple())
        cv2.rectangle(canvas, (x0, y0), (x1 - 1, y1 - 1), (255, 255, 0), 1)
        pts = [(int(round(kp.x)), int(round(kp.y))) if kp.labeled else None for kp in pose.keypoints]
        for a, b in SKELETON:
            if pts[a] is not None and pts[b] is not None:
                cv2.line(canvas, pts[a], pts[b], (0, 255, 0), 1, cv2.LINE_AA)
        for p in pts:
            if p is not None:
                cv2.circle(canvas, p, 2, (255, 0, 0), -1)
    return canvas


def save_overlay(sample: Sample, poses: Sequence[InstancePose], directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{sample.sample_id}.png"
    cv2.imwrite(str(path), cv2.cvtColor(render_overlay(sample, poses), cv2.COLOR_RGB2BGR))
    return path
