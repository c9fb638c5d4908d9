# src/classes/filesystems.py
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from src.classes.core import Domain
from src.classes.errors import InconsistentStateError, MissingInputError
from src.utils.atomic_ops import atomic_writer

OUTPUT_ROOT_ENV = "OCCLUPOSE_OUTPUT_ROOT"

SPLITS: Dict[str, Domain] = {
    "source_train": Domain.SOURCE,
    "source_eval": Domain.SOURCE,
    "target_train": Domain.TARGET,
    "target_eval": Domain.TARGET,
}


def default_output_root() -> Path:
    """OCCLUPOSE_OUTPUT_ROOT (usually from .env), else the working directory."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or Path.cwd())


class FileSystem:
    def __init__(self, base: Union[str, Path]):
        self.base = Path(base).resolve()

    def createFolder(self, name: str, location: str = "") -> Path:
        """
        name: folder name (lowercase + underscores)
        location: relative to base (e.g., "checkpoints" or "report/overlays")
        """
        loc = self.base.joinpath(location) if location else self.base
        path = loc.joinpath(name)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def appendOutput(self, file_location: str, output_text) -> None:
        """
        file_location: relative path from base (e.g., "logs/steps.jsonl")
        Accepts an Output-like object (with text()), a dict (one JSON line) or a string.
        """
        target = self.base.joinpath(file_location)
        if hasattr(output_text, "text") and callable(getattr(output_text, "text")):
            data = output_text.text()
        elif isinstance(output_text, dict):
            data = json.dumps(output_text, sort_keys=True)
        else:
            data = str(output_text) if output_text is not None else ""
        atomic_writer.append_line(target, data)

    def is_empty(self) -> bool:
        return not self.base.exists() or not any(self.base.iterdir())


class DataDirectory(FileSystem):
    """Root holding the four generated splits."""

    def split(self, name: str) -> Path:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {sorted(SPLITS)}")
        return self.base / name

    def require(self, name: str) -> Path:
        path = self.split(name)
        if not (path / "manifest.yaml").exists():
            raise MissingInputError(f"dataset split {name} not found under {self.base} (run gen-data first)")
        return path


class RunDirectory(FileSystem):
    """
    Layout of one training run:
      config.yaml, manifest.yaml, history.jsonl,
      logs/steps.jsonl, checkpoints/step_<n>.ckpt + checkpoints/latest,
      report/eval.yaml + report/eval.md, plots/
    """

    STEPS_LOG = "logs/steps.jsonl"
    HISTORY = "history.jsonl"

    @property
    def config_path(self) -> Path:
        return self.base / "config.yaml"

    @property
    def manifest_path(self) -> Path:
        return self.base / "manifest.yaml"

    @property
    def steps_log(self) -> Path:
        return self.base / self.STEPS_LOG

    @property
    def history_path(self) -> Path:
        return self.base / self.HISTORY

    @property
    def report_dir(self) -> Path:
        return self.base / "report"

    @property
    def plots_dir(self) -> Path:
        return self.base / "plots"

    def checkpoint_path(self, step: int) -> Path:
        return self.base / "checkpoints" / f"step_{step}.ckpt"

    def mark_latest(self, checkpoint: Path) -> None:
        atomic_writer.atomic_write(self.base / "checkpoints" / "latest", Path(checkpoint).name + "\n")

    def latest_checkpoint(self) -> Path:
        pointer = self.base / "checkpoints" / "latest"
        if not pointer.exists():
            raise MissingInputError(f"no checkpoints/latest under {self.base}")
        path = pointer.parent / pointer.read_text(encoding="utf-8").strip()
        if not path.exists():
            raise InconsistentStateError(f"checkpoints/latest points at missing file {path.name}")
        return path

    def read_records(self, relative: str) -> List[Dict[str, Any]]:
        path = self.base / relative
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]

    def truncate_records(self, relative: str, before_step: int) -> None:
        """Drop records at or after ``before_step`` (a resumed run rewrites them)."""
        kept = [r for r in self.read_records(relative) if int(r["step"]) < before_step]
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in kept)
        atomic_writer.atomic_write(self.base / relative, text)


def resolve_out(out: Optional[Path]) -> Path:
    return Path(out) if out is not None else default_output_root()
