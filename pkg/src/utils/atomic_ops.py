# src/utils/atomic_ops.py
"""
Atomic file operations for occlupose.
Manifests, reports and checkpoints are written through tempfile + rename so
an interrupted run never leaves a half-written file behind.
"""
import os
import tempfile
import threading
from pathlib import Path
from typing import Dict, Union


class AtomicFileWriter:
    """Thread-safe atomic file writer"""

    def __init__(self) -> None:
        self._locks: Dict[Path, threading.Lock] = {}  # Per-file locks
        self._lock = threading.Lock()

    def _get_lock(self, file_path: Path) -> threading.Lock:
        """Get or create a lock for a specific file"""
        with self._lock:
            if file_path not in self._locks:
                self._locks[file_path] = threading.Lock()
            return self._locks[file_path]

    def _replace(self, file_path: Path, payload: Union[str, bytes], encoding: str) -> None:
        binary = isinstance(payload, bytes)
        with tempfile.NamedTemporaryFile(
            mode="wb" if binary else "w",
            delete=False,
            encoding=None if binary else encoding,
            dir=str(file_path.parent),
            prefix=f".{file_path.name}.",
        ) as tmp_file:
            tmp_file.write(payload)
            tmp_file.flush()
            os.fsync(tmp_file.fileno())  # Force write to disk
            temp_path = Path(tmp_file.name)
        os.replace(temp_path, file_path)

    def atomic_write(self, file_path: Path, content: str, encoding: str = "utf-8") -> None:
        """Atomically write text to file using tempfile + rename"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with self._get_lock(file_path):
            self._replace(file_path, content, encoding)

    def atomic_write_bytes(self, file_path: Path, payload: bytes) -> None:
        """Atomically write a binary payload (checkpoints)"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with self._get_lock(file_path):
            self._replace(file_path, payload, "utf-8")

    def append_line(self, file_path: Path, line: str, encoding: str = "utf-8") -> None:
        """Append one record line; structured logs grow by whole lines only"""
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        if not line.endswith("\n"):
            line += "\n"
        with self._get_lock(file_path):
            with file_path.open("a", encoding=encoding) as fh:
                fh.write(line)
                fh.flush()


# Global instance
atomic_writer = AtomicFileWriter()
