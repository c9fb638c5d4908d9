# src/classes/execute.py
from pathlib import Path
import subprocess
from typing import Sequence, Tuple

from src.utils.logs import get_logger

logger = get_logger(__name__)

UNKNOWN_VERSION = "unknown"


class Execute:
    def __init__(self, workdir: Path | str):
        self.workdir = Path(workdir)

    def run_command(self, command: Sequence[str], timeout: float = 30) -> Tuple[str, str, int]:
        """
        Runs a command without a shell. Returns (stdout, stderr, returncode).
        """
        try:
            proc = subprocess.run(
                list(command),
                capture_output=True,
                text=True,
                cwd=self.workdir,
                timeout=timeout,
            )
            return proc.stdout, proc.stderr, proc.returncode
        except subprocess.TimeoutExpired:
            return "", "Command timed out", 1
        except (OSError, ValueError) as e:
            return "", str(e), 1

    def code_version(self) -> str:
        """`git describe --always --dirty` of the working tree, or "unknown" outside a repository."""
        stdout, stderr, rc = self.run_command(["git", "describe", "--always", "--dirty"])
        if rc != 0 or not stdout.strip():
            logger.debug(f"git describe unavailable: {stderr.strip()}")
            return UNKNOWN_VERSION
        return stdout.strip()
