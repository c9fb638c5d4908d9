# src/utils/logs.py
"""
Logging setup for occlupose.
All modules log through the ``occlupose`` logger tree; the CLI installs a
RichHandler bound to the shared console.
"""
import logging
import os
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

ROOT_LOGGER = "occlupose"

console = Console()

_configured = False


def get_logger(name: str) -> logging.Logger:
    """Return a child of the ``occlupose`` logger for a module name."""
    short = name.split(".")[-1]
    return logging.getLogger(f"{ROOT_LOGGER}.{short}")


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """Install the rich handler once. Level falls back to OCCLUPOSE_LOG_LEVEL, then INFO."""
    global _configured
    logger = logging.getLogger(ROOT_LOGGER)
    level = (level or os.environ.get("OCCLUPOSE_LOG_LEVEL") or "INFO").upper()
    logger.setLevel(level)
    if not _configured:
        handler = RichHandler(
            console=console,
            show_path=False,
            markup=True,
            rich_tracebacks=True,
        )
        handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
        logger.addHandler(handler)
        _configured = True
    return logger


def print_section_header(title: str, emoji: str = "🔍") -> None:
    console.print(f"\n{emoji} {title}", style="bold cyan", justify="left")


def print_success(message: str) -> None:
    console.print(f"✓ {message}", style="bold green")


def print_info(message: str) -> None:
    console.print(f"ℹ {message}", style="dim")


def print_warning(message: str) -> None:
    console.print(f"⚠ {message}", style="bold yellow")


def print_error(message: str) -> None:
    console.print(f"[bold red]✗ Error:[/bold red] {message}")
