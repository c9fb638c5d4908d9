# src/classes/output.py
from typing import Optional, Sequence


def format_metric(value: Optional[float], digits: int = 3) -> str:
    """Absent metrics print as "-"."""
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


class Output:
    def __init__(self):
        self._parts = []

    def addTitle(self, title: str, level: int = 1):
        # Make first letter uppercase, leave internal spacing as-is
        if title:
            title = title[0].upper() + title[1:]
        self._parts.append(f"{'#' * level} {title}\n")

    def addCodeBlock(self, body: str, language: str = ""):
        if body is None:
            body = ""
        self._parts.append(f"```{language}\n{body.rstrip()}\n```\n")

    def addTable(self, headers: Sequence[str], rows: Sequence[Sequence[object]]):
        self._parts.append("| " + " | ".join(headers) + " |\n")
        self._parts.append("|" + "|".join("---" for _ in headers) + "|\n")
        for row in rows:
            cells = [format_metric(c) if isinstance(c, float) or c is None else str(c) for c in row]
            self._parts.append("| " + " | ".join(cells) + " |\n")

    def newLine(self):
        self._parts.append("\n")

    def text(self) -> str:
        return "".join(self._parts)

