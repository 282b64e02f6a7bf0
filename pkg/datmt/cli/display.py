"""Display utilities for datmt CLI.

Commands print aligned plain-text tables, or JSON with --json.
"""

import json
import shutil
from typing import Any, List, Optional, Sequence


def get_terminal_width() -> int:
    """Get terminal width, with fallback to 80 columns."""
    try:
        return shutil.get_terminal_size().columns
    except Exception:
        return 80


def print_json(data: Any) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True))


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]],
                 indent: int = 2, column_gap: int = 2,
                 align_right: Optional[Sequence[bool]] = None) -> List[str]:
    """Format rows as an aligned plain-text table.

    Args:
        headers: Column titles
        rows: Cell values (converted with str)
        indent: Spaces before each line
        column_gap: Spaces between columns
        align_right: Per-column right alignment (default: left for the
            first column, right for the others)

    Returns:
        Lines ready to print, header first
    """
    cells = [[str(c) for c in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    if align_right is None:
        align_right = [i > 0 for i in range(len(headers))]

    prefix = " " * indent
    gap = " " * column_gap
    lines = []
    for row in cells:
        parts = [cell.rjust(w) if right else cell.ljust(w)
                 for cell, w, right in zip(row, widths, align_right)]
        lines.append(prefix + gap.join(parts).rstrip())
    lines.insert(1, prefix + gap.join("-" * w for w in widths))
    return lines


def format_metric(value: Optional[float]) -> str:
    """x100 metric with one decimal, or n/a."""
    return "n/a" if value is None else f"{value:.1f}"


def truncate(text: str, width: int) -> str:
    if len(text) <= width:
        return text
    return text[:max(width - 1, 0)] + "…"


def format_duration(seconds: float) -> str:
    """Format duration as human-readable string.

    Examples:
        0.42 -> "0.42s"
        45 -> "45s"
        90 -> "1min 30s"
        3665 -> "1h 1min 5s"
    """
    if seconds < 10:
        return f"{seconds:.2f}s"
    if seconds < 60:
        return f"{int(seconds)}s"

    minutes, secs = divmod(int(seconds), 60)
    if minutes < 60:
        if secs > 0:
            return f"{minutes}min {secs}s"
        return f"{minutes}min"

    hours, mins = divmod(minutes, 60)
    parts = [f"{hours}h"]
    if mins > 0:
        parts.append(f"{mins}min")
    if secs > 0:
        parts.append(f"{secs}s")
    return " ".join(parts)
