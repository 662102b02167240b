import csv
import io
from typing import Any, Optional, Sequence


class TableFormatter:
    """Plain-text table helpers used by the report writers and the CLI."""

    @staticmethod
    def rank_cell(rank: Optional[float], accuracy: Optional[float]) -> str:
        """'1 (95.6)' for rank 1 at 95.6% accuracy; '(95.6)' for unranked rows."""
        if accuracy is None:
            return "-"
        percent = f"{100.0 * accuracy:.1f}"
        if rank is None:
            return f"({percent})"
        rank_text = f"{rank:g}" if isinstance(rank, float) else str(rank)
        return f"{rank_text} ({percent})"

    @staticmethod
    def markdown(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        lines = [
            "| " + " | ".join(str(h) for h in headers) + " |",
            "|" + "|".join("---" for _ in headers) + "|",
        ]
        for row in rows:
            lines.append("| " + " | ".join(str(cell) for cell in row) + " |")
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_text(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
        return buffer.getvalue()

    @staticmethod
    def number(value: Optional[float], digits: int = 6) -> str:
        if value is None:
            return ""
        return f"{value:.{digits}f}"
