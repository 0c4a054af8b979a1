"""Comparison tables with deltas against the first row (arrow-annotated)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

UP, DOWN = "↑", "↓"


@dataclass(frozen=True)
class Column:
    key: str
    header: str
    digits: int = 1


def fmt_num(v: float | None, digits: int = 1) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    s = f"{round(float(v), digits):.{digits}f}"
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def delta(value: float | None, ref: float | None, digits: int = 1) -> float | None:
    if value is None or ref is None:
        return None
    return round(float(value) - float(ref), digits)


def delta_text(value: float | None, ref: float | None, digits: int = 1) -> str:
    d = delta(value, ref, digits)
    if d is None:
        return "(n/a)"
    if d == 0:
        return "(same)"
    return f"({UP if d > 0 else DOWN} {fmt_num(abs(d), digits)})"


def render(title: str, columns: Sequence[Column], rows: Sequence[tuple[str, Mapping[str, Any]]], header: str = "") -> dict:
    """Render ``rows`` as an aligned text table plus a JSON-able structure.

    Every row after the first carries a delta against the first row.
    """
    if not rows:
        raise ValueError("render needs at least one row")
    ref = rows[0][1]
    cells = [["Model"] + [c.header for c in columns]]
    out_rows = []
    for i, (name, vals) in enumerate(rows):
        line = [name]
        jrow: dict[str, Any] = {"name": name}
        for c in columns:
            v = vals.get(c.key)
            text = fmt_num(v, c.digits)
            if i:
                text += " " + delta_text(v, ref.get(c.key), c.digits)
                jrow[c.key] = {"value": v, "delta": delta(v, ref.get(c.key), c.digits)}
            else:
                jrow[c.key] = {"value": v, "delta": None}
            line.append(text)
        cells.append(line)
        out_rows.append(jrow)
    widths = [max(len(r[j]) for r in cells) for j in range(len(cells[0]))]
    lines = [title]
    if header:
        lines.append(header)
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    lines.append(sep)
    for k, r in enumerate(cells):
        lines.append("  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip())
        if k == 0:
            lines.append(sep)
    lines.append(sep)
    notes = consistency_notes(rows)
    lines.extend(f"note: {n}" for n in notes)
    return {"title": title, "text": "\n".join(lines) + "\n", "rows": out_rows, "notes": notes}


def consistency_notes(rows: Sequence[tuple[str, Mapping[str, Any]]], tol: float = 0.05) -> list[str]:
    """Flag rows whose recall (%) disagrees with TP / (TP + FN)."""
    notes = []
    for name, vals in rows:
        tp, fn, rec = vals.get("tp"), vals.get("fn"), vals.get("recall")
        if tp is None or fn is None or rec is None or tp + fn == 0:
            continue
        implied = 100.0 * tp / (tp + fn)
        if abs(implied - rec) > tol:
            notes.append(f"{name}: recall {fmt_num(rec)} inconsistent with TP/(TP+FN) = {fmt_num(implied)}")
    return notes
