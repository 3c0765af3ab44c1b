"""Markdown/CSV tables from metric summaries.

Rows follow the method registry order. Values print with three decimals,
half-even rounding on the shortest decimal form, and without the leading
zero (``.734``). In every column the entries ranked in the top three (by
competition ranking, so ties share a rank) are bold.
"""

from __future__ import annotations

import csv
import io
import math
from decimal import ROUND_HALF_EVEN, Decimal

from .metrics import MetricsSummary
from .scorers import METHODS

METRIC_COLUMNS = (
    ("auroc", "AUROC ↑", True),
    ("aupr_in", "AUPR-IN ↑", True),
    ("aupr_out", "AUPR-OUT ↑", True),
    ("autc", "AUTC ↓", False),
)


def round3(x: float) -> Decimal | None:
    if x is None or not math.isfinite(x):
        return None
    return Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN)


def fmt3(x: float) -> str:
    d = round3(x)
    if d is None:
        return "-"
    text = f"{d:.3f}"
    if text.startswith("0."):
        return text[1:]
    if text.startswith("-0."):
        return "-" + text[2:]
    return text


def top3_mask(values: list, higher_is_better: bool) -> list[bool]:
    rounded = [round3(v) for v in values]
    out = []
    for v in rounded:
        if v is None:
            out.append(False)
            continue
        better = sum(
            1 for w in rounded if w is not None and (w > v if higher_is_better else w < v)
        )
        out.append(better < 3)
    return out


def _order(methods):
    registry = list(METHODS)
    known = [m for m in registry if m in methods]
    return known + [m for m in methods if m not in registry]


def _display(method: str) -> str:
    info = METHODS.get(method)
    return info.display if info else method


def _grid(groups: dict[str, dict[str, MetricsSummary]]):
    """Rows (methods) and column specs for one or more summary groups."""
    methods = _order(list(dict.fromkeys(m for g in groups.values() for m in g)))
    multi = len(groups) > 1
    return methods, multi


def _bold(text: str, on: bool) -> str:
    return f"**{text}**" if on and text != "-" else text


def render_ood_table(groups: dict[str, dict[str, MetricsSummary]]) -> tuple[str, list[list[str]]]:
    """Markdown and CSV rows for the AUROC / AUPR / AUTC table."""
    methods, multi = _grid(groups)
    headers, columns = ["Method"], []
    for key, title, higher in METRIC_COLUMNS:
        for gname, group in groups.items():
            headers.append(f"{title} ({gname})" if multi else title)
            values = [getattr(group[m], key) if m in group else None for m in methods]
            columns.append((values, top3_mask(values, higher)))
    return _assemble(headers, methods, columns)


def render_per_class_table(groups: dict[str, dict[str, MetricsSummary]]) -> tuple[str, list[list[str]]]:
    methods, multi = _grid(groups)
    headers, columns = ["Method"], []
    class_names = list(
        dict.fromkeys(c for g in groups.values() for s in g.values() for c in s.per_class_accuracy)
    )
    for cname in class_names + ["OOD"]:
        for gname, group in groups.items():
            headers.append(f"{cname} ({gname})" if multi else cname)
            values = []
            for m in methods:
                s = group.get(m)
                if s is None:
                    values.append(None)
                elif cname == "OOD":
                    values.append(s.ood_accuracy)
                else:
                    values.append(s.per_class_accuracy.get(cname))
            columns.append((values, top3_mask(values, True)))
    return _assemble(headers, methods, columns)


def _assemble(headers, methods, columns):
    md = ["| " + " | ".join(headers) + " |", "|" + "|".join(["---"] + ["---:"] * (len(headers) - 1)) + "|"]
    rows = [list(headers)]
    for i, m in enumerate(methods):
        cells = [fmt3(vals[i]) if vals[i] is not None else "-" for vals, _ in columns]
        md.append(
            "| "
            + " | ".join([_display(m)] + [_bold(c, mask[i]) for c, (_, mask) in zip(cells, columns)])
            + " |"
        )
        rows.append([m] + [str(round3(vals[i])) if round3(vals[i]) is not None else "" for vals, _ in columns])
    return "\n".join(md) + "\n", rows


def render_report(groups: dict[str, dict[str, MetricsSummary]]) -> tuple[str, str]:
    """Full Markdown document and the CSV of the OOD table."""
    ood_md, ood_rows = render_ood_table(groups)
    pc_md, _ = render_per_class_table(groups)
    md = "## OOD detection\n\n" + ood_md + "\n## Per-class accuracy (Youden threshold)\n\n" + pc_md
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(ood_rows)
    return md, buf.getvalue()
