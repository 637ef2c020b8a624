"""Aggregate result files into a markdown accuracy table and per-dataset SVG bar charts."""

from __future__ import annotations

from collections import defaultdict
from html import escape
from pathlib import Path
from typing import Iterable

import numpy as np

from .harness import RunResult

EMPTY_CELL = "—"
_PALETTE = ("#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860", "#DA8BC3", "#8C8C8C")

Cells = dict[tuple[str, str, str], list[float]]  # (strategy, backend, dataset) -> accuracies


def collect(paths: Iterable[str | Path]) -> Cells:
    cells: Cells = defaultdict(list)
    for p in sorted(str(p) for p in paths):
        res = RunResult.read(p)
        key = (res.header["strategy"], res.header.get("backend", "?"), res.header["dataset"])
        cells[key].append(res.accuracy)
    if not cells:
        raise ValueError("no result files given")
    return dict(cells)


def _stats(accs: list[float]) -> tuple[float, float]:
    a = np.asarray(accs, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def markdown_table(cells: Cells) -> str:
    rows = sorted({(s, b) for s, b, _ in cells})
    datasets = sorted({d for _, _, d in cells})
    out = ["| Strategy | Backend | " + " | ".join(datasets) + " |", "|---|---|" + "---|" * len(datasets)]
    for s, b in rows:
        vals = []
        for d in datasets:
            accs = cells.get((s, b, d))
            if accs:
                m, sd = _stats(accs)
                vals.append(f"{100 * m:.1f} ± {100 * sd:.1f} (n={len(accs)})")
            else:
                vals.append(EMPTY_CELL)
        out.append(f"| {s} | {b} | " + " | ".join(vals) + " |")
    out.append("")
    out.append(
        "Accuracy (%) on test nodes, mean ± sample std across seeds. Parse failures and abstentions "
        "count as errors; ties go to the earliest category."
    )
    return "\n".join(out) + "\n"


def svg_grouped_bars(dataset: str, cells: Cells) -> str:
    """Vertical bars grouped by strategy, one colored bar per backend."""
    strategies = sorted({s for s, _, d in cells if d == dataset})
    backends = sorted({b for _, b, d in cells if d == dataset})
    bar_w, gap, plot_h, top, left = 18, 24, 200, 40, 50
    group_w = bar_w * len(backends) + gap
    width = left + group_w * len(strategies) + 20
    legend_y = top + plot_h + 90
    height = legend_y + 18 * len(backends) + 10

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="10" y="20" font-size="14" font-weight="bold">{escape(dataset)}: accuracy (%)</text>',
    ]
    base = top + plot_h
    for t in range(0, 101, 25):
        y = base - t / 100 * plot_h
        parts.append(f'<line x1="{left}" y1="{y:.2f}" x2="{width - 10}" y2="{y:.2f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{t}</text>')
    for gi, s in enumerate(strategies):
        x0 = left + gi * group_w + gap / 2
        for bi, b in enumerate(backends):
            accs = cells.get((s, b, dataset))
            if not accs:
                continue
            mean, std = _stats(accs)
            h = max(0.0, min(1.0, mean)) * plot_h
            x = x0 + bi * bar_w
            parts.append(
                f'<rect x="{x:.2f}" y="{base - h:.2f}" width="{bar_w - 2}" height="{h:.2f}" '
                f'fill="{_PALETTE[bi % len(_PALETTE)]}"><title>{escape(s)} / {escape(b)}: {100 * mean:.1f}</title></rect>'
            )
            if std > 0:
                cx = x + (bar_w - 2) / 2
                y_lo = base - min(1.0, mean + std) * plot_h
                y_hi = base - max(0.0, mean - std) * plot_h
                parts.append(f'<line x1="{cx:.2f}" y1="{y_lo:.2f}" x2="{cx:.2f}" y2="{y_hi:.2f}" stroke="black"/>')
        cx = x0 + bar_w * len(backends) / 2
        parts.append(
            f'<text x="{cx:.2f}" y="{base + 12}" text-anchor="end" transform="rotate(-35 {cx:.2f} {base + 12})">'
            f"{escape(s)}</text>"
        )
    for bi, b in enumerate(backends):
        y = legend_y + bi * 18
        parts.append(f'<rect x="{left}" y="{y - 10}" width="12" height="12" fill="{_PALETTE[bi % len(_PALETTE)]}"/>')
        parts.append(f'<text x="{left + 18}" y="{y}">{escape(b)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(paths: Iterable[str | Path], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = collect(paths)
    md = out / "report.md"
    md.write_text(markdown_table(cells), encoding="utf-8")
    written = [md]
    for d in sorted({d for _, _, d in cells}):
        p = out / f"{_slug(d)}.svg"
        p.write_text(svg_grouped_bars(d, cells), encoding="utf-8")
        written.append(p)
    return written


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s) or "dataset"
