"""SVG figures: annotated pages and mAP reports.

Figures are built on bare ``Figure`` objects (no pyplot state), so rendering
is safe from worker threads. SVG output is byte-stable: the date stamp is
dropped and element ids are salted with a constant.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .doc_model import ClassSchema, Page, SegmentAnnotation
from .evaluate import MapReport

_SVG_RC = {"svg.hashsalt": "glam", "svg.fonttype": "none", "font.size": 8}


def class_color(class_id: int, n: int) -> tuple:
    cmap = matplotlib.colormaps["tab20" if n > 10 else "tab10"]
    return cmap(class_id % cmap.N)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def render_page(page: Page, segments: Sequence[SegmentAnnotation], schema: ClassSchema,
                path, scores: bool = True, title: Optional[str] = None) -> Path:
    """Draw cell outlines in grey and segments as colored, labeled boxes.

    ``segments`` may be any objects with ``bbox``, ``class_id`` and ``score``.
    """
    scale = 8.0 / max(page.width, page.height)
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(page.width * scale, page.height * scale))
        ax = fig.add_axes((0, 0, 1, 1))
        ax.set_xlim(0, page.width)
        ax.set_ylim(page.height, 0)
        ax.set_axis_off()
        ax.add_patch(Rectangle((0, 0), page.width, page.height, fill=False, lw=0.8, ec="black"))
        for c in page.cells:
            b = c.bbox
            ax.add_patch(Rectangle((b.x0, b.y0), b.width, b.height, fill=False, lw=0.3, ec="0.6"))
        for s in segments:
            b = s.bbox
            color = class_color(s.class_id, len(schema))
            ax.add_patch(Rectangle((b.x0, b.y0), b.width, b.height, fill=True, fc=(*color[:3], 0.15),
                                   ec=color, lw=1.0))
            label = schema.name(s.class_id)
            if scores:
                label = f"{label} {s.score:.2f}"
            ax.text(b.x0, b.y0 - 1.5, label, color=color, fontsize=5, va="bottom", ha="left")
        if title:
            ax.text(4, 12, title, fontsize=6, va="top")
        return _save(fig, path)


def render_report(report: MapReport, path) -> Path:
    """Per-class mAP bars next to the overall AP-vs-IoU-threshold curve."""
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(9, 3.5))
        left, right = fig.subplots(1, 2, gridspec_kw={"width_ratios": [3, 2]})
        names = [n for n in report.class_names if n in report.per_class]
        cm = report.class_map()
        vals = [100 * cm[n] for n in names]
        left.barh(range(len(names)), vals, color="0.35")
        left.set_yticks(range(len(names)))
        left.set_yticklabels(names)
        left.invert_yaxis()
        left.set_xlim(0, 100)
        left.set_xlabel("mAP@[.50:.95] (%)")
        for y, v in enumerate(vals):
            left.text(min(v + 1, 88), y, f"{v:.1f}", va="center", fontsize=7)
        ts = report.thresholds
        right.plot(ts, [100 * report.at_threshold(t) for t in ts], marker="o", color="black", lw=1)
        right.set_ylim(0, 101)
        right.set_xlabel("IoU threshold")
        right.set_ylabel("AP (%)")
        right.set_title(f"overall {100 * report.overall:.1f}", fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def render_ladder(jitters: Iterable[float], reports: Sequence[MapReport], path) -> Path:
    """mAP at IoU .50 and .95 as ground-truth jitter grows."""
    jitters = list(jitters)
    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(4.5, 3))
        ax = fig.add_subplot()
        for thr, style in ((0.5, "o-"), (0.75, "s--"), (0.95, "^:")):
            ax.plot(jitters, [100 * r.at_threshold(thr) for r in reports], style, color="black",
                    lw=1, label=f"IoU {thr:.2f}")
        ax.set_xlabel("ground-truth jitter (px)")
        ax.set_ylabel("mAP (%)")
        ax.set_ylim(0, 101)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
