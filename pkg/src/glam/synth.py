"""Deterministic synthetic pages with layout ground truth aligned to their cells.

Each page is assembled from blocks (paragraphs, headings, list items,
captions, tables, formulas, footnotes, running headers and footers). Every
block expands into word-level cells and its ground-truth box is the
spanning rect of those cells, so labels snap exactly by construction.
Coordinates are multiples of 1/4 px, which keeps xywh <-> xyxy conversions
exact in binary floating point.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .doc_model import DOCLAYNET_CLASSES, ClassSchema
from .ingest import CELL_FORMAT_VERSION

PAGE_W, PAGE_H = 850.0, 1100.0
MARGIN_X, TOP, BOTTOM = 64.0, 80.0, 1030.0
COL_GAP = 32.0
MAX_CELLS = 500

WORDS = (
    "the of and to in is for that with as on by this are be from at an which or "
    "model data layout page document graph node edge text table figure results "
    "method analysis segment class feature network training value report market "
    "section system order result annual revenue total policy patent claim court "
    "manual device shall provide each within under between using based system "
    "performance approach structure information process example general specific "
    "financial statement government tender regulation article paragraph element"
).split()

CAPTION_LEADS = ("Figure", "Table", "Fig.", "Chart")
FORMULA_TOKENS = ("x", "y", "=", "+", "-", "(", ")", "a", "b", "2", "n", "i", "k", "f(x)", "sum", "<=", "*")


def q(v: float) -> float:
    """Round to the nearest quarter pixel."""
    return round(v * 4.0) / 4.0


def word_width(word: str, size: float, mono: bool = False) -> float:
    per = 0.6 if mono else 0.5
    return q(max(len(word), 1) * size * per + 1.0)


@dataclass
class Block:
    class_name: str
    cells: List[dict] = field(default_factory=list)

    def add(self, x0, y0, x1, y1, text, font, size):
        self.cells.append(
            {"bbox": [q(x0), q(y0), q(x1), q(y1)], "text": text, "font_name": font, "font_size": size}
        )

    @property
    def box(self) -> Tuple[float, float, float, float]:
        xs0 = min(c["bbox"][0] for c in self.cells)
        ys0 = min(c["bbox"][1] for c in self.cells)
        xs1 = max(c["bbox"][2] for c in self.cells)
        ys1 = max(c["bbox"][3] for c in self.cells)
        return xs0, ys0, xs1, ys1


class _Writer:
    """Lays words left to right inside a column, wrapping lines."""

    def __init__(self, rng: np.random.Generator, x0: float, x1: float):
        self.rng, self.x0, self.x1 = rng, x0, x1

    def words(self, n: int, capitalize: bool = False) -> List[str]:
        out = [str(w) for w in self.rng.choice(WORDS, size=n)]
        if capitalize and out:
            out[0] = out[0].capitalize()
        return out

    def flow(self, block: Block, words: Sequence[str], y: float, size: float, font: str,
             indent: float = 0.0, max_lines: int = 99, mono: bool = False,
             center: bool = False) -> float:
        """Place ``words`` as wrapped lines starting at ``y``; returns the next free y."""
        line_h = q(size * 1.15)
        lead = q(size * 1.4)
        space = q(size * 0.3)
        lines: List[List[Tuple[str, float]]] = [[]]
        x = self.x0 + indent
        for w in words:
            ww = word_width(w, size, mono)
            if lines[-1] and x + ww > self.x1:
                if len(lines) >= max_lines:
                    break
                lines.append([])
                x = self.x0 + indent
            lines[-1].append((w, ww))
            x += ww + space
        for line in lines:
            if not line:
                continue
            total = sum(ww for _, ww in line) + space * (len(line) - 1)
            x = self.x0 + indent
            if center:
                x = q(self.x0 + (self.x1 - self.x0 - total) / 2)
            for w, ww in line:
                block.add(x, y, x + ww, y + line_h, w, font, size)
                x = q(x + ww + space)
            y = q(y + lead)
        return y


def _paragraph(wr: _Writer, y, base, font):
    b = Block("Text")
    n_lines = int(wr.rng.integers(2, 6))
    per_line = (wr.x1 - wr.x0) / (base * 0.5 * 5.5 + base * 0.3)
    words = wr.words(int(per_line * (n_lines - 1) + wr.rng.integers(2, max(3, int(per_line)))), True)
    words[-1] = words[-1] + "."
    return b, wr.flow(b, words, y, base, font, max_lines=n_lines)


def _section_header(wr: _Writer, y, base, font):
    b = Block("Section-header")
    num = f"{int(wr.rng.integers(1, 9))}.{int(wr.rng.integers(1, 6))}"
    words = [num] + [w.capitalize() for w in wr.words(int(wr.rng.integers(2, 5)))]
    return b, wr.flow(b, words, y, base + 2, font + "-Bold", max_lines=1)


def _list_items(wr: _Writer, y, base, font):
    blocks = []
    bullet = "•" if wr.rng.random() < 0.6 else None
    for k in range(int(wr.rng.integers(2, 5))):
        b = Block("List-item")
        mark = bullet or f"{k + 1}."
        size = base
        b.add(wr.x0 + 4, y, wr.x0 + 4 + word_width(mark, size), y + q(size * 1.15), mark, font, size)
        n = int(wr.rng.integers(4, 20))
        y = wr.flow(b, wr.words(n, True), y, size, font, indent=24, max_lines=2)
        y = q(y + size * 0.2)
        blocks.append(b)
    return blocks, y


def _caption(wr: _Writer, y, base, font):
    b = Block("Caption")
    lead = str(wr.rng.choice(CAPTION_LEADS))
    words = [lead, f"{int(wr.rng.integers(1, 12))}:"] + wr.words(int(wr.rng.integers(4, 16)), True)
    return b, wr.flow(b, words, y, base - 1, font + "-Italic", max_lines=2)


def _table(wr: _Writer, y, base, font):
    b = Block("Table")
    rows, cols = int(wr.rng.integers(3, 7)), int(wr.rng.integers(2, 5))
    size = base - 1
    col_w = (wr.x1 - wr.x0) / cols
    row_h = q(size * 1.8)
    for r in range(rows):
        for c in range(cols):
            if r == 0:
                text = str(wr.rng.choice(WORDS)).capitalize()
            elif c == 0:
                text = str(wr.rng.choice(WORDS))
            else:
                text = f"{wr.rng.integers(0, 10000) / 100:.2f}"
            x0 = wr.x0 + c * col_w + 2
            w = min(word_width(text, size), col_w - 6)
            b.add(x0, y, x0 + w, y + q(size * 1.15), text, "Helvetica", size)
        y = q(y + row_h)
    return b, y


def _formula(wr: _Writer, y, base, font):
    b = Block("Formula")
    toks = [str(t) for t in wr.rng.choice(FORMULA_TOKENS, size=int(wr.rng.integers(3, 9)))]
    return b, wr.flow(b, toks, y, base, "Courier", mono=True, center=True, max_lines=1)


BLOCK_MAKERS = {
    "Text": (_paragraph, 0.40),
    "Section-header": (_section_header, 0.14),
    "List-item": (_list_items, 0.14),
    "Caption": (_caption, 0.10),
    "Table": (_table, 0.11),
    "Formula": (_formula, 0.11),
}


def generate_page(rng: np.random.Generator, page_id: str):
    """One page as (cell-file page dict, list of (class name, xyxy box))."""
    base = float(rng.choice([10.0, 11.0, 12.0]))
    body_font = str(rng.choice(["Times", "Palatino", "Georgia", "Arial"]))
    blocks: List[Block] = []

    if rng.random() < 0.7:
        wr = _Writer(rng, MARGIN_X, PAGE_W - MARGIN_X)
        b = Block("Page-header")
        wr.flow(b, wr.words(int(rng.integers(2, 7)), True), 36.0, 9.0, "Helvetica", max_lines=1)
        blocks.append(b)
    if rng.random() < 0.7:
        wr = _Writer(rng, MARGIN_X, PAGE_W - MARGIN_X)
        b = Block("Page-footer")
        words = ["Page", str(int(rng.integers(1, 400)))] if rng.random() < 0.5 else wr.words(int(rng.integers(2, 6)), True)
        wr.flow(b, words, 1052.0, 9.0, "Helvetica", max_lines=1, center=rng.random() < 0.5)
        blocks.append(b)

    y_top = TOP
    if rng.random() < 0.45:
        wr = _Writer(rng, MARGIN_X + 60, PAGE_W - MARGIN_X - 60)
        b = Block("Title")
        y_top = wr.flow(b, [w.capitalize() for w in wr.words(int(rng.integers(3, 10)))],
                        TOP, 20.0, body_font + "-Bold", max_lines=2, center=True)
        y_top = q(y_top + 16)
        blocks.append(b)

    n_cols = 1 if rng.random() < 0.45 else 2
    col_w = (PAGE_W - 2 * MARGIN_X - (n_cols - 1) * COL_GAP) / n_cols
    kinds = list(BLOCK_MAKERS)
    weights = np.array([BLOCK_MAKERS[k][1] for k in kinds])
    weights /= weights.sum()
    budget = int(rng.integers(160, 420))
    footnote_zone = BOTTOM - 40.0

    def n_cells():
        return sum(len(b.cells) for b in blocks)

    for c in range(n_cols):
        x0 = q(MARGIN_X + c * (col_w + COL_GAP))
        wr = _Writer(rng, x0, q(x0 + col_w))
        y = y_top
        n_blocks = int(rng.integers(3, 8))
        for _ in range(n_blocks):
            if n_cells() > budget * (c + 1) / n_cols:
                break
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            maker = BLOCK_MAKERS[kind][0]
            made, y_next = maker(wr, y, base, body_font)
            made = made if isinstance(made, list) else [made]
            if y_next > footnote_zone - 10 or n_cells() + sum(len(m.cells) for m in made) > MAX_CELLS - 24:
                break
            blocks.extend(made)
            y = q(y_next + base * 1.2)
        if c == n_cols - 1 and rng.random() < 0.35:
            b = Block("Footnote")
            words = [str(int(rng.integers(1, 9)))] + wr.words(int(rng.integers(5, 14)), True)
            wr.flow(b, words, q(footnote_zone), 9.0, body_font, max_lines=2)
            if b.box[3] < BOTTOM and b.box[1] > y - base:
                blocks.append(b)

    cells, gts = [], []
    for b in blocks:
        if not b.cells:
            continue
        cells.extend(b.cells)
        gts.append((b.class_name, b.box))
    return {"page_id": page_id, "width": PAGE_W, "height": PAGE_H, "cells": cells}, gts


def generate_corpus(n_pages: int, seed: int = 0, schema: Optional[ClassSchema] = None,
                    first_index: int = 0):
    """Return ``(cell_file_dict, coco_dict)`` for ``n_pages`` pages.

    Page ``i`` is drawn from its own generator seeded by ``(seed, i)``, so any
    page can be regenerated independently and output is byte-stable.
    """
    if n_pages < 1:
        raise ValueError("n_pages must be >= 1")
    schema = schema or ClassSchema(DOCLAYNET_CLASSES)
    pages, images, anns = [], [], []
    for i in range(first_index, first_index + n_pages):
        rng = np.random.default_rng([seed, i])
        page_id = f"synth_{seed}_{i:05d}"
        page, gts = generate_page(rng, page_id)
        pages.append(page)
        image_id = len(images) + 1
        images.append({"id": image_id, "file_name": f"{page_id}.png", "width": PAGE_W, "height": PAGE_H})
        for name, (x0, y0, x1, y1) in gts:
            anns.append({
                "id": len(anns) + 1,
                "image_id": image_id,
                "category_id": schema.index(name) + 1,
                "bbox": [x0, y0, x1 - x0, y1 - y0],
                "area": (x1 - x0) * (y1 - y0),
                "iscrowd": 0,
            })
    cells = {"format_version": CELL_FORMAT_VERSION, "pages": pages}
    coco = {
        "images": images,
        "annotations": anns,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(schema.names)],
    }
    return cells, coco


def perturb(corpus, jitter_px: float = 0.0, dropout_frac: float = 0.0, seed: int = 0):
    """Jitter ground-truth box edges by U(-jitter, +jitter) and drop a fraction of cells."""
    cells_doc, coco = corpus
    cells_doc, coco = copy.deepcopy(cells_doc), copy.deepcopy(coco)
    rng = np.random.default_rng([seed, 7919])
    if dropout_frac > 0:
        for page in cells_doc["pages"]:
            n = len(page["cells"])
            k = int(round(dropout_frac * n))
            drop = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
            page["cells"] = [c for j, c in enumerate(page["cells"]) if j not in drop]
    if jitter_px > 0:
        dims = {img["id"]: (img["width"], img["height"]) for img in coco["images"]}
        for ann in coco["annotations"]:
            x, y, w, h = ann["bbox"]
            W, H = dims[ann["image_id"]]
            d = rng.uniform(-jitter_px, jitter_px, size=4)
            x0 = q(min(max(x + d[0], 0.0), W))
            y0 = q(min(max(y + d[1], 0.0), H))
            x1 = q(min(max(x + w + d[2], x0 + 0.25), W))
            y1 = q(min(max(y + h + d[3], y0 + 0.25), H))
            ann["bbox"] = [x0, y0, x1 - x0, y1 - y0]
            ann["area"] = (x1 - x0) * (y1 - y0)
    return cells_doc, coco
