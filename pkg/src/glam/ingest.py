"""Loading, cleaning and merging of parsed text cells; COCO ground truth I/O."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from statistics import median
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .doc_model import Cell, ClassSchema, Page, Rect
from .errors import AdapterError, ParseError, SchemaError, VersionError

log = logging.getLogger(__name__)

CELL_FORMAT_VERSION = 1


def _decode_json(raw: bytes, what: str):
    try:
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    except UnicodeDecodeError as exc:
        raise ParseError(f"malformed {what}: not UTF-8", exc.start) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed {what}: {exc.msg}", offset) from None


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def page_from_dict(d: dict) -> Page:
    """Build a page from one CellFileV1 page record, clamping boxes into the page."""
    width, height = float(d["width"]), float(d["height"])
    cells = []
    for raw in d.get("cells", []):
        box = raw["bbox"]
        if len(box) != 4:
            raise ParseError(f"cell bbox must have 4 numbers, got {len(box)}")
        x0 = _clamp(float(box[0]), 0.0, width)
        y0 = _clamp(float(box[1]), 0.0, height)
        x1 = _clamp(float(box[2]), 0.0, width)
        y1 = _clamp(float(box[3]), 0.0, height)
        if not (x0 < x1 and y0 < y1):
            log.warning("page %s: dropping cell with empty box after clamping", d.get("page_id"))
            continue
        i = len(cells)
        cells.append(
            Cell(
                id=i,
                bbox=Rect(x0, y0, x1, y1),
                text=str(raw.get("text", "")),
                font_name=str(raw.get("font_name", "unknown")),
                font_size=float(raw.get("font_size", 10.0)),
                reading_index=i,
            )
        )
    return Page(width, height, tuple(cells), str(d.get("page_id", "")))


def page_to_dict(page: Page) -> dict:
    cells = sorted(page.cells, key=lambda c: c.reading_index)
    return {
        "page_id": page.page_id,
        "width": page.width,
        "height": page.height,
        "cells": [
            {
                "bbox": list(c.bbox.as_tuple()),
                "text": c.text,
                "font_name": c.font_name,
                "font_size": c.font_size,
            }
            for c in cells
        ],
    }


def cells_document(pages: Sequence[Page]) -> dict:
    return {"format_version": CELL_FORMAT_VERSION, "pages": [page_to_dict(p) for p in pages]}


def parse_cells(raw: bytes) -> List[Page]:
    doc = _decode_json(raw, "cell file")
    if not isinstance(doc, dict) or "pages" not in doc:
        raise ParseError("cell file must be an object with a 'pages' list")
    version = doc.get("format_version")
    if version != CELL_FORMAT_VERSION:
        raise VersionError(f"unsupported cell file format_version {version!r}")
    try:
        return [page_from_dict(p) for p in doc["pages"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed cell record: {exc!r}") from None


def load_cells(path) -> List[Page]:
    return parse_cells(Path(path).read_bytes())


def dump_json(obj, path) -> None:
    """Write ``obj`` as UTF-8 JSON, atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def save_cells(pages: Sequence[Page], path) -> None:
    dump_json(cells_document(pages), path)


def clean_cells(page: Page, min_px: float = 10.0) -> Page:
    """Drop tiny boxes (small in both dimensions) and blank text, trim whitespace."""
    kept = []
    for c in page.cells:
        if c.bbox.width < min_px and c.bbox.height < min_px:
            continue
        text = c.text.strip()
        if not text:
            continue
        kept.append(Cell(c.id, c.bbox, text, c.font_name, c.font_size, c.reading_index))
    return page.renumbered(kept)


def merge_adjacent(page: Page, h_gap_frac: float = 0.5, v_gap_frac: float = 0.2) -> Page:
    """Join horizontally adjacent cells of the same font into runs.

    Two cells merge when they overlap vertically by at least half the shorter
    height, their bottoms differ by at most ``v_gap_frac`` times the median
    font size, and the horizontal gap is at most ``h_gap_frac`` times the
    median font size. Cells are visited in reading order; each absorbs its
    nearest mergeable right neighbor until none is left. Passes repeat until
    nothing changes.
    """
    if len(page.cells) < 2:
        return page.renumbered(page.cells)
    fs = median(c.font_size for c in page.cells)
    max_gap, max_dy = h_gap_frac * fs, v_gap_frac * fs
    fonts: Dict[str, int] = {}
    cells = sorted(page.cells, key=lambda c: c.reading_index)
    changed = True
    while changed:
        changed = False
        box = np.array([c.bbox.as_tuple() for c in cells], dtype=np.float64)
        size = np.array([c.font_size for c in cells], dtype=np.float64)
        font = np.array([fonts.setdefault(c.font_name, len(fonts)) for c in cells])
        ri = np.array([c.reading_index for c in cells])
        alive = np.ones(len(cells), dtype=bool)
        for i in range(len(cells)):
            if not alive[i]:
                continue
            while True:
                x0, y0, x1, y1 = box[i]
                gap = box[:, 0] - x1
                overlap = np.minimum(y1, box[:, 3]) - np.maximum(y0, box[:, 1])
                ok = (
                    alive
                    & (box[:, 0] >= x0)
                    & ~((box[:, 0] == x0) & (ri < ri[i]))
                    & (font == font[i])
                    & (np.abs(size - size[i]) <= 0.5)
                    & (overlap >= 0.5 * np.minimum(y1 - y0, box[:, 3] - box[:, 1]))
                    & (np.abs(y1 - box[:, 3]) <= max_dy)
                    & (gap <= max_gap)
                    & (box[:, 2] > x1)
                )
                ok[i] = False
                js = np.flatnonzero(ok)
                if not len(js):
                    break
                j = js[np.lexsort((ri[js], gap[js]))[0]]
                a, b = cells[i], cells[j]
                cells[i] = Cell(
                    id=min(a.id, b.id),
                    bbox=a.bbox.union(b.bbox),
                    text=f"{a.text} {b.text}",
                    font_name=a.font_name,
                    font_size=a.font_size,
                    reading_index=min(a.reading_index, b.reading_index),
                )
                box[i] = cells[i].bbox.as_tuple()
                ri[i] = cells[i].reading_index
                alive[j] = False
                changed = True
        cells = sorted((c for c, k in zip(cells, alive) if k), key=lambda c: c.reading_index)
    return page.renumbered(cells)


def load_coco_dict(doc: dict, schema: ClassSchema) -> Dict[str, List[Tuple[int, Rect]]]:
    cat_to_class = {}
    for cat in doc.get("categories", []):
        cat_to_class[cat["id"]] = schema.index(cat["name"])
    images = {}
    out: Dict[str, List[Tuple[int, Rect]]] = {}
    for img in doc.get("images", []):
        page_id = Path(img["file_name"]).stem
        images[img["id"]] = page_id
        out.setdefault(page_id, [])
    for ann in doc.get("annotations", []):
        if ann["category_id"] not in cat_to_class:
            raise SchemaError(f"unknown category id {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w < 0 or h < 0:
            raise ParseError(f"annotation {ann.get('id')} has negative size")
        page_id = images[ann["image_id"]]
        out[page_id].append((cat_to_class[ann["category_id"]], Rect(x, y, x + w, y + h)))
    return out


def load_coco(path, schema: ClassSchema) -> Dict[str, List[Tuple[int, Rect]]]:
    """Ground-truth boxes per page id (image file stem), as (class_id, Rect)."""
    return load_coco_dict(_decode_json(Path(path).read_bytes(), "COCO file"), schema)


def coco_image_index(doc: dict) -> Dict[int, dict]:
    return {img["id"]: img for img in doc.get("images", [])}


def adapt_doclaynet(raw_page_json: bytes) -> Page:
    """Map one DocLayNet extra-files page record onto a :class:`Page`.

    Accepts the published layout (``metadata`` with ``coco_width`` /
    ``coco_height`` and cells carrying ``bbox`` as ``[x, y, w, h]`` plus a
    ``font`` object) and tolerates flat ``font_name`` / ``font_size`` keys.
    """
    try:
        doc = json.loads(raw_page_json)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise AdapterError(f"not a DocLayNet page record: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("cells"), list):
        raise AdapterError("DocLayNet record has no 'cells' list")
    meta = doc.get("metadata") or {}
    try:
        width = float(meta.get("coco_width", doc.get("width")))
        height = float(meta.get("coco_height", doc.get("height")))
    except (TypeError, ValueError):
        raise AdapterError("DocLayNet record lacks page dimensions") from None
    page_id = meta.get("page_hash") or Path(str(meta.get("original_filename", ""))).stem
    cells = []
    for raw in doc["cells"]:
        try:
            x, y, w, h = (float(v) for v in raw["bbox"])
        except (KeyError, TypeError, ValueError):
            raise AdapterError("DocLayNet cell without a usable bbox") from None
        font = raw.get("font") or {}
        name = font.get("name", raw.get("font_name")) or "unknown"
        size = font.get("size", raw.get("font_size"))
        size = float(size) if size else 10.0
        cells.append(
            {"bbox": [x, y, x + w, y + h], "text": raw.get("text", ""),
             "font_name": name, "font_size": size}
        )
    try:
        return page_from_dict(
            {"page_id": page_id, "width": width, "height": height, "cells": cells}
        )
    except Exception as exc:
        raise AdapterError(f"DocLayNet record rejected: {exc}") from None
