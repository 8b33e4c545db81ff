"""Turn COCO ground-truth boxes into node classes and same-segment edge labels."""

from __future__ import annotations

import dataclasses
import logging
from typing import List, Sequence, Set, Tuple

from .doc_model import (
    NEGATIVE,
    POSITIVE,
    ClassSchema,
    DocumentGraph,
    Page,
    Rect,
    rect_iou,
    spanning_rect,
)
from .errors import SchemaError

log = logging.getLogger(__name__)


def _span_iou(cells, annotation: Rect) -> float:
    if not cells:
        return 0.0
    return rect_iou(spanning_rect(c.bbox for c in cells), annotation)


def assign_cells(annotation: Rect, page: Page, iou_floor: float = 0.95) -> Set[int]:
    """Cells that make up ``annotation``.

    Starts from every cell overlapping the box. If the spanning box of that
    set is below ``iou_floor``, cells are dropped one at a time, largest area
    outside the annotation first, and the prefix with the best IoU wins
    (ties go to fewer removals).
    """
    touching = [c for c in page.cells if c.bbox.intersection_area(annotation) > 0]
    if not touching:
        return set()
    best_iou = _span_iou(touching, annotation)
    if best_iou >= iou_floor:
        return {c.id for c in touching}
    order = sorted(
        touching,
        key=lambda c: (-(c.bbox.area - c.bbox.intersection_area(annotation)), c.id),
    )
    best_k = 0
    for k in range(1, len(order) + 1):
        iou = _span_iou(order[k:], annotation)
        if iou > best_iou:
            best_iou, best_k = iou, k
    return {c.id for c in order[best_k:]}


@dataclasses.dataclass
class LabelStats:
    conflicts: int = 0
    unowned: int = 0
    empty_annotations: int = 0


def label_graph(
    graph: DocumentGraph,
    annotations: Sequence[Tuple[int, Rect]],
    schema: ClassSchema,
    iou_floor: float = 0.95,
    stats: LabelStats = None,
) -> DocumentGraph:
    """Attach node classes, edge labels and owning-annotation indices.

    A cell claimed by several annotations goes to the one it overlaps most
    (ties: earlier annotation). Unclaimed cells get the background class and
    every edge touching them is negative.
    """
    stats = stats if stats is not None else LabelStats()
    page = graph.page
    owner: List[int] = [-1] * graph.num_nodes
    owner_overlap = [0.0] * graph.num_nodes
    conflicts = 0
    for k, (class_id, box) in enumerate(annotations):
        if not 0 <= class_id < len(schema):
            raise SchemaError(f"annotation class {class_id} outside schema")
        ids = assign_cells(box, page, iou_floor)
        if not ids:
            stats.empty_annotations += 1
        for i in sorted(ids):
            ov = page.cells[i].bbox.intersection_area(box)
            if owner[i] >= 0:
                conflicts += 1
                if ov <= owner_overlap[i]:
                    continue
            owner[i], owner_overlap[i] = k, ov
    node_labels = tuple(
        annotations[o][0] if o >= 0 else schema.background for o in owner
    )
    edge_labels = tuple(
        POSITIVE if owner[e.src] >= 0 and owner[e.src] == owner[e.dst] else NEGATIVE
        for e in graph.edges
    )
    stats.unowned += sum(o < 0 for o in owner)
    stats.conflicts += conflicts
    if conflicts:
        log.warning("page %s: %d contested cell claims", page.page_id, conflicts)
    return dataclasses.replace(
        graph, node_labels=node_labels, edge_labels=edge_labels, node_segments=tuple(owner)
    )
