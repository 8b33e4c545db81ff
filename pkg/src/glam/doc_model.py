"""Core value types: rectangles, text cells, pages, graphs and segments.

Coordinates are page pixels with the origin at the top-left corner and
y growing downward (the COCO convention).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, EmptySegment, SchemaError

DOCLAYNET_CLASSES = (
    "Caption",
    "Footnote",
    "Formula",
    "List-item",
    "Page-footer",
    "Page-header",
    "Picture",
    "Section-header",
    "Table",
    "Text",
    "Title",
)

PUBLAYNET_CLASSES = ("text", "title", "list", "table", "figure")


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ContractError(f"invalid rect {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def union(self, other: "Rect") -> "Rect":
        return Rect(
            min(self.x0, other.x0),
            min(self.y0, other.y0),
            max(self.x1, other.x1),
            max(self.y1, other.y1),
        )

    def intersection_area(self, other: "Rect") -> float:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def to_xywh(self):
        return [self.x0, self.y0, self.x1 - self.x0, self.y1 - self.y0]

    @classmethod
    def from_xywh(cls, box: Sequence[float]) -> "Rect":
        x, y, w, h = box
        return cls(x, y, x + w, y + h)


def rect_iou(a: Rect, b: Rect) -> float:
    """Intersection over union; 0 for disjoint or two zero-area rects."""
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def spanning_rect(rects: Iterable[Rect]) -> Rect:
    """Smallest rect that covers every rect in ``rects``."""
    rects = list(rects)
    if not rects:
        raise EmptySegment("cannot span an empty set of rects")
    return Rect(
        min(r.x0 for r in rects),
        min(r.y0 for r in rects),
        max(r.x1 for r in rects),
        max(r.y1 for r in rects),
    )


@dataclass(frozen=True)
class Cell:
    id: int
    bbox: Rect
    text: str
    font_name: str = "unknown"
    font_size: float = 10.0
    reading_index: int = 0

    def __post_init__(self):
        b = self.bbox
        if not (b.x0 < b.x1 and b.y0 < b.y1):
            raise ContractError(f"cell {self.id} has degenerate bbox {b.as_tuple()}")
        if not self.font_size > 0:
            raise ContractError(f"cell {self.id} has non-positive font size")


@dataclass(frozen=True)
class Page:
    width: float
    height: float
    cells: Tuple[Cell, ...] = ()
    page_id: str = ""

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ContractError(f"page {self.page_id!r} has non-positive size")
        object.__setattr__(self, "cells", tuple(self.cells))
        seen = set()
        for c in self.cells:
            if c.reading_index in seen:
                raise ContractError(
                    f"page {self.page_id!r}: duplicate reading_index {c.reading_index}"
                )
            seen.add(c.reading_index)

    def __len__(self):
        return len(self.cells)

    def boxes(self) -> np.ndarray:
        """Cell boxes as an ``[N, 4]`` float64 array of (x0, y0, x1, y1)."""
        if not self.cells:
            return np.zeros((0, 4))
        return np.array([c.bbox.as_tuple() for c in self.cells], dtype=np.float64)

    def renumbered(self, cells: Sequence[Cell]) -> "Page":
        """New page whose cells get dense ids and reading indices, keeping order."""
        ordered = sorted(cells, key=lambda c: c.reading_index)
        fresh = [
            Cell(i, c.bbox, c.text, c.font_name, c.font_size, i)
            for i, c in enumerate(ordered)
        ]
        return Page(self.width, self.height, tuple(fresh), self.page_id)


class EdgeKind(enum.IntEnum):
    LEFT = 0
    RIGHT = 1
    UP = 2
    DOWN = 3
    READING_NEXT = 4
    READING_PREV = 5

    @property
    def opposite(self) -> "EdgeKind":
        return _OPPOSITE[self]

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "EdgeKind":
        return cls[label.upper()]


_OPPOSITE = {
    EdgeKind.LEFT: EdgeKind.RIGHT,
    EdgeKind.RIGHT: EdgeKind.LEFT,
    EdgeKind.UP: EdgeKind.DOWN,
    EdgeKind.DOWN: EdgeKind.UP,
    EdgeKind.READING_NEXT: EdgeKind.READING_PREV,
    EdgeKind.READING_PREV: EdgeKind.READING_NEXT,
}


@dataclass(frozen=True, order=True)
class Edge:
    src: int
    kind: EdgeKind
    dst: int

    def __post_init__(self):
        if self.src == self.dst:
            raise ContractError(f"self-loop on node {self.src}")

    @property
    def reverse(self) -> "Edge":
        return Edge(self.dst, self.kind.opposite, self.src)


NEGATIVE, POSITIVE = 0, 1


@dataclass(frozen=True)
class DocumentGraph:
    page: Page
    node_features: np.ndarray
    edges: Tuple[Edge, ...]
    edge_features: np.ndarray
    node_labels: Optional[Tuple[int, ...]] = None
    edge_labels: Optional[Tuple[int, ...]] = None
    # annotation instance owning each node (-1 = unowned); set by the labeler
    node_segments: Optional[Tuple[int, ...]] = None
    feature_version: int = 1

    def __post_init__(self):
        n = len(self.page.cells)
        if self.node_features.shape[0] != n:
            raise ContractError(
                f"{self.node_features.shape[0]} feature rows for {n} cells"
            )
        if self.edge_features.shape[0] != len(self.edges):
            raise ContractError("edge feature rows do not match edge count")
        keys = set()
        for e in self.edges:
            if e.src >= n or e.dst >= n:
                raise ContractError(f"edge {e} out of range for {n} nodes")
            keys.add((e.src, e.dst, e.kind))
        if len(keys) != len(self.edges):
            raise ContractError("duplicate edges")
        for e in self.edges:
            if (e.dst, e.src, e.kind.opposite) not in keys:
                raise ContractError(f"edge {e} has no reverse")
        if self.node_labels is not None and len(self.node_labels) != n:
            raise ContractError("node_labels length mismatch")
        if self.edge_labels is not None and len(self.edge_labels) != len(self.edges):
            raise ContractError("edge_labels length mismatch")

    @property
    def num_nodes(self) -> int:
        return len(self.page.cells)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def is_labeled(self) -> bool:
        return self.node_labels is not None and self.edge_labels is not None

    def edge_index(self) -> Tuple[np.ndarray, np.ndarray]:
        src = np.fromiter((e.src for e in self.edges), dtype=np.int64, count=len(self.edges))
        dst = np.fromiter((e.dst for e in self.edges), dtype=np.int64, count=len(self.edges))
        return src, dst


@dataclass(frozen=True)
class SegmentAnnotation:
    bbox: Rect
    class_id: int
    score: float
    node_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.node_ids:
            raise EmptySegment("segment without nodes")
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ClassSchema:
    names: Tuple[str, ...] = DOCLAYNET_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise SchemaError("class schema is empty")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("class names must be unique")

    def __len__(self):
        return len(self.names)

    @property
    def background(self) -> int:
        """Index of the extra class for cells no annotation claims."""
        return len(self.names)

    @property
    def n_classes(self) -> int:
        return len(self.names) + 1

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(name) from None

    def name(self, class_id: int) -> str:
        if class_id == self.background:
            return "background"
        return self.names[class_id]
