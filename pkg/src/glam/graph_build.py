"""Page graph construction: directional nearest neighbors plus reading order."""

from __future__ import annotations

import math
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .doc_model import Cell, DocumentGraph, Edge, EdgeKind, Page, Rect
from .errors import VersionError
from .featurize import SCHEMA_V1, FeatureSchema, get_schema, node_features

EDGE_FEATURE_NAMES = (
    "dir_left", "dir_right", "dir_up", "dir_down", "dir_reading_next", "dir_reading_prev",
    "abs_dx", "abs_dy", "center_dist", "same_font", "same_size",
)
EDGE_FEATURES = len(EDGE_FEATURE_NAMES)


def _nearest(gap: np.ndarray, valid: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Per row, the column with minimal gap among valid ones (ties: lower ``order``).

    Returns -1 for rows without any valid column.
    """
    big = np.where(valid, gap, np.inf)
    best_gap = big.min(axis=1)
    hit = np.isfinite(best_gap)
    tie = valid & (big == best_gap[:, None])
    rank = np.where(tie, order[None, :], np.iinfo(np.int64).max)
    choice = rank.argmin(axis=1)
    return np.where(hit, choice, -1)


def nearest_neighbor_edges(page: Page) -> List[Edge]:
    """Edges to the closest visible cell in each of the four directions.

    A cell is visible to the right of ``c`` when it starts at or after
    ``c.x1`` and its vertical extent overlaps ``c``'s by a positive amount;
    closeness is the edge-to-edge gap. Every edge comes with its reverse.
    """
    n = len(page.cells)
    if n < 2:
        return []
    b = page.boxes()
    x0, y0, x1, y1 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    order = np.array([c.reading_index for c in page.cells], dtype=np.int64)
    v_overlap = (np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :])) > 0
    h_overlap = (np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :])) > 0
    not_self = ~np.eye(n, dtype=bool)
    searches = {
        EdgeKind.RIGHT: (x0[None, :] - x1[:, None], v_overlap),
        EdgeKind.LEFT: (x0[:, None] - x1[None, :], v_overlap),
        EdgeKind.DOWN: (y0[None, :] - y1[:, None], h_overlap),
        EdgeKind.UP: (y0[:, None] - y1[None, :], h_overlap),
    }
    edges = set()
    for kind, (gap, overlap) in searches.items():
        valid = overlap & (gap >= 0) & not_self
        nn = _nearest(gap, valid, order)
        for i in np.flatnonzero(nn >= 0):
            e = Edge(int(i), kind, int(nn[i]))
            edges.add(e)
            edges.add(e.reverse)
    return sorted(edges)


def reading_order(page: Page) -> List[int]:
    """Cell indices in approximate reading order: top-down bands, left to right."""
    if not page.cells:
        return []
    idx = sorted(
        range(len(page.cells)),
        key=lambda i: (page.cells[i].bbox.y0, page.cells[i].bbox.x0, page.cells[i].reading_index),
    )
    bands: List[List[int]] = []
    band_y0 = band_y1 = 0.0
    for i in idx:
        b = page.cells[i].bbox
        if bands:
            overlap = min(b.y1, band_y1) - max(b.y0, band_y0)
            shorter = min(b.height, band_y1 - band_y0)
            if overlap > 0.5 * shorter:
                bands[-1].append(i)
                band_y0, band_y1 = min(band_y0, b.y0), max(band_y1, b.y1)
                continue
        bands.append([i])
        band_y0, band_y1 = b.y0, b.y1
    out = []
    for band in bands:
        band.sort(key=lambda i: (page.cells[i].bbox.x0, page.cells[i].reading_index))
        out.extend(band)
    return out


def reading_order_edges(page: Page) -> List[Edge]:
    seq = reading_order(page)
    edges = []
    for a, b in zip(seq, seq[1:]):
        edges.append(Edge(a, EdgeKind.READING_NEXT, b))
        edges.append(Edge(b, EdgeKind.READING_PREV, a))
    return sorted(edges)


def edge_features(page: Page, edges: Iterable[Edge]) -> np.ndarray:
    edges = list(edges)
    out = np.zeros((len(edges), EDGE_FEATURES), dtype=np.float32)
    if not edges:
        return out
    W, H = page.width, page.height
    diag = math.hypot(W, H)
    for k, e in enumerate(edges):
        a, b = page.cells[e.src], page.cells[e.dst]
        (ax, ay), (bx, by) = a.bbox.center, b.bbox.center
        row = out[k]
        row[int(e.kind)] = 1.0
        row[6] = abs(bx - ax) / W
        row[7] = abs(by - ay) / H
        row[8] = math.hypot(bx - ax, by - ay) / diag
        row[9] = float(a.font_name == b.font_name)
        row[10] = float(abs(a.font_size - b.font_size) <= 0.5)
    return out


def build_graph(page: Page, schema: FeatureSchema = SCHEMA_V1) -> DocumentGraph:
    edges = sorted(set(nearest_neighbor_edges(page)) | set(reading_order_edges(page)))
    return DocumentGraph(
        page=page,
        node_features=node_features(page, schema),
        edges=tuple(edges),
        edge_features=edge_features(page, edges),
        feature_version=schema.version,
    )


def graph_to_json(graph: DocumentGraph) -> dict:
    """Debug/interchange form: cells, edges and (if present) labels."""
    page = graph.page
    d = {
        "page_id": page.page_id,
        "width": page.width,
        "height": page.height,
        "nodes": [
            {
                "id": c.id,
                "bbox": list(c.bbox.as_tuple()),
                "text": c.text,
                "font_name": c.font_name,
                "font_size": c.font_size,
                "reading_index": c.reading_index,
            }
            for c in page.cells
        ],
        "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind.label} for e in graph.edges],
    }
    if graph.node_labels is not None:
        d["node_labels"] = list(graph.node_labels)
    if graph.edge_labels is not None:
        d["edge_labels"] = list(graph.edge_labels)
    if graph.node_segments is not None:
        d["node_segments"] = list(graph.node_segments)
    return d


def graph_from_json(d: dict, schema: FeatureSchema = SCHEMA_V1) -> DocumentGraph:
    cells = tuple(
        Cell(i, Rect(*node["bbox"]), node["text"], node["font_name"], node["font_size"],
             node.get("reading_index", i))
        for i, node in enumerate(d["nodes"])
    )
    page = Page(d["width"], d["height"], cells, d["page_id"])
    edges = tuple(Edge(e["src"], EdgeKind.from_label(e["kind"]), e["dst"]) for e in d["edges"])
    labels = d.get("node_labels")
    elabels = d.get("edge_labels")
    segs = d.get("node_segments")
    return DocumentGraph(
        page=page,
        node_features=node_features(page, schema),
        edges=edges,
        edge_features=edge_features(page, edges),
        node_labels=tuple(labels) if labels is not None else None,
        edge_labels=tuple(elabels) if elabels is not None else None,
        node_segments=tuple(segs) if segs is not None else None,
        feature_version=schema.version,
    )


GRAPH_FORMAT_VERSION = 1


def graphs_document(graphs: Sequence[DocumentGraph], class_names: Sequence[str] = ()) -> dict:
    return {
        "format_version": GRAPH_FORMAT_VERSION,
        "feature_version": graphs[0].feature_version if graphs else SCHEMA_V1.version,
        "class_names": list(class_names),
        "graphs": [graph_to_json(g) for g in graphs],
    }


def parse_graphs(doc: dict) -> Tuple[List[DocumentGraph], Tuple[str, ...]]:
    """Graphs plus the class names they were labeled with."""
    if doc.get("format_version") != GRAPH_FORMAT_VERSION:
        raise VersionError(f"unsupported graph file version {doc.get('format_version')!r}")
    schema = get_schema(doc.get("feature_version", SCHEMA_V1.version))
    return [graph_from_json(g, schema) for g in doc["graphs"]], tuple(doc.get("class_names", ()))
