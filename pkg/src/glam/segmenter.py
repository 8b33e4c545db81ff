"""From node/edge predictions to layout segments and COCO records."""

from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .doc_model import (
    POSITIVE,
    ClassSchema,
    DocumentGraph,
    Page,
    SegmentAnnotation,
    spanning_rect,
)

log = logging.getLogger(__name__)


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def groups(self) -> List[List[int]]:
        by_root: Dict[int, List[int]] = {}
        for i in range(len(self.parent)):
            by_root.setdefault(self.find(i), []).append(i)
        return sorted(by_root.values(), key=lambda g: g[0])


def prune_edges(graph: DocumentGraph, edge_probs: np.ndarray, threshold: float = 0.5,
                mode: str = "and") -> np.ndarray:
    """Boolean keep-mask over directed edges.

    An edge votes positive when P(positive) > ``threshold``. Votes are pooled
    per undirected node pair: with ``mode="and"`` the pair survives only if
    every directed edge between the two nodes votes positive, with ``"or"``
    if any does. Each directed edge inherits its pair's decision.
    """
    if mode not in ("and", "or"):
        raise ValueError(f"mode must be 'and' or 'or', not {mode!r}")
    n_edges = len(graph.edges)
    if n_edges == 0:
        return np.zeros(0, dtype=bool)
    votes = np.asarray(edge_probs)[:, POSITIVE] > threshold
    pooled: Dict[Tuple[int, int], bool] = {}
    for e, v in zip(graph.edges, votes):
        key = (min(e.src, e.dst), max(e.src, e.dst))
        if key not in pooled:
            pooled[key] = bool(v)
        elif mode == "and":
            pooled[key] = pooled[key] and bool(v)
        else:
            pooled[key] = pooled[key] or bool(v)
    return np.array(
        [pooled[(min(e.src, e.dst), max(e.src, e.dst))] for e in graph.edges], dtype=bool
    )


def connected_components(n: int, pairs: Iterable[Tuple[int, int]]) -> List[List[int]]:
    """Partition of ``0..n-1``; components sorted internally and by smallest member."""
    uf = UnionFind(n)
    for a, b in pairs:
        uf.union(a, b)
    return uf.groups()


def emit_segments(components: Sequence[Sequence[int]], node_probs: np.ndarray,
                  graph: DocumentGraph, schema: ClassSchema,
                  counter: Dict[str, int] = None) -> List[SegmentAnnotation]:
    """Label each component by majority vote and box it by its cells.

    Vote ties go to the class with the higher mean probability, then to the
    lower class id. The score is the mean probability of the chosen class.
    Components voted background are dropped.
    """
    probs = np.asarray(node_probs, dtype=np.float64)
    argmax = probs.argmax(axis=1)
    out = []
    dropped = 0
    for comp in components:
        comp = list(comp)
        votes = np.bincount(argmax[comp], minlength=probs.shape[1])
        tied = np.flatnonzero(votes == votes.max())
        means = probs[comp].mean(axis=0)
        # highest mean wins among tied classes; np.argmax keeps the lowest id on equality
        label = int(tied[np.argmax(means[tied])])
        if label == schema.background:
            dropped += 1
            continue
        score = float(min(max(means[label], 0.0), 1.0))
        out.append(
            SegmentAnnotation(
                bbox=spanning_rect(graph.page.cells[i].bbox for i in comp),
                class_id=label,
                score=score,
                node_ids=frozenset(comp),
            )
        )
    if counter is not None:
        counter["background_dropped"] = counter.get("background_dropped", 0) + dropped
    return out


def segment_graph(graph: DocumentGraph, node_probs: np.ndarray, edge_probs: np.ndarray,
                  schema: ClassSchema, threshold: float = 0.5, mode: str = "and",
                  counter: Dict[str, int] = None) -> List[SegmentAnnotation]:
    """Prune, group and label: the whole inference post-processing for one page."""
    keep = prune_edges(graph, edge_probs, threshold, mode)
    pairs = [(e.src, e.dst) for e, k in zip(graph.edges, keep) if k]
    comps = connected_components(graph.num_nodes, pairs)
    return emit_segments(comps, node_probs, graph, schema, counter)


def gold_probabilities(graph: DocumentGraph, schema: ClassSchema) -> Tuple[np.ndarray, np.ndarray]:
    """One-hot node/edge 'predictions' taken from a labeled graph."""
    node = np.zeros((graph.num_nodes, schema.n_classes))
    node[np.arange(graph.num_nodes), list(graph.node_labels)] = 1.0
    edge = np.zeros((graph.num_edges, 2))
    edge[np.arange(graph.num_edges), list(graph.edge_labels)] = 1.0
    return node, edge


def categories(schema: ClassSchema) -> List[dict]:
    return [{"id": i + 1, "name": name} for i, name in enumerate(schema.names)]


def to_coco(segments: Sequence[SegmentAnnotation], page: Page, schema: ClassSchema,
            image_id: int = 1, category_ids: Dict[int, int] = None) -> dict:
    """A self-contained COCO document for one page (annotations carry scores)."""
    cat = category_ids or {i: i + 1 for i in range(len(schema))}
    anns = [
        {
            "id": k + 1,
            "image_id": image_id,
            "category_id": cat[s.class_id],
            "bbox": s.bbox.to_xywh(),
            "area": s.bbox.area,
            "iscrowd": 0,
            "score": s.score,
        }
        for k, s in enumerate(segments)
    ]
    return {
        "images": [{"id": image_id, "file_name": f"{page.page_id}.png",
                    "width": page.width, "height": page.height}],
        "annotations": anns,
        "categories": categories(schema),
    }


def to_results(segments: Sequence[SegmentAnnotation], page: Page, image_id: int,
               category_ids: Dict[int, int] = None) -> List[dict]:
    """Detection-results records: ``{image_id, category_id, bbox, score}``."""
    cat = category_ids or {}
    return [
        {
            "image_id": image_id,
            "page_id": page.page_id,
            "category_id": cat.get(s.class_id, s.class_id + 1),
            "bbox": s.bbox.to_xywh(),
            "score": s.score,
        }
        for s in segments
    ]
