"""Per-page inference from raw cells to segments, sequential or threaded."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .doc_model import ClassSchema, DocumentGraph, Page, SegmentAnnotation
from .featurize import get_schema
from .graph_build import build_graph
from .ingest import clean_cells, merge_adjacent
from .model import GLAM, Checkpoint, GraphInput
from .segmenter import segment_graph


@dataclass
class InferenceOptions:
    merge: bool = False
    threshold: float = 0.5
    prune: str = "and"
    min_px: float = 10.0


@dataclass
class PageResult:
    page: Page
    graph: DocumentGraph
    segments: List[SegmentAnnotation]


def prepare(page: Page, opts: InferenceOptions) -> Page:
    page = clean_cells(page, opts.min_px)
    return merge_adjacent(page) if opts.merge else page


class Predictor:
    """A loaded checkpoint bound to its feature and class schemas.

    ``GLAM.predict`` only reads parameters, so one predictor can serve
    several threads at once.
    """

    def __init__(self, ckpt: Checkpoint, opts: Optional[InferenceOptions] = None):
        self.schema: ClassSchema = ckpt.schema
        self.features = get_schema(ckpt.feature_version)
        ckpt.check_features(self.features.size, self.features.version)
        self.model: GLAM = ckpt.model()
        self.opts = opts or InferenceOptions()

    def __call__(self, page: Page) -> PageResult:
        page = prepare(page, self.opts)
        graph = build_graph(page, self.features)
        if graph.num_nodes == 0:
            return PageResult(page, graph, [])
        out = self.model.predict(GraphInput.from_graph(graph))
        segs = segment_graph(graph, out.node_probs, out.edge_probs, self.schema,
                             self.opts.threshold, self.opts.prune)
        return PageResult(page, graph, segs)

    def run(self, pages: Sequence[Page], threads: int = 1) -> List[PageResult]:
        """Process pages, one page per task; results come back in input order."""
        with threadpool_limits(limits=1):
            if threads <= 1:
                return [self(p) for p in pages]
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(self, pages))


def benchmark(predictor: Predictor, pages: Sequence[Page], threads: int = 1,
              runs: int = 3, warmup: int = 1) -> Dict[str, float]:
    """Wall-clock throughput over ``runs`` timed passes after ``warmup`` passes."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    for _ in range(warmup):
        predictor.run(pages, threads)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        predictor.run(pages, threads)
        times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    return {
        "pages": len(pages),
        "threads": threads,
        "runs": runs,
        "seconds_mean": mean,
        "seconds_std": float(np.std(times)),
        "ms_per_page": 1000.0 * mean / max(len(pages), 1),
        "pages_per_sec": len(pages) / mean if mean > 0 else float("inf"),
    }
