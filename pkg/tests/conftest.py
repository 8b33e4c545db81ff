import json

import numpy as np
import pytest
from hypothesis import settings

from glam.doc_model import Cell, ClassSchema, Page, Rect
from glam.graph_build import build_graph
from glam.ingest import clean_cells, load_coco_dict, merge_adjacent, parse_cells
from glam.labeler import label_graph
from glam.synth import generate_corpus

settings.register_profile("glam", deadline=None, max_examples=100)
settings.load_profile("glam")


def make_page(boxes, texts=None, fonts=None, sizes=None, width=1000.0, height=1000.0, page_id="p"):
    cells = []
    for i, b in enumerate(boxes):
        cells.append(Cell(
            id=i,
            bbox=Rect(*b),
            text=texts[i] if texts else f"w{i}",
            font_name=fonts[i] if fonts else "Times",
            font_size=sizes[i] if sizes else 10.0,
            reading_index=i,
        ))
    return Page(width, height, tuple(cells), page_id)


def random_page(rng, n, width=500.0, height=500.0, max_w=80.0, max_h=30.0):
    boxes = []
    for _ in range(n):
        x0 = float(rng.uniform(0, width - max_w))
        y0 = float(rng.uniform(0, height - max_h))
        boxes.append((x0, y0, x0 + float(rng.uniform(1, max_w)), y0 + float(rng.uniform(1, max_h))))
    return make_page(boxes, width=width, height=height)


@pytest.fixture(scope="session")
def schema():
    return ClassSchema()


@pytest.fixture(scope="session")
def small_corpus(schema):
    """Ten synthetic pages: (pages, gts, labeled graphs), word-level cells."""
    cells, coco = generate_corpus(10, seed=3)
    pages = [clean_cells(p) for p in parse_cells(json.dumps(cells).encode())]
    gts = load_coco_dict(coco, schema)
    graphs = [label_graph(build_graph(p), gts[p.page_id], schema) for p in pages]
    return pages, gts, graphs


@pytest.fixture(scope="session")
def merged_corpus(schema):
    """Twenty synthetic pages after line merging (small graphs, fast to train)."""
    cells, coco = generate_corpus(20, seed=5)
    pages = [merge_adjacent(clean_cells(p)) for p in parse_cells(json.dumps(cells).encode())]
    gts = load_coco_dict(coco, schema)
    graphs = [label_graph(build_graph(p), gts[p.page_id], schema) for p in pages]
    return pages, gts, graphs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, printed once at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
