import functools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glam.doc_model import (
    Cell,
    ClassSchema,
    DocumentGraph,
    Edge,
    EdgeKind,
    Page,
    Rect,
    SegmentAnnotation,
    rect_iou,
    spanning_rect,
)
from glam.errors import ContractError, EmptySegment, SchemaError

coord = st.floats(min_value=-1000, max_value=1000, allow_nan=False, allow_infinity=False)


@st.composite
def rects(draw):
    x0, x1 = sorted((draw(coord), draw(coord)))
    y0, y1 = sorted((draw(coord), draw(coord)))
    return Rect(x0, y0, x1, y1)


def test_iou_identical():
    assert rect_iou(Rect(0, 0, 10, 10), Rect(0, 0, 10, 10)) == 1.0


def test_iou_disjoint():
    assert rect_iou(Rect(0, 0, 10, 10), Rect(20, 20, 30, 30)) == 0.0


def test_iou_half_shift():
    # intersection 50, union 150
    assert rect_iou(Rect(0, 0, 10, 10), Rect(5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_iou_zero_area_pair_is_zero():
    assert rect_iou(Rect(1, 1, 1, 1), Rect(1, 1, 1, 1)) == 0.0


@given(rects(), rects())
def test_iou_symmetric_and_bounded(a, b):
    v = rect_iou(a, b)
    assert v == rect_iou(b, a)
    assert 0.0 <= v <= 1.0


def test_span_singleton():
    assert spanning_rect([Rect(0, 0, 10, 10)]) == Rect(0, 0, 10, 10)


def test_span_pair():
    assert spanning_rect([Rect(0, 0, 10, 10), Rect(20, 5, 30, 15)]) == Rect(0, 0, 30, 15)


def test_span_empty_raises():
    with pytest.raises(EmptySegment):
        spanning_rect([])


def test_span_matches_fold_of_unions(rng):
    rs = []
    for _ in range(100):
        x0, y0 = rng.uniform(-50, 50, size=2)
        w, h = rng.uniform(0, 30, size=2)
        rs.append(Rect(x0, y0, x0 + w, y0 + h))
    folded = functools.reduce(lambda a, b: a.union(b), rs)
    assert spanning_rect(rs) == folded


@given(st.lists(rects(), min_size=1, max_size=20), rects(), st.randoms())
def test_span_order_free_idempotent_monotone(rs, extra, rnd):
    s = spanning_rect(rs)
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    assert spanning_rect(shuffled) == s
    assert spanning_rect([s]) == s
    bigger = spanning_rect(rs + [extra])
    assert bigger.x0 <= s.x0 and bigger.y0 <= s.y0 and bigger.x1 >= s.x1 and bigger.y1 >= s.y1


def test_rect_rejects_inverted():
    with pytest.raises(ContractError):
        Rect(5, 0, 1, 1)


def test_xywh_round_trip():
    r = Rect(10, 20, 40, 60)
    assert r.to_xywh() == [10, 20, 30, 40]
    assert Rect.from_xywh([10, 20, 30, 40]) == r


def test_cell_invariants():
    with pytest.raises(ContractError):
        Cell(0, Rect(0, 0, 0, 5), "x")
    with pytest.raises(ContractError):
        Cell(0, Rect(0, 0, 5, 5), "x", font_size=0)


def test_page_rejects_duplicate_reading_index():
    c = Cell(0, Rect(0, 0, 5, 5), "a")
    d = Cell(1, Rect(6, 0, 9, 5), "b")
    with pytest.raises(ContractError):
        Page(10, 10, (c, d))


def test_renumbered_dense_in_reading_order():
    a = Cell(7, Rect(0, 0, 5, 5), "a", reading_index=9)
    b = Cell(3, Rect(6, 0, 9, 5), "b", reading_index=2)
    page = Page(10, 10, (a, b)).renumbered([a, b])
    assert [c.text for c in page.cells] == ["b", "a"]
    assert [(c.id, c.reading_index) for c in page.cells] == [(0, 0), (1, 1)]


def test_edge_kinds_are_paired():
    for k in EdgeKind:
        assert k.opposite.opposite == k
        assert EdgeKind.from_label(k.label) == k
    e = Edge(0, EdgeKind.UP, 1)
    assert e.reverse == Edge(1, EdgeKind.DOWN, 0)
    with pytest.raises(ContractError):
        Edge(2, EdgeKind.LEFT, 2)


def _two_cell_page():
    return Page(20, 10, (Cell(0, Rect(0, 0, 5, 5), "a"), Cell(1, Rect(6, 0, 9, 5), "b", reading_index=1)))


def test_graph_requires_reverse_edges():
    page = _two_cell_page()
    with pytest.raises(ContractError):
        DocumentGraph(page, np.zeros((2, 3)), (Edge(0, EdgeKind.RIGHT, 1),), np.zeros((1, 11)))
    g = DocumentGraph(page, np.zeros((2, 3)),
                      (Edge(0, EdgeKind.RIGHT, 1), Edge(1, EdgeKind.LEFT, 0)), np.zeros((2, 11)))
    assert g.num_edges == 2 and not g.is_labeled


def test_graph_rejects_duplicates_and_out_of_range():
    page = _two_cell_page()
    e = Edge(0, EdgeKind.RIGHT, 1)
    with pytest.raises(ContractError):
        DocumentGraph(page, np.zeros((2, 3)), (e, e.reverse, e), np.zeros((3, 11)))
    with pytest.raises(ContractError):
        DocumentGraph(page, np.zeros((2, 3)), (Edge(0, EdgeKind.RIGHT, 5), Edge(5, EdgeKind.LEFT, 0)),
                      np.zeros((2, 11)))


def test_segment_invariants():
    with pytest.raises(EmptySegment):
        SegmentAnnotation(Rect(0, 0, 1, 1), 0, 0.5, frozenset())
    with pytest.raises(ContractError):
        SegmentAnnotation(Rect(0, 0, 1, 1), 0, 1.5, frozenset({0}))


def test_class_schema():
    s = ClassSchema()
    assert len(s) == 11 and s.background == 11 and s.n_classes == 12
    assert s.name(s.index("Table")) == "Table"
    assert s.name(11) == "background"
    with pytest.raises(SchemaError, match="Tabel"):
        s.index("Tabel")
    with pytest.raises(SchemaError):
        ClassSchema(("a", "a"))
    with pytest.raises(SchemaError):
        ClassSchema(())
