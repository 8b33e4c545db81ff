import json
from collections import Counter

import numpy as np
import pytest

from glam.doc_model import ClassSchema, rect_iou, spanning_rect
from glam.ingest import clean_cells, load_coco_dict, parse_cells
from glam.labeler import assign_cells
from glam.synth import generate_corpus, perturb


def dumps(obj):
    return json.dumps(obj, sort_keys=True).encode()


def test_byte_identical():
    a = generate_corpus(1, seed=7)
    b = generate_corpus(1, seed=7)
    assert dumps(a) == dumps(b)
    assert dumps(generate_corpus(1, seed=8)) != dumps(a)


def test_pages_independent_of_corpus_size():
    big = generate_corpus(5, seed=2)[0]["pages"]
    tail = generate_corpus(2, seed=2, first_index=3)[0]["pages"]
    assert big[3:] == tail


def test_bad_size():
    with pytest.raises(ValueError):
        generate_corpus(0)


@pytest.fixture(scope="module")
def corpus200():
    return generate_corpus(200, seed=0)


def _pages(cells_doc):
    return parse_cells(json.dumps(cells_doc).encode())


def test_gt_is_span_of_block_cells():
    cells, coco = generate_corpus(15, seed=4)
    schema = ClassSchema()
    gts = load_coco_dict(coco, schema)
    for page in _pages(cells):
        for _, box in gts[page.page_id]:
            inside = [c.bbox for c in page.cells
                      if c.bbox.x0 >= box.x0 and c.bbox.y0 >= box.y0 and c.bbox.x1 <= box.x1 and c.bbox.y1 <= box.y1]
            assert rect_iou(spanning_rect(inside), box) == 1.0


def test_class_frequency(corpus200):
    _, coco = corpus200
    names = {c["id"]: c["name"] for c in coco["categories"]}
    counts = Counter(names[a["category_id"]] for a in coco["annotations"])
    for name in ClassSchema().names:
        if name == "Picture":
            assert counts[name] == 0
        else:
            assert counts[name] >= 20, (name, counts[name])


def test_ingest_cleaning_removes_nothing(corpus200):
    for page in _pages(corpus200[0]):
        assert clean_cells(page) == page
        assert 0 < len(page.cells) <= 500


def test_perturb_identity(corpus200):
    small = generate_corpus(3, seed=1)
    assert dumps(perturb(small)) == dumps(small)


def test_perturb_full_dropout():
    cells, _ = perturb(generate_corpus(3, seed=1), dropout_frac=1.0)
    assert all(p["cells"] == [] for p in cells["pages"])


def test_perturb_does_not_mutate_input():
    corpus = generate_corpus(2, seed=1)
    before = dumps(corpus)
    perturb(corpus, jitter_px=5, dropout_frac=0.3, seed=2)
    assert dumps(corpus) == before


def test_perturb_jitter_bounds():
    corpus = generate_corpus(5, seed=1)
    _, coco = perturb(corpus, jitter_px=3.0, seed=9)
    for a, b in zip(corpus[1]["annotations"], coco["annotations"]):
        x, y, w, h = a["bbox"]
        u, v, s, t = b["bbox"]
        assert abs(u - x) <= 3.25 and abs(v - y) <= 3.25
        assert abs((u + s) - (x + w)) <= 3.25 and abs((v + t) - (y + h)) <= 3.25


def _snapped_ious(corpus):
    cells, coco = corpus
    schema = ClassSchema()
    pages = {p.page_id: p for p in _pages(cells)}
    out = []
    for pid, anns in load_coco_dict(coco, schema).items():
        page = pages[pid]
        for _, box in anns:
            ids = assign_cells(box, page)
            out.append(rect_iou(spanning_rect(page.cells[i].bbox for i in ids), box) if ids else 0.0)
    return np.array(out)


def test_jitter_degrades_snapping():
    corpus = generate_corpus(100, seed=3)
    clean = _snapped_ious(corpus)
    noisy = _snapped_ious(perturb(corpus, jitter_px=20, seed=3))
    assert (clean == 1.0).all()
    assert noisy.mean() < clean.mean()
    assert (noisy < 1.0).mean() > 0.5
