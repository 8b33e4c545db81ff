"""COCO-style box mAP over IoU thresholds 0.50:0.05:0.95.

Matching and interpolation follow the COCO reference evaluator: detections
per image and class are ranked by score (stable), each one claims the
best-overlapping unmatched ground truth at or above the threshold, and
precision is sampled at 101 recall points from its monotone envelope.
Only the "all areas" range is evaluated and nothing is marked crowd.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .doc_model import ClassSchema, Rect
from .errors import SchemaError

DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 500

GroundTruth = Dict[Hashable, List[Tuple[int, Rect]]]
Predictions = Dict[Hashable, List[Tuple[int, Rect, float]]]


def _iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[D, 4]`` and ``[G, 4]`` xyxy boxes."""
    ix = np.minimum(dets[:, None, 2], gts[None, :, 2]) - np.maximum(dets[:, None, 0], gts[None, :, 0])
    iy = np.minimum(dets[:, None, 3], gts[None, :, 3]) - np.maximum(dets[:, None, 1], gts[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_d = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = area_d[:, None] + area_g[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _match_image(dets: np.ndarray, gts: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    """True-positive flags ``[T, D]`` for detections already sorted by score."""
    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    if len(dets) == 0 or len(gts) == 0:
        return tp
    ious = _iou_matrix(dets, gts)
    for t, thr in enumerate(thresholds):
        taken = np.zeros(len(gts), dtype=bool)
        for d in range(len(dets)):
            best, m = min(thr, 1 - 1e-10), -1
            for g in range(len(gts)):
                if taken[g] or ious[d, g] < best:
                    continue
                best, m = ious[d, g], g
            if m >= 0:
                taken[m] = True
                tp[t, d] = True
    return tp


def _interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    # tps + fps >= 1 for every ranked detection; no epsilon, so perfect runs give exactly 1
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    q = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


def average_precision(preds: Predictions, gts: GroundTruth, class_id: int,
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                      max_dets: int = MAX_DETS) -> Optional[np.ndarray]:
    """AP of one class at each threshold, or ``None`` if the class has no ground truth."""
    keys = sorted(set(gts) | set(preds), key=str)
    n_gt = 0
    all_scores, all_tp = [], []
    for key in keys:
        g = np.array([r.as_tuple() for c, r in gts.get(key, []) if c == class_id]).reshape(-1, 4)
        dl = [(s, r) for c, r, s in preds.get(key, []) if c == class_id]
        n_gt += len(g)
        if not dl:
            continue
        s = np.array([x[0] for x in dl], dtype=np.float64)
        order = np.argsort(-s, kind="mergesort")[:max_dets]
        d = np.array([dl[i][1].as_tuple() for i in order]).reshape(-1, 4)
        all_scores.append(s[order])
        all_tp.append(_match_image(d, g, thresholds))
    if n_gt == 0:
        return None
    if not all_scores:
        return np.zeros(len(thresholds))
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp, axis=1)
    return np.array([_interpolated_ap(scores, tp[t], n_gt) for t in range(len(thresholds))])


@dataclass
class MapReport:
    class_names: List[str]
    thresholds: List[float]
    # class name -> AP per threshold; classes without ground truth are absent
    per_class: Dict[str, List[float]] = field(default_factory=dict)

    def class_map(self) -> Dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_class.items()}

    @property
    def overall(self) -> float:
        vals = list(self.class_map().values())
        return float(np.mean(vals)) if vals else 0.0

    def at_threshold(self, thr: float) -> float:
        t = int(np.argmin(np.abs(np.array(self.thresholds) - thr)))
        vals = [v[t] for v in self.per_class.values()]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "per_class": self.per_class,
            "class_map": self.class_map(),
            "overall": self.overall,
            "overall_at": {f"{t:.2f}": self.at_threshold(t) for t in self.thresholds},
        }

    def table(self) -> str:
        """Aligned text table: one row per class plus an overall row, in percent."""
        cm = self.class_map()
        width = max([len(n) for n in self.class_names] + [len("overall")])
        cols = ["mAP", "AP50", "AP75"]
        lines = [f"{'':<{width}} | " + " ".join(f"{c:>6}" for c in cols)]
        lines.append("-" * len(lines[0]))

        def fmt(v):
            return f"{100 * v:6.1f}" if v is not None else f"{'-':>6}"

        t50 = self._idx(0.5)
        t75 = self._idx(0.75)
        for name in self.class_names:
            ap = self.per_class.get(name)
            row = [cm.get(name), ap[t50] if ap and t50 is not None else None,
                   ap[t75] if ap and t75 is not None else None]
            lines.append(f"{name:<{width}} | " + " ".join(fmt(v) for v in row))
        lines.append("-" * len(lines[0]))
        overall = [self.overall,
                   self.at_threshold(0.5) if t50 is not None else None,
                   self.at_threshold(0.75) if t75 is not None else None]
        lines.append(f"{'overall':<{width}} | " + " ".join(fmt(v) for v in overall))
        return "\n".join(lines)

    def tsv(self) -> str:
        head = ["class", "mAP"] + [f"AP{int(round(t * 100))}" for t in self.thresholds]
        rows = ["\t".join(head)]
        cm = self.class_map()
        for name in self.class_names:
            if name in self.per_class:
                rows.append("\t".join([name, f"{cm[name]:.6f}"] + [f"{v:.6f}" for v in self.per_class[name]]))
        rows.append("\t".join(["overall", f"{self.overall:.6f}"]
                              + [f"{self.at_threshold(t):.6f}" for t in self.thresholds]))
        return "\n".join(rows) + "\n"

    def _idx(self, thr):
        for i, t in enumerate(self.thresholds):
            if abs(t - thr) < 1e-9:
                return i
        return None


def mean_ap(preds: Predictions, gts: GroundTruth, schema: ClassSchema,
            thresholds: Sequence[float] = DEFAULT_THRESHOLDS, max_dets: int = MAX_DETS) -> MapReport:
    for items in preds.values():
        for c, _, _ in items:
            if not 0 <= c < len(schema):
                raise SchemaError(f"prediction class id {c} not in schema")
    for items in gts.values():
        for c, _ in items:
            if not 0 <= c < len(schema):
                raise SchemaError(f"ground-truth class id {c} not in schema")
    report = MapReport(list(schema.names), [float(t) for t in thresholds])
    for c, name in enumerate(schema.names):
        ap = average_precision(preds, gts, c, thresholds, max_dets)
        if ap is not None:
            report.per_class[name] = [float(v) for v in ap]
    return report


def load_results(path, gt_doc: dict, schema: ClassSchema) -> Predictions:
    """Read a detection-results list, keyed like :func:`ingest.load_coco` (page id).

    Records are joined to ground-truth images by ``page_id`` when present,
    otherwise by ``image_id``; categories map by id through the GT file.
    """
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(records, dict):
        records = records.get("annotations", [])
    return results_from_records(records, gt_doc, schema)


def results_from_records(records, gt_doc: dict, schema: ClassSchema) -> Predictions:
    id_to_page = {img["id"]: Path(img["file_name"]).stem for img in gt_doc.get("images", [])}
    cat_to_class = {c["id"]: schema.index(c["name"]) for c in gt_doc.get("categories", [])}
    out: Predictions = {}
    for r in records:
        key = r.get("page_id") or id_to_page.get(r["image_id"], r["image_id"])
        if r["category_id"] not in cat_to_class:
            raise SchemaError(f"result category id {r['category_id']} not in ground truth")
        x, y, w, h = (float(v) for v in r["bbox"])
        out.setdefault(key, []).append(
            (cat_to_class[r["category_id"]], Rect(x, y, x + w, y + h), float(r["score"]))
        )
    return out
