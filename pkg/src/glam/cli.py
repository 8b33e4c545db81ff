"""Command-line entry point: ``glam <subcommand> ...``.

Machine-readable output goes to stdout or to ``--out`` files; diagnostics
and errors go to stderr. The log level comes from ``GLAM_LOG``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

from . import __version__
from .doc_model import DOCLAYNET_CLASSES, PUBLAYNET_CLASSES, ClassSchema, Rect
from .errors import GlamError
from .evaluate import DEFAULT_THRESHOLDS, mean_ap, results_from_records
from .featurize import get_schema
from .graph_build import EDGE_FEATURE_NAMES, build_graph, graphs_document, parse_graphs
from .ingest import (
    _decode_json,
    adapt_doclaynet,
    clean_cells,
    dump_json,
    load_cells,
    load_coco_dict,
    merge_adjacent,
    save_cells,
)
from .labeler import LabelStats, label_graph
from .model import ModelConfig, count_parameters, load_checkpoint, save_checkpoint, train
from .pipeline import InferenceOptions, Predictor, benchmark
from .segmenter import to_results
from .synth import generate_corpus, perturb

log = logging.getLogger("glam")

CLASS_SETS = {"doclaynet": DOCLAYNET_CLASSES, "publaynet": PUBLAYNET_CLASSES}


def _read_json(path) -> dict:
    return _decode_json(Path(path).read_bytes(), str(path))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {path}")
    return p


def _thresholds(spec: str) -> List[float]:
    """``lo:hi:step`` or a comma list."""
    try:
        if ":" in spec:
            lo, hi, step = (float(v) for v in spec.split(":"))
            n = int(round((hi - lo) / step)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        return [float(v) for v in spec.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {spec!r}") from None


def _out_path(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _schema_from_coco(doc: dict) -> ClassSchema:
    cats = sorted(doc.get("categories", []), key=lambda c: c["id"])
    return ClassSchema(tuple(c["name"] for c in cats))


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = ClassSchema(CLASS_SETS["doclaynet"])
    if not 0 <= args.holdout < args.pages:
        raise GlamError("--holdout must be in [0, pages)")
    splits = [("", 0, args.pages)]
    if args.holdout:
        n_train = args.pages - args.holdout
        splits = [("train_", 0, n_train), ("heldout_", n_train, args.holdout)]
    for prefix, first, n in splits:
        corpus = generate_corpus(n, args.seed, schema, first_index=first)
        if args.jitter or args.dropout:
            corpus = perturb(corpus, args.jitter, args.dropout, args.seed)
        dump_json(corpus[0], out / f"{prefix}cells.json")
        dump_json(corpus[1], out / f"{prefix}coco.json")
        log.info("wrote %d pages to %s%s{cells,coco}.json", n, out, os.sep + prefix)
    return 0


def _doclaynet_pages(path: Path):
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    return [adapt_doclaynet(f.read_bytes()) for f in files]


def cmd_ingest(args) -> int:
    pages = _doclaynet_pages(args.cells) if args.doclaynet else load_cells(args.cells)
    out, removed, merged = [], 0, 0
    for page in pages:
        cleaned = clean_cells(page, args.min_px)
        removed += len(page.cells) - len(cleaned.cells)
        if args.merge:
            m = merge_adjacent(cleaned, args.h_gap, args.v_gap)
            merged += len(cleaned.cells) - len(m.cells)
            cleaned = m
        out.append(cleaned)
    save_cells(out, _out_path(args.out))
    log.info("ingest: %d pages, %d cells removed, %d merges", len(out), removed, merged)
    return 0


def cmd_label(args) -> int:
    pages = load_cells(args.cells)
    coco = _read_json(args.coco)
    schema = ClassSchema(CLASS_SETS[args.classes])
    gts = load_coco_dict(coco, schema)
    stats = LabelStats()
    graphs = []
    for page in pages:
        if page.page_id not in gts:
            log.warning("page %s has no ground truth; all cells become background", page.page_id)
        graphs.append(label_graph(build_graph(page), gts.get(page.page_id, []), schema,
                                  args.iou_floor, stats))
    dump_json(graphs_document(graphs, schema.names), _out_path(args.out))
    log.info("label: %d graphs, %d conflicts, %d unowned cells, %d empty annotations",
             len(graphs), stats.conflicts, stats.unowned, stats.empty_annotations)
    return 0


def _config(args, schema: ClassSchema) -> ModelConfig:
    base = ModelConfig().to_dict()
    if args.config:
        base.update(_read_json(args.config))
    if args.seed is not None:
        base["seed"] = args.seed
    if args.alpha is not None:
        base["alpha"] = args.alpha
    base["n_classes"] = schema.n_classes
    base["node_features"] = get_schema(1).size
    base["edge_features"] = len(EDGE_FEATURE_NAMES)
    return ModelConfig.from_dict(base)


def cmd_train(args) -> int:
    graphs, names = parse_graphs(_read_json(args.graphs))
    schema = ClassSchema(names or DOCLAYNET_CLASSES)
    val = None
    if args.val:
        val, val_names = parse_graphs(_read_json(args.val))
        if val_names and tuple(val_names) != schema.names:
            raise GlamError("validation graphs use a different class schema")
    cfg = _config(args, schema)
    log.info("model: %d parameters", count_parameters(cfg))
    log_fh = open(_out_path(args.log), "w", encoding="utf-8") if args.log else None

    def on_epoch(entry):
        line = json.dumps(entry.to_dict(), sort_keys=True)
        log.info("epoch %s", line)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    try:
        ckpt = train(graphs, cfg, schema, epochs=args.epochs, lr=args.lr, val=val,
                     balance_classes=args.balance_classes, on_epoch=on_epoch,
                     schedule=args.schedule, freeze_bn_frac=args.freeze_bn)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(ckpt, _out_path(args.out))
    summary = {"parameters": count_parameters(cfg), "best_epoch": ckpt.extra.get("epoch"),
               "checkpoint": str(args.out)}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _predictor(args) -> Predictor:
    opts = InferenceOptions(merge=args.merge, threshold=args.threshold, prune=args.prune,
                            min_px=args.min_px)
    return Predictor(load_checkpoint(args.ckpt), opts)


def cmd_infer(args) -> int:
    pages = load_cells(args.cells)
    pred = _predictor(args)
    image_ids = {p.page_id: i + 1 for i, p in enumerate(pages)}
    cat_ids = {i: i + 1 for i in range(len(pred.schema))}
    if args.coco:
        coco = _read_json(args.coco)
        image_ids.update({Path(img["file_name"]).stem: img["id"] for img in coco.get("images", [])})
        by_name = {c["name"]: c["id"] for c in coco.get("categories", [])}
        cat_ids = {i: by_name[n] for i, n in enumerate(pred.schema.names) if n in by_name}
    records = []
    for res in pred.run(pages, args.threads):
        segs = [s for s in res.segments if s.class_id in cat_ids]
        records.extend(to_results(segs, res.page, image_ids[res.page.page_id], cat_ids))
    dump_json(records, _out_path(args.out))
    log.info("infer: %d pages, %d segments", len(pages), len(records))
    return 0


def cmd_eval(args) -> int:
    gt_doc = _read_json(args.gt)
    schema = _schema_from_coco(gt_doc)
    gts = load_coco_dict(gt_doc, schema)
    records = _read_json(args.results)
    if isinstance(records, dict):
        records = records.get("annotations", [])
    preds = results_from_records(records, gt_doc, schema)
    report = mean_ap(preds, gts, schema, args.thresholds)
    print(report.table())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(report.to_dict(), out / "report.json")
        (out / "report.tsv").write_text(report.tsv(), encoding="utf-8")
        from .plotting import render_report

        render_report(report, out / "report.svg")
    return 0


def cmd_bench(args) -> int:
    pages = load_cells(args.cells)
    if args.limit:
        pages = pages[: args.limit]
    stats = benchmark(_predictor(args), pages, args.threads, args.runs)
    print(json.dumps(stats, sort_keys=True))
    return 0


class _Box(NamedTuple):
    bbox: Rect
    class_id: int
    score: float


def _segments_from_coco(doc: dict, schema: ClassSchema) -> Dict[str, List[_Box]]:
    pages = {img["id"]: Path(img["file_name"]).stem for img in doc.get("images", [])}
    cats = {c["id"]: schema.index(c["name"]) for c in doc.get("categories", [])}
    out: Dict[str, List[_Box]] = {}
    for a in doc.get("annotations", []):
        out.setdefault(pages[a["image_id"]], []).append(
            _Box(Rect.from_xywh(a["bbox"]), cats[a["category_id"]], float(a.get("score", 1.0)))
        )
    return out


def _segments_from_results(records, pages, schema: ClassSchema, min_score: float):
    by_index = {i + 1: p.page_id for i, p in enumerate(pages)}
    out: Dict[str, List[_Box]] = {}
    for r in records:
        if r["score"] < min_score:
            continue
        key = r.get("page_id") or by_index.get(r["image_id"])
        out.setdefault(key, []).append(
            _Box(Rect.from_xywh(r["bbox"]), r["category_id"] - 1, float(r["score"]))
        )
    return out


def cmd_render(args) -> int:
    from .plotting import render_page

    pages = load_cells(args.cells)
    if args.limit:
        pages = pages[: args.limit]
    schema = ClassSchema(CLASS_SETS[args.classes])
    segs: Dict[str, List[_Box]] = {}
    scored = True
    if args.coco:
        doc = _read_json(args.coco)
        schema = _schema_from_coco(doc)
        segs = _segments_from_coco(doc, schema)
        scored = False
    elif args.results:
        segs = _segments_from_results(_read_json(args.results), pages, schema, args.min_score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for page in pages:
        render_page(page, segs.get(page.page_id, []), schema, out / f"{page.page_id}.svg",
                    scores=scored, title=page.page_id)
    log.info("render: %d pages to %s", len(pages), out)
    return 0


def cmd_schema(args) -> int:
    cfg = ModelConfig.from_dict(_read_json(args.config)) if args.config else ModelConfig()
    if args.classes:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "n_classes": len(CLASS_SETS[args.classes]) + 1})
    feats = get_schema(1)
    doc = {
        "feature_version": feats.version,
        "node_features": list(feats.names),
        "edge_features": list(EDGE_FEATURE_NAMES),
        "config": cfg.to_dict(),
        "layer_widths": cfg.layer_widths(),
        "parameters": count_parameters(cfg),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------

def _add_infer_flags(p):
    p.add_argument("--cells", type=_existing, required=True)
    p.add_argument("--ckpt", type=_existing, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--merge", action="store_true", help="merge adjacent cells before building graphs")
    p.add_argument("--min-px", type=float, default=10.0)
    p.add_argument("--threshold", type=float, default=0.5, help="edge keep probability")
    p.add_argument("--prune", choices=("and", "or"), default="and",
                   help="how the two directions of a node pair vote")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glam", description="Graph-based document layout analysis.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic pages with ground truth")
    p.add_argument("--pages", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--holdout", type=int, default=0, help="last N pages go to heldout_* files")
    p.add_argument("--jitter", type=float, default=0.0, help="ground-truth box jitter (px)")
    p.add_argument("--dropout", type=float, default=0.0, help="fraction of cells to drop")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="clean (and optionally merge) cells")
    p.add_argument("--cells", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--merge", action="store_true")
    p.add_argument("--min-px", type=float, default=10.0)
    p.add_argument("--h-gap", type=float, default=0.5, help="max gap, in median font sizes")
    p.add_argument("--v-gap", type=float, default=0.2, help="max bottom offset, in median font sizes")
    p.add_argument("--doclaynet", action="store_true",
                   help="--cells is a DocLayNet page JSON (or a directory of them)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("label", help="build graphs and label them from COCO ground truth")
    p.add_argument("--cells", type=_existing, required=True)
    p.add_argument("--coco", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-floor", type=float, default=0.95)
    p.add_argument("--classes", choices=sorted(CLASS_SETS), default="doclaynet")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a model on labeled graphs")
    p.add_argument("--graphs", type=_existing, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", type=_existing)
    p.add_argument("--val", type=_existing)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--schedule", choices=("cosine", "constant"), default="cosine")
    p.add_argument("--freeze-bn", type=float, default=0.25,
                   help="final fraction of epochs trained with frozen batch-norm statistics")
    p.add_argument("--balance-classes", action="store_true")
    p.add_argument("--log", help="JSON-lines epoch log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment pages with a trained model")
    _add_infer_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--coco", type=_existing, help="take image and category ids from this file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="COCO-style mAP of results against ground truth")
    p.add_argument("--gt", type=_existing, required=True)
    p.add_argument("--results", type=_existing, required=True)
    p.add_argument("--out-dir")
    p.add_argument("--thresholds", type=_thresholds, default=list(DEFAULT_THRESHOLDS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="pages per second of the inference pipeline")
    _add_infer_flags(p)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="one SVG per page with boxes and cell outlines")
    p.add_argument("--cells", type=_existing, required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--results", type=_existing)
    src.add_argument("--coco", type=_existing)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", choices=sorted(CLASS_SETS), default="doclaynet")
    p.add_argument("--min-score", type=float, default=0.0)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("schema", help="feature names and model parameter count")
    p.add_argument("--config", type=_existing)
    p.add_argument("--classes", choices=sorted(CLASS_SETS))
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = getattr(logging, os.environ.get("GLAM_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GlamError as exc:
        print(f"glam: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"glam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
