"""
tileforge command line.

Stages hand off through files, each one consuming the previous stage's output:

  synth             PNG scans + annotations.csv
  crop              cropped PNGs + <stem>.json crop boxes + crops.json (+ translated annotations.csv)
  tile              tile PNGs + plans.json (+ tile-level tiles.csv)
  balance           rebalanced annotations (CSV or manifest JSON)
  split             manifest JSON with fold / train-validation assignments
  optimize-anchors  anchors.json
  oracle-detect     detections CSV from annotations (synthetic runs)
  merge             tile detections mapped back to source images
  evaluate          report JSON (mAP, per-image verdicts, accuracy)
  stats             size statistics and normalized-area histogram

Usage:
  python -m tileforge synth --out-dir scans --count 50
  python -m tileforge tile --image crops --out-dir tiles --grid 5x5 --tile 500x600
  python -m tileforge evaluate --annotations a.csv --detections d.csv --out report.json
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from rich import box
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from . import __version__
from .anchor_opt import OBJECTIVES, DEParams, SearchSpace, optimize_anchors
from .config import get_config
from .cropper import POLARITIES, crop_foreground
from .dataset import (Annotation, AnnotationRecord, Manifest, assign_folds, balance_negatives,
                      balance_within_splits, dataset_statistics, gt_sizes, grouped_train_val_split,
                      load_manifest, normalized_area_histogram, split_table, write_annotations_csv,
                      write_histogram_csv)
from .errors import TileforgeError
from .evaluation import (MATCH_METRICS, MERGE_STRATEGIES, detections_by_key, evaluate,
                         merge_tile_detections, read_detections_csv, summarize_folds,
                         write_detections_csv)
from .geometry import DEFAULT_ANCHOR_CONFIG, BBox, max_iou_per_box
from .storage import (child_seeds, image_key, list_images, provenance, read_gray_image, save_json,
                      write_png)
from .synthkit import SynthSpec, generate_synthetic_scan, oracle_detector
from .tiler import (INTERPOLATIONS, GridCount, Overlap, TilePlan, crop_tile, load_tile_plans,
                    plan_tiles, project_box_to_tile)

logger = logging.getLogger(__name__)

console = Console(stderr=True)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


# ── Argument types ────────────────────────────────────────────────────────────

def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _dims(minimum: int) -> Callable[[str], Tuple[int, int]]:
    """Parser for 'AxB' integer pairs, each at least minimum"""
    def parse(text: str) -> Tuple[int, int]:
        parts = text.lower().split("x")
        try:
            a, b = (int(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
        if a < minimum or b < minimum:
            raise argparse.ArgumentTypeError(f"both values in {text!r} must be >= {minimum}")
        return a, b
    return parse


def _interval(text: str) -> Tuple[float, float]:
    try:
        low, high = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}") from None
    return low, high


def _split_label(text: str):
    """Fold numbers stay ints, named splits (train, validation) stay strings"""
    try:
        return int(text)
    except ValueError:
        return text


# ── Shared plumbing ───────────────────────────────────────────────────────────

@contextmanager
def _executor(threads: int):
    if threads <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield pool


def _map(fn: Callable, items: Iterable, pool) -> List:
    """Ordered map, threaded when a pool is given"""
    items = list(items)
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def _csv_comment(args) -> bool:
    return not args.plain_csv


def _records_by_key(m: Manifest) -> Dict[str, AnnotationRecord]:
    return {image_key(r.image_path): r for r in m.records}


def _write_manifest(m: Manifest, path: str, args):
    """JSON keeps split assignments; CSV output drops them"""
    m.seed = args.seed
    if str(path).lower().endswith(".json"):
        m.save(path)
        return
    if m.assignments:
        logger.warning("Writing %s as CSV drops split assignments; use a .json path to keep them", path)
    write_annotations_csv(m, path, seed=args.seed, header_comment=_csv_comment(args))


def _unique_stems(paths: List[str]):
    seen: Dict[str, str] = {}
    for p in paths:
        key = image_key(p)
        if key in seen:
            raise ValueError(f"images {seen[key]} and {p} share the stem {key!r}")
        seen[key] = p


def _summary_table(title: str, summary: Dict[str, Any]) -> Table:
    table = Table(title=title, box=box.ROUNDED, show_header=True)
    table.add_column("Key", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in summary.items():
        if isinstance(value, (dict, list)):
            continue
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    return table


def _frame_table(title: str, frame) -> Table:
    table = Table(title=title, box=box.SIMPLE, show_header=True)
    for column in frame.columns:
        table.add_column(str(column), style="cyan" if column == frame.columns[0] else None)
    for row in frame.itertuples(index=False):
        table.add_row(*(str(v) for v in row))
    return table


# ── Subcommands ───────────────────────────────────────────────────────────────

def cmd_crop(args, cfg) -> Dict[str, Any]:
    paths = list_images(args.image)
    if not paths:
        raise ValueError("no input images found")
    _unique_stems(paths)
    if any(image_key(p) == "crops" for p in paths):
        raise ValueError("an input named crops.* would overwrite the crops.json index")
    sources = _records_by_key(load_manifest(args.annotations)) if args.annotations else None
    out_dir = Path(args.out_dir)

    def work(path: str):
        result = crop_foreground(read_gray_image(path), args.polarity, args.margin, args.threshold)
        target = str(out_dir / f"{image_key(path)}.png")
        write_png(target, result.image)
        sidecar = str(out_dir / f"{image_key(path)}.json")
        save_json(sidecar, {"crop_box": result.crop_box.as_list()}, seed=args.seed)
        logger.debug("Cropped %s to %s", path, result.crop_box.as_list())
        return path, target, result

    with _executor(args.threads) as pool:
        results = _map(work, paths, pool)

    crops, records = [], []
    for path, target, result in results:
        crop = result.crop_box
        crops.append({
            "image": path,
            "output": target,
            "crop_box": crop.as_list(),
            "foreground_box": result.foreground_box.as_list(),
            "threshold": result.threshold,
        })
        if sources is None:
            continue
        source = sources.get(image_key(path))
        if source is None:
            logger.warning("%s has no annotation record, treating it as negative", path)
            records.append(AnnotationRecord(target))
            continue
        frame = BBox(0, 0, crop.width, crop.height)
        moved = []
        for a in source.boxes:
            inside = a.box.translate(-crop.x1, -crop.y1).intersection(frame)
            if inside is None:
                logger.warning("Annotation %s on %s lies outside the crop, dropping it", a.box.as_list(), path)
                continue
            moved.append(Annotation(inside, a.label))
        records.append(AnnotationRecord(target, moved, source.group_id))

    save_json(str(out_dir / "crops.json"), {"crops": crops}, seed=args.seed)
    summary: Dict[str, Any] = {"images": len(crops), "out_dir": str(out_dir)}
    if sources is not None:
        annotations_out = args.annotations_out or str(out_dir / "annotations.csv")
        write_annotations_csv(Manifest(records), annotations_out, args.seed, _csv_comment(args))
        summary["annotations"] = annotations_out
    logger.info("Cropped %d images into %s", len(crops), out_dir)
    return summary


def cmd_tile(args, cfg) -> Dict[str, Any]:
    paths = list_images(args.image)
    if not paths:
        raise ValueError("no input images found")
    _unique_stems(paths)
    mode = Overlap(*args.overlap) if args.overlap else GridCount(*args.grid)
    tile_w, tile_h = args.tile
    out_dir = Path(args.out_dir)
    sources = _records_by_key(load_manifest(args.annotations)) if args.annotations else None

    def work(path: str) -> TilePlan:
        img = read_gray_image(path)
        height, width = img.shape
        plan = plan_tiles(width, height, tile_w, tile_h, mode, image_key(path), args.scale, path)
        for spec in plan.tiles:
            write_png(str(out_dir / f"{spec.name}.png"), crop_tile(img, spec, args.interpolation))
        logger.debug("%s: %dx%d tiles", path, plan.n_x, plan.n_y)
        return plan

    with _executor(args.threads) as pool:
        plans = _map(work, paths, pool)
    save_json(str(out_dir / "plans.json"), {"plans": [p.to_dict() for p in plans]}, seed=args.seed)

    n_tiles = sum(len(p.tiles) for p in plans)
    summary: Dict[str, Any] = {"images": len(plans), "tiles": n_tiles, "plans": str(out_dir / "plans.json")}
    if sources is not None:
        records = []
        for plan in plans:
            source = sources.get(image_key(plan.source_path))
            if source is None:
                logger.warning("%s has no annotation record, treating it as negative", plan.source_path)
            group = source.group_id if source is not None else image_key(plan.source_path)
            for spec in plan.tiles:
                projected = []
                for a in (source.boxes if source is not None else []):
                    local = project_box_to_tile(a.box, spec, args.min_visibility)
                    if local is not None:
                        projected.append(Annotation(local, a.label))
                records.append(AnnotationRecord(str(out_dir / f"{spec.name}.png"), projected, group))
        tiles_csv = args.annotations_out or str(out_dir / "tiles.csv")
        m = Manifest(records)
        write_annotations_csv(m, tiles_csv, args.seed, _csv_comment(args))
        summary.update({"annotations": tiles_csv, "positive_tiles": len(m.positives()),
                        "negative_tiles": len(m.negatives())})
    logger.info("Wrote %d tiles from %d images", n_tiles, len(plans))
    return summary


def cmd_balance(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    if args.per_split:
        balanced = balance_within_splits(m, args.ratio, args.seed)
    else:
        balanced = balance_negatives(m, args.ratio, args.seed)
    _write_manifest(balanced, args.out, args)
    return {
        "positives": len(balanced.positives()),
        "negatives": len(balanced.negatives()),
        "dropped": len(m.records) - len(balanced.records),
        "out": args.out,
        "balance": balanced.meta.get("balance", {}),
    }


def cmd_split(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    if args.val_fraction is not None:
        split = grouped_train_val_split(m, args.val_fraction, args.seed)
    else:
        split = assign_folds(m, args.k, args.seed)
    _write_manifest(split, args.out, args)
    table = split_table(split)
    if not args.json:
        console.print(_frame_table("Dataset structure", table))
    return {"groups": len(split.groups()), "records": len(split.records), "out": args.out,
            "splits": table.to_dict(orient="records")}


def cmd_optimize_anchors(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    if args.fold is not None:
        if args.fold not in m.split_labels():
            raise ValueError(f"fold {args.fold} not found in {args.annotations} (have {m.split_labels()})")
        m = m.subset(args.fold)
    sizes = [(w * args.gt_scale, h * args.gt_scale) for w, h in gt_sizes(m)]
    space = SearchSpace(args.r_bounds, args.scale_bounds, cfg.ANCHOR_SIZES)
    params = DEParams(
        population_multiplier=args.population_multiplier,
        mutation=cfg.DE_MUTATION,
        recombination=cfg.DE_RECOMBINATION,
        max_generations=args.max_generations,
        tolerance=args.tolerance,
        seed=args.seed,
    )
    with _executor(args.threads) as pool:
        result = optimize_anchors(sizes, space, params, DEFAULT_ANCHOR_CONFIG, args.objective, pool)
    result.extras["boxes"] = len(sizes)
    if args.fold is not None:
        result.extras["fold"] = args.fold
    report = result.report()
    save_json(args.out, report, seed=args.seed)
    return {
        "boxes": len(sizes),
        "fitness": result.fitness,
        "baseline_fitness": result.baseline_fitness,
        "below_half": result.below_half,
        "baseline_below_half": result.baseline_below_half,
        "generations": result.generations,
        "converged": result.converged,
        "out": args.out,
        "anchors": result.config.to_dict(),
    }


def _image_bounds(path: str) -> BBox:
    height, width = read_gray_image(path).shape
    return BBox(0, 0, width, height)


def cmd_oracle_detect(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    fixed = BBox(0, 0, *args.bounds) if args.bounds else None
    detections = []
    for record, seed in zip(m.records, child_seeds(args.seed, len(m.records))):
        bounds = fixed
        if bounds is None and args.fp_rate > 0:
            bounds = _image_bounds(record.image_path)
        detections.extend(oracle_detector(
            [a.box for a in record.boxes], args.jitter, args.drop_rate, args.fp_rate, seed,
            image_id=record.image_path, label=args.label, bounds=bounds,
            labels=[a.label for a in record.boxes],
        ))
    write_detections_csv(detections, args.out, args.seed, _csv_comment(args))
    logger.info("Oracle emitted %d detections for %d images", len(detections), len(m.records))
    return {"images": len(m.records), "detections": len(detections), "out": args.out}


def cmd_merge(args, cfg) -> Dict[str, Any]:
    detections = read_detections_csv(args.detections)
    plans = load_tile_plans(args.plans)
    tiles = {t.name: t for p in plans for t in p.tiles}
    source_ids = {p.tiles[0].source_id: p.source_path for p in plans if p.tiles and p.source_path}
    merged = merge_tile_detections(detections, tiles, source_ids, args.threshold,
                                   args.strategy, args.match_metric)
    write_detections_csv(merged, args.out, args.seed, _csv_comment(args))
    logger.info("Merged %d tile detections into %d", len(detections), len(merged))
    return {"tile_detections": len(detections), "merged": len(merged), "out": args.out}


def _fold_keys(folds: Manifest) -> Dict[Any, set]:
    """Image stems and group ids covered by each split label"""
    keys: Dict[Any, set] = {}
    for record in folds.records:
        label = folds.split_of(record)
        if label is None:
            continue
        keys.setdefault(label, set()).update((image_key(record.image_path), record.group_id))
    return keys


def cmd_evaluate(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    gts = {image_key(r.image_path): [(a.box, a.label) for a in r.boxes] for r in m.records}
    dets = detections_by_key(read_detections_csv(args.detections))
    settings = dict(iou_threshold=args.iou, score_threshold=args.score_threshold,
                    union_iou_min=args.union_iou_min, interpolation=args.interpolation)
    report = evaluate(gts, dets, **settings)
    payload = report.to_dict()

    summary: Dict[str, Any] = {
        "map": report.map,
        "accuracy": report.accuracy,
        "images": len(report.verdicts),
        "correct": sum(v.correct for v in report.verdicts),
        "tp": report.tp,
        "fp": report.fp,
        "fn": report.fn,
        "out": args.out,
    }
    if args.manifest:
        fold_reports = []
        payload["folds"] = {}
        for label, keys in sorted(_fold_keys(load_manifest(args.manifest)).items(),
                                  key=lambda item: str(item[0])):
            fold_gts = {k: v for k, v in gts.items() if k in keys}
            fold_dets = {k: v for k, v in dets.items() if k in keys}
            fold_report = evaluate(fold_gts, fold_dets, **settings)
            fold_reports.append(fold_report)
            payload["folds"][str(label)] = fold_report.to_dict()
        cross = summarize_folds(fold_reports).to_dict()
        payload["cross_validation"] = cross
        summary["mean_accuracy"] = cross["mean_accuracy"]
        summary["std_accuracy"] = cross["std_accuracy"]
        summary["mean_map"] = cross["mean_map"]
    save_json(args.out, payload, seed=args.seed)

    failed = [v for v in report.verdicts if not v.correct]
    if failed and not args.json:
        table = Table(title="Incorrect images", box=box.SIMPLE, show_header=True)
        table.add_column("Image", style="cyan")
        table.add_column("Annotations", justify="right")
        table.add_column("Detections", justify="right")
        table.add_column("Failed")
        for v in failed[:args.show_failed]:
            table.add_row(v.image_id, str(v.n_annotations), str(v.n_detections), ", ".join(v.failed_conditions))
        console.print(table)
    return summary


def cmd_synth(args, cfg) -> Dict[str, Any]:
    spec = SynthSpec(
        width=args.size[0],
        height=args.size[1],
        blade_scale=args.blade_scale,
        positive_fraction=args.positive_fraction,
        mean_defects=args.mean_defects,
        defect_count=args.defects,
        seed=args.seed,
    )
    out_dir = Path(args.out_dir)

    def work(item):
        index, seed = item
        image, boxes = generate_synthetic_scan(spec, seed)
        path = str(out_dir / f"scan_{index:04d}.png")
        write_png(path, image)
        return path, boxes

    with _executor(args.threads) as pool:
        scans = _map(work, enumerate(child_seeds(args.seed, args.count)), pool)
    records = [AnnotationRecord(path, [Annotation(b, args.label) for b in boxes]) for path, boxes in scans]
    annotations = str(out_dir / "annotations.csv")
    m = Manifest(records)
    write_annotations_csv(m, annotations, args.seed, _csv_comment(args))
    logger.info("Generated %d scans (%d positive) in %s", len(records), len(m.positives()), out_dir)
    return {"scans": len(records), "positives": len(m.positives()), "defects": len(m.boxes()),
            "annotations": annotations}


def cmd_stats(args, cfg) -> Dict[str, Any]:
    m = load_manifest(args.annotations)
    stats = dataset_statistics(m, args.reference_area)
    hist = normalized_area_histogram(m, args.reference_area, cfg.HISTOGRAM_EDGES, args.scale)
    if args.histogram_out:
        write_histogram_csv(hist, args.histogram_out, args.seed, _csv_comment(args))
    summary: Dict[str, Any] = dict(stats.to_dict())
    sizes = [(w * args.scale, h * args.scale) for w, h in gt_sizes(m)]
    if sizes:
        ious = max_iou_per_box(sizes, DEFAULT_ANCHOR_CONFIG)
        summary["default_anchor_mean_iou"] = float(ious.mean())
        summary["default_anchor_below_half"] = int((ious < 0.5).sum())
    summary["histogram"] = hist.to_dict()
    if m.assignments:
        table = split_table(m)
        summary["splits"] = table.to_dict(orient="records")
        if not args.json:
            console.print(_frame_table("Dataset structure", table))
    if not args.json:
        hist_table = Table(title="Normalized defect area", box=box.SIMPLE, show_header=True)
        hist_table.add_column("Bin", style="cyan")
        hist_table.add_column("Count", justify="right")
        for low, high, count in hist.rows():
            hist_table.add_row(f"{low:.2f}-{high:.2f}", str(count))
        console.print(hist_table)
    return summary


# ── Parser ────────────────────────────────────────────────────────────────────

def build_parser(cfg=None) -> argparse.ArgumentParser:
    cfg = cfg or get_config()

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="Print a JSON summary on stdout")
    common.add_argument("--seed", type=int, default=cfg.SEED, help="Seed for every random draw")
    common.add_argument("--log-level", default=cfg.LOG_LEVEL, type=str.upper, choices=LOG_LEVELS)
    common.add_argument("--threads", type=_positive_int, default=cfg.THREADS,
                        help="Worker threads (default: TILEFORGE_THREADS)")
    common.add_argument("--plain-csv", action="store_true", help="Omit '#' provenance lines in CSV outputs")

    parser = argparse.ArgumentParser(prog="tileforge", description="Small-defect detection pipeline toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("crop", parents=[common], help="Crop each scan to its largest foreground region")
    p.add_argument("--image", nargs="+", required=True, help="Images or directories of images")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--polarity", choices=POLARITIES, default=cfg.CROP_POLARITY)
    p.add_argument("--margin", type=int, default=cfg.CROP_MARGIN)
    p.add_argument("--threshold", type=int, default=None, help="Fixed threshold instead of Otsu")
    p.add_argument("--annotations", help="Source annotations to translate into crop coordinates")
    p.add_argument("--annotations-out", help="Default: OUT_DIR/annotations.csv")
    p.set_defaults(handler=cmd_crop)

    p = sub.add_parser("tile", parents=[common], help="Cut overlapping, upscaled tiles")
    p.add_argument("--image", nargs="+", required=True, help="Images or directories of images")
    p.add_argument("--out-dir", required=True)
    layout = p.add_mutually_exclusive_group()
    layout.add_argument("--grid", type=_dims(1), default=cfg.GRID, help="Tile count NXxNY (default 5x5)")
    layout.add_argument("--overlap", type=_dims(0), default=None, help="Fixed overlap OXxOY in pixels")
    p.add_argument("--tile", type=_dims(1), default=(cfg.TILE_W, cfg.TILE_H), help="Tile size WxH")
    p.add_argument("--scale", type=float, default=cfg.TILE_SCALE)
    p.add_argument("--interpolation", choices=sorted(INTERPOLATIONS), default=cfg.INTERPOLATION)
    p.add_argument("--annotations", help="Source annotations to project onto the tiles")
    p.add_argument("--annotations-out", help="Default: OUT_DIR/tiles.csv")
    p.add_argument("--min-visibility", type=float, default=cfg.MIN_VISIBILITY)
    p.set_defaults(handler=cmd_tile)

    p = sub.add_parser("balance", parents=[common], help="Subsample negatives to a ratio of positives")
    p.add_argument("--annotations", required=True, help="Annotations CSV or manifest JSON")
    p.add_argument("--out", required=True, help="Output CSV, or .json to keep split assignments")
    p.add_argument("--ratio", type=float, default=cfg.NEGATIVE_RATIO)
    p.add_argument("--per-split", action="store_true", help="Balance inside each split separately")
    p.set_defaults(handler=cmd_balance)

    p = sub.add_parser("split", parents=[common], help="Grouped k-fold or train/validation split")
    p.add_argument("--annotations", required=True, help="Annotations CSV or manifest JSON")
    p.add_argument("--out", required=True, help="Manifest JSON")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--k", type=int, default=cfg.FOLDS)
    mode.add_argument("--val-fraction", type=float, default=None)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("optimize-anchors", parents=[common], help="Differential-evolution anchor search")
    p.add_argument("--annotations", required=True, help="Annotations CSV or manifest JSON")
    p.add_argument("--out", required=True, help="Anchors JSON")
    p.add_argument("--fold", type=_split_label, default=None,
                   help="Use only this split of a manifest (fold number or name, e.g. validation)")
    p.add_argument("--gt-scale", type=float, default=1.0, help="Multiply box sizes (e.g. 2 for upscaled tiles)")
    p.add_argument("--r-bounds", type=_interval, default=cfg.R_BOUNDS)
    p.add_argument("--scale-bounds", type=_interval, default=cfg.SCALE_BOUNDS)
    p.add_argument("--objective", choices=sorted(OBJECTIVES), default="mean")
    p.add_argument("--population-multiplier", type=_positive_int, default=cfg.DE_POPULATION_MULTIPLIER)
    p.add_argument("--max-generations", type=int, default=cfg.DE_MAX_GENERATIONS)
    p.add_argument("--tolerance", type=float, default=cfg.DE_TOLERANCE)
    p.set_defaults(handler=cmd_optimize_anchors)

    p = sub.add_parser("oracle-detect", parents=[common], help="Synthetic detections from annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="Detections CSV")
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--label", default="defect", help="Class of false positives")
    p.add_argument("--bounds", type=_dims(1), default=None, help="Image size WxH for false positives (default: read from each image)")
    p.set_defaults(handler=cmd_oracle_detect)

    p = sub.add_parser("merge", parents=[common], help="Map tile detections back and de-duplicate")
    p.add_argument("--detections", required=True, help="Tile-level detections CSV")
    p.add_argument("--plans", required=True, help="plans.json written by tile")
    p.add_argument("--out", required=True, help="Source-level detections CSV")
    p.add_argument("--threshold", type=float, default=cfg.MERGE_THRESHOLD)
    p.add_argument("--strategy", choices=sorted(MERGE_STRATEGIES), default=cfg.MERGE_STRATEGY)
    p.add_argument("--match-metric", choices=sorted(MATCH_METRICS), default=cfg.MERGE_METRIC)
    p.set_defaults(handler=cmd_merge)

    p = sub.add_parser("evaluate", parents=[common], help="mAP and image-level accuracy")
    p.add_argument("--annotations", required=True, help="Annotations CSV or manifest JSON")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="Report JSON")
    p.add_argument("--manifest", help="Split manifest: also report each fold and their mean")
    p.add_argument("--iou", type=float, default=cfg.MATCH_IOU)
    p.add_argument("--score-threshold", type=float, default=cfg.SCORE_THRESHOLD)
    p.add_argument("--union-iou-min", type=float, default=cfg.UNION_IOU_MIN)
    p.add_argument("--interpolation", choices=("all_points", "11_point"), default=cfg.AP_INTERPOLATION)
    p.add_argument("--show-failed", type=int, default=20, help="Incorrect images listed on the console")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="Generate synthetic blade scans")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=_positive_int, default=50)
    p.add_argument("--size", type=_dims(32), default=(960, 1200), help="Scan size WxH")
    p.add_argument("--blade-scale", type=float, default=0.8)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--mean-defects", type=float, default=2.0)
    p.add_argument("--defects", type=int, default=None, help="Fixed defect count per scan")
    p.add_argument("--label", default="defect")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("stats", parents=[common], help="Defect size statistics and area histogram")
    p.add_argument("--annotations", required=True, help="Annotations CSV or manifest JSON")
    p.add_argument("--reference-area", type=float, default=cfg.REFERENCE_AREA)
    p.add_argument("--scale", type=float, default=1.0, help="Upscale factor applied to box sizes")
    p.add_argument("--histogram-out", help="Histogram CSV")
    p.set_defaults(handler=cmd_stats)

    return parser


def _emit(args, summary: Dict[str, Any]):
    if args.json:
        document = {**provenance(args.seed), "command": args.command, **summary}
        sys.stdout.write(json.dumps(document, sort_keys=True) + "\n")
        return
    console.print(_summary_table(args.command, summary))


def dispatch(argv: Optional[List[str]] = None, cfg=None) -> int:
    """Run one subcommand; returns the process exit code"""
    cfg = cfg or get_config()
    parser = build_parser(cfg)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help / --version
        return exc.code if isinstance(exc.code, int) else 0

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger("tileforge").setLevel(args.log_level)
    try:
        summary = args.handler(args, cfg)
    except (TileforgeError, OSError, ValueError) as exc:
        logger.debug("%s failed", args.command, exc_info=True)
        console.print(f"[bold red]error:[/bold red] {escape(str(exc))}", soft_wrap=True, highlight=False)
        return 1
    _emit(args, summary)
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))
