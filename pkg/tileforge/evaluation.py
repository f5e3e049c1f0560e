"""
Detection evaluation: merging tile detections, greedy matching, AP / mAP,
exact union-of-rectangles geometry and the image-level accuracy verdict.

An image with annotations is correct when the number of detections (above
the score threshold) is at least half the number of annotations AND the IoU
between the union of detections and the union of annotations exceeds
union_iou_min. An image without annotations is correct when nothing is
detected.

Detections CSV: image_path,x1,y1,x2,y2,class,score
"""
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import BothEmpty, MalformedLine, NoDefinedClasses, UnknownTile
from .geometry import BBox, ios_pair, iou_pair
from .storage import image_key, iter_csv_rows, write_csv
from .tiler import TileSpec, detection_to_source_coords

logger = logging.getLogger(__name__)

MATCH_METRICS = {
    "iou": iou_pair,
    "ios": ios_pair,
}


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def read_detections_csv(path: str) -> List[Detection]:
    detections = []
    for line_no, fields in iter_csv_rows(path):
        if len(fields) != 7:
            raise MalformedLine(path, line_no, f"expected 7 fields, got {len(fields)}")
        if fields[0].strip() == "image_path":
            continue
        try:
            x1, y1, x2, y2, score = (float(fields[i]) for i in (1, 2, 3, 4, 6))
        except ValueError:
            raise MalformedLine(path, line_no, "non-numeric coordinate or score") from None
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2, score)):
            raise MalformedLine(path, line_no, "non-finite coordinate or score")
        if x1 >= x2 or y1 >= y2:
            raise MalformedLine(path, line_no, f"degenerate box ({x1}, {y1}, {x2}, {y2})")
        if not 0.0 <= score <= 1.0:
            raise MalformedLine(path, line_no, f"score {score} outside [0, 1]")
        detections.append(Detection(fields[0].strip(), BBox(x1, y1, x2, y2), fields[5].strip(), score))
    logger.info("Read %d detections from %s", len(detections), path)
    return detections


def write_detections_csv(detections: Iterable[Detection], path: str, seed: Optional[int] = None,
                         header_comment: bool = True):
    rows = ([d.image_id, *d.box.as_list(), d.label, d.score] for d in detections)
    write_csv(path, rows, seed=seed, header_comment=header_comment)


def _priority_order(dets: Sequence[Detection]) -> List[int]:
    """Descending score, then larger area, then input order"""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, -dets[i].box.area, i))


def _metric(name: str):
    try:
        return MATCH_METRICS[name]
    except KeyError:
        raise ValueError(f"unknown match metric {name!r}, expected one of {sorted(MATCH_METRICS)}") from None


def nms(dets: Sequence[Detection], iou_threshold: float = Config.MATCH_IOU,
        match_metric: str = "iou") -> List[Detection]:
    """Greedy per-class suppression of overlaps above the threshold"""
    overlap = _metric(match_metric)
    kept: List[Detection] = []
    suppressed = [False] * len(dets)
    order = _priority_order(dets)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order[pos + 1:]:
            if not suppressed[j] and dets[j].label == dets[i].label \
                    and overlap(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return kept


def greedy_merge(dets: Sequence[Detection], threshold: float = Config.MERGE_THRESHOLD,
                 match_metric: str = Config.MERGE_METRIC) -> List[Detection]:
    """Non-maximum merging: matched boxes fold into the keeper's bounding hull.

    Each keeper absorbs lower-priority same-class detections whose overlap
    with the hull merged so far exceeds threshold, sweeping until nothing
    more is absorbed. The merged box keeps the keeper's score.
    """
    overlap = _metric(match_metric)
    merged: List[Detection] = []
    absorbed = [False] * len(dets)
    order = _priority_order(dets)
    for pos, i in enumerate(order):
        if absorbed[i]:
            continue
        absorbed[i] = True
        keeper = dets[i]
        box = keeper.box
        grew = True
        while grew:
            grew = False
            for j in order[pos + 1:]:
                if not absorbed[j] and dets[j].label == keeper.label \
                        and overlap(box, dets[j].box) > threshold:
                    absorbed[j] = True
                    box = box.hull(dets[j].box)
                    grew = True
        merged.append(Detection(keeper.image_id, box, keeper.label, keeper.score))
    return merged


MERGE_STRATEGIES = {
    "nms": nms,
    "nmm": greedy_merge,
}


def merge_tile_detections(tile_dets: Iterable[Detection], tiles: Mapping[str, TileSpec],
                          source_ids: Mapping[str, str], threshold: float = Config.MERGE_THRESHOLD,
                          strategy: str = Config.MERGE_STRATEGY,
                          match_metric: str = Config.MERGE_METRIC) -> List[Detection]:
    """Map tile-space detections back to their source image and de-duplicate.

    tiles maps tile names to specs; source_ids maps a plan's source_id to the
    image id written on merged detections.
    """
    try:
        merge = MERGE_STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown merge strategy {strategy!r}, expected one of {sorted(MERGE_STRATEGIES)}") from None
    by_source: Dict[str, List[Detection]] = OrderedDict()
    for det in tile_dets:
        name = image_key(det.image_id)
        tile = tiles.get(name)
        if tile is None:
            raise UnknownTile(f"detection on {det.image_id!r} matches no tile in the plans")
        source = source_ids.get(tile.source_id, tile.source_id)
        box = detection_to_source_coords(det.box, tile)
        by_source.setdefault(source, []).append(Detection(source, box, det.label, det.score))

    merged: List[Detection] = []
    for source, dets in by_source.items():
        kept = merge(dets, threshold, match_metric)
        logger.debug("%s: %d tile detections merged into %d", source, len(dets), len(kept))
        merged.extend(kept)
    return merged


@dataclass
class MatchResult:
    is_tp: List[bool]
    scores: List[float]
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_detections(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[BBox]],
                     iou_threshold: float = Config.MATCH_IOU) -> MatchResult:
    """Greedy by score; each detection takes its best unmatched ground truth.

    Labels are aligned with the input: images in dets' iteration order, and
    within an image the detection order given.
    """
    flat: List[Tuple[str, int, Detection]] = [
        (image_id, k, d) for image_id, items in dets.items() for k, d in enumerate(items)
    ]
    order = sorted(range(len(flat)), key=lambda i: (-flat[i][2].score, i))
    matched = {image_id: [False] * len(boxes) for image_id, boxes in gts.items()}
    is_tp = [False] * len(flat)
    for i in order:
        image_id, _, det = flat[i]
        candidates = gts.get(image_id, [])
        used = matched.get(image_id, [])
        best_iou, best_j = -1.0, -1
        for j, gt in enumerate(candidates):
            if used[j]:
                continue
            iou = iou_pair(det.box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            used[best_j] = True
            is_tp[i] = True
    n_gt = sum(len(boxes) for boxes in gts.values())
    return MatchResult(is_tp, [d.score for _, _, d in flat], n_gt)


def _pr_points(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each distinct score threshold, high to low"""
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(is_tp, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # keep only the last position of each run of tied scores
    last = np.append(scores[1:] != scores[:-1], True) if scores.size else np.zeros(0, dtype=bool)
    tp, fp = tp[last], fp[last]
    return tp / n_gt, tp / (tp + fp)


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int,
                      interpolation: str = Config.AP_INTERPOLATION) -> float:
    """Area under the interpolated precision-recall curve.

    Tied scores form a single operating point. Returns 0 when there is no
    ground truth (the class is then undefined for mAP).
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    recall, precision = _pr_points(scores, is_tp, n_gt)
    if interpolation == "all_points":
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        steps = np.diff(np.concatenate(([0.0], recall)))
        return float(np.sum(steps * envelope))
    if interpolation == "11_point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            reached = recall >= t
            total += float(precision[reached].max()) if reached.any() else 0.0
        return total / 11.0
    raise ValueError(f"unknown interpolation {interpolation!r}")


def mean_average_precision(per_class: Mapping[str, Optional[float]]) -> float:
    """Mean AP over classes with a defined AP (None marks an undefined class)"""
    defined = [ap for ap in per_class.values() if ap is not None]
    if not defined:
        raise NoDefinedClasses("no class has ground-truth instances")
    return float(np.mean(defined))


def _cell_grid(boxes: Sequence[BBox]):
    xs = np.unique([c for b in boxes for c in (b.x1, b.x2)])
    ys = np.unique([c for b in boxes for c in (b.y1, b.y2)])
    return xs, ys


def _coverage(boxes: Sequence[BBox], xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    covered = np.zeros((max(ys.size - 1, 0), max(xs.size - 1, 0)), dtype=bool)
    for b in boxes:
        c1, c2 = np.searchsorted(xs, [b.x1, b.x2])
        r1, r2 = np.searchsorted(ys, [b.y1, b.y2])
        covered[r1:r2, c1:c2] = True
    return covered


def _cell_areas(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.outer(np.diff(ys), np.diff(xs))


def union_area(boxes: Sequence[BBox]) -> float:
    """Exact area of a union of rectangles via coordinate compression"""
    if not boxes:
        return 0.0
    xs, ys = _cell_grid(boxes)
    return float(np.sum(_cell_areas(xs, ys)[_coverage(boxes, xs, ys)]))


def union_iou(g_boxes: Sequence[BBox], s_boxes: Sequence[BBox]) -> float:
    """IoU between the union of g_boxes and the union of s_boxes"""
    if not g_boxes and not s_boxes:
        raise BothEmpty("union IoU of two empty box sets is undefined")
    xs, ys = _cell_grid(list(g_boxes) + list(s_boxes))
    areas = _cell_areas(xs, ys)
    g = _coverage(g_boxes, xs, ys)
    s = _coverage(s_boxes, xs, ys)
    union = float(np.sum(areas[g | s]))
    return float(np.sum(areas[g & s])) / union


@dataclass
class ImageVerdict:
    image_id: str
    n_annotations: int
    n_detections: int
    cond_count: bool
    cond_union_iou: Optional[bool]
    union_iou: Optional[float]
    correct: bool

    @property
    def failed_conditions(self) -> List[str]:
        failed = []
        if not self.cond_count:
            failed.append("count")
        if self.cond_union_iou is False:
            failed.append("union_iou")
        return failed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.image_id,
            "correct": self.correct,
            "cond_count": self.cond_count,
            "cond_union_iou": self.cond_union_iou,
            "union_iou": self.union_iou,
            "n_annotations": self.n_annotations,
            "n_detections": self.n_detections,
            "failed": self.failed_conditions,
        }


def judge_image(image_id: str, annotations: Sequence[BBox], detections: Sequence[Detection],
                score_threshold: float = Config.SCORE_THRESHOLD,
                union_iou_min: float = Config.UNION_IOU_MIN) -> ImageVerdict:
    kept = [d.box for d in detections if d.score >= score_threshold]
    if not annotations:
        ok = not kept
        return ImageVerdict(image_id, 0, len(kept), ok, None, None, ok)
    cond_count = len(kept) >= 0.5 * len(annotations)
    overlap = union_iou(annotations, kept)
    cond_union = overlap > union_iou_min
    return ImageVerdict(image_id, len(annotations), len(kept), cond_count, cond_union,
                        overlap, cond_count and cond_union)


@dataclass
class AccuracyReport:
    verdicts: List[ImageVerdict]

    @property
    def accuracy(self) -> float:
        if not self.verdicts:
            return 0.0
        return sum(v.correct for v in self.verdicts) / len(self.verdicts)


def image_level_accuracy(gts: Mapping[str, Sequence[BBox]], dets: Mapping[str, Sequence[Detection]],
                         score_threshold: float = Config.SCORE_THRESHOLD,
                         union_iou_min: float = Config.UNION_IOU_MIN) -> AccuracyReport:
    """Verdict per image; images only present in dets count as negatives"""
    image_ids = list(gts.keys()) + [i for i in dets.keys() if i not in gts]
    extra = len(image_ids) - len(gts)
    if extra:
        logger.warning("%d images have detections but no ground-truth record", extra)
    verdicts = [
        judge_image(i, gts.get(i, []), dets.get(i, []), score_threshold, union_iou_min)
        for i in image_ids
    ]
    return AccuracyReport(verdicts)


@dataclass
class EvalReport:
    per_class_ap: Dict[str, Optional[float]]
    map: Optional[float]
    verdicts: List[ImageVerdict]
    accuracy: float
    tp: int
    fp: int
    fn: int
    settings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "map": self.map,
            "per_class": self.per_class_ap,
            "accuracy": self.accuracy,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "settings": self.settings,
            "per_image": [v.to_dict() for v in self.verdicts],
        }


def evaluate(gts: Mapping[str, Sequence[Tuple[BBox, str]]], dets: Mapping[str, Sequence[Detection]],
             iou_threshold: float = Config.MATCH_IOU,
             score_threshold: float = Config.SCORE_THRESHOLD,
             union_iou_min: float = Config.UNION_IOU_MIN,
             interpolation: str = Config.AP_INTERPOLATION) -> EvalReport:
    """Full report: per-class AP and mAP over all detections, plus accuracy.

    gts maps image ids to (box, label) pairs; negative images map to [].
    """
    labels = sorted({label for items in gts.values() for _, label in items}
                    | {d.label for items in dets.values() for d in items})
    per_class: Dict[str, Optional[float]] = {}
    tp = fp = fn = 0
    for label in labels:
        class_gts = {i: [b for b, l in items if l == label] for i, items in gts.items()}
        class_dets = {i: [d for d in items if d.label == label] for i, items in dets.items()}
        match = match_detections(class_dets, class_gts, iou_threshold)
        tp, fp, fn = tp + match.tp, fp + match.fp, fn + match.fn
        if match.n_gt == 0:
            per_class[label] = None
            continue
        per_class[label] = average_precision(match.scores, match.is_tp, match.n_gt, interpolation)

    try:
        map_value: Optional[float] = mean_average_precision(per_class)
    except NoDefinedClasses:
        logger.warning("No class has ground truth; mAP is undefined")
        map_value = None

    boxes_only = {i: [b for b, _ in items] for i, items in gts.items()}
    accuracy = image_level_accuracy(boxes_only, dets, score_threshold, union_iou_min)
    return EvalReport(
        per_class_ap=per_class,
        map=map_value,
        verdicts=accuracy.verdicts,
        accuracy=accuracy.accuracy,
        tp=tp, fp=fp, fn=fn,
        settings={
            "iou_threshold": iou_threshold,
            "score_threshold": score_threshold,
            "union_iou_min": union_iou_min,
            "interpolation": interpolation,
        },
    )


@dataclass
class FoldSummary:
    accuracies: List[float]
    maps: List[Optional[float]]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else 0.0

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else 0.0

    def _defined_maps(self) -> List[float]:
        return [m for m in self.maps if m is not None]

    @property
    def mean_map(self) -> Optional[float]:
        defined = self._defined_maps()
        return float(np.mean(defined)) if defined else None

    @property
    def std_map(self) -> Optional[float]:
        defined = self._defined_maps()
        return float(np.std(defined)) if defined else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "folds": len(self.accuracies),
            "accuracy": self.accuracies,
            "map": self.maps,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_map": self.mean_map,
            "std_map": self.std_map,
        }


def summarize_folds(reports: Sequence[EvalReport]) -> FoldSummary:
    return FoldSummary([r.accuracy for r in reports], [r.map for r in reports])


def detections_by_key(detections: Iterable[Detection]) -> Dict[str, List[Detection]]:
    """Group detections on the image stem so they join with annotation records"""
    grouped: Dict[str, List[Detection]] = defaultdict(list)
    for d in detections:
        grouped[image_key(d.image_id)].append(d)
    return dict(grouped)
