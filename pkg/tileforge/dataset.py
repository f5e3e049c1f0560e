"""
Annotation ingestion, negative balancing, leakage-free splitting and
defect-size statistics.

Annotations CSV, one box per line:

    image_path,x1,y1,x2,y2,class[,group_id]

A line with empty box fields (``image_path,,,,,``) declares a negative image.
Tiles of one source image share a group so they never straddle splits.
"""
import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import Config
from .errors import MalformedLine, NoPositives, TooFewGroups
from .geometry import BBox
from .storage import child_seeds, iter_csv_rows, load_document, save_json, write_csv

logger = logging.getLogger(__name__)

TILE_SUFFIX = re.compile(r"_r\d+_c\d+$")

SplitLabel = Union[str, int]


def default_group_id(image_path: str) -> str:
    """Source image identity: file stem without any _r{row}_c{col} tile suffix"""
    return TILE_SUFFIX.sub("", Path(image_path).stem)


@dataclass(frozen=True)
class Annotation:
    box: BBox
    label: str


@dataclass
class AnnotationRecord:
    image_path: str
    boxes: List[Annotation] = field(default_factory=list)
    group_id: str = ""

    def __post_init__(self):
        if not self.group_id:
            self.group_id = default_group_id(self.image_path)

    @property
    def is_positive(self) -> bool:
        return bool(self.boxes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_path": self.image_path,
            "group_id": self.group_id,
            "boxes": [{"box": a.box.as_list(), "class": a.label} for a in self.boxes],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnnotationRecord":
        boxes = [Annotation(BBox.from_sequence(b["box"]), b["class"]) for b in data.get("boxes", [])]
        return cls(data["image_path"], boxes, data.get("group_id", ""))


@dataclass
class Manifest:
    records: List[AnnotationRecord] = field(default_factory=list)
    assignments: Dict[str, SplitLabel] = field(default_factory=dict)
    seed: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def positives(self) -> List[AnnotationRecord]:
        return [r for r in self.records if r.is_positive]

    def negatives(self) -> List[AnnotationRecord]:
        return [r for r in self.records if not r.is_positive]

    def groups(self) -> List[str]:
        return list(OrderedDict.fromkeys(r.group_id for r in self.records))

    def boxes(self) -> List[Annotation]:
        return [a for r in self.records for a in r.boxes]

    def split_of(self, record: AnnotationRecord) -> Optional[SplitLabel]:
        return self.assignments.get(record.image_path)

    def split_labels(self) -> List[SplitLabel]:
        return sorted(set(self.assignments.values()), key=lambda s: (isinstance(s, str), s))

    def subset(self, split: SplitLabel) -> "Manifest":
        """Records assigned to one split, keeping that assignment"""
        records = [r for r in self.records if self.assignments.get(r.image_path) == split]
        return Manifest(records, {r.image_path: split for r in records}, self.seed, dict(self.meta))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "records": [
                {**r.to_dict(), "split": self.assignments.get(r.image_path)}
                for r in self.records
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Manifest":
        records, assignments = [], {}
        for item in data.get("records", []):
            record = AnnotationRecord.from_dict(item)
            records.append(record)
            if item.get("split") is not None:
                assignments[record.image_path] = item["split"]
        return cls(records, assignments, data.get("seed"), data.get("meta", {}))

    def save(self, path: str):
        save_json(path, self.to_dict(), seed=self.seed)

    @classmethod
    def load(cls, path: str) -> "Manifest":
        return load_document(path, cls.from_dict)


def _parse_float(value: str, name: str, path: str, line_no: int) -> float:
    try:
        number = float(value)
    except ValueError:
        raise MalformedLine(path, line_no, f"{name}={value!r} is not a number") from None
    if not math.isfinite(number):
        raise MalformedLine(path, line_no, f"{name}={value!r} is not finite")
    return number


def read_annotations_csv(path: str) -> Manifest:
    """Parse an annotations CSV; repeated image paths accumulate boxes"""
    records: "OrderedDict[str, AnnotationRecord]" = OrderedDict()
    for index, (line_no, fields) in enumerate(iter_csv_rows(path)):
        if index == 0 and fields and fields[0].strip() == "image_path":
            continue
        if len(fields) not in (6, 7):
            raise MalformedLine(path, line_no, f"expected 6 or 7 fields, got {len(fields)}")
        image_path = fields[0].strip()
        if not image_path:
            raise MalformedLine(path, line_no, "empty image_path")
        group_id = fields[6].strip() if len(fields) == 7 else ""
        record = records.get(image_path)
        if record is None:
            record = records[image_path] = AnnotationRecord(image_path, [], group_id)
        elif group_id and group_id != record.group_id:
            raise MalformedLine(path, line_no, f"group {group_id!r} conflicts with {record.group_id!r}")

        box_fields = [f.strip() for f in fields[1:6]]
        if not any(box_fields):
            continue
        if not all(box_fields):
            raise MalformedLine(path, line_no, "box fields must be all empty or all present")
        x1, y1, x2, y2 = (_parse_float(v, n, path, line_no)
                          for v, n in zip(box_fields[:4], ("x1", "y1", "x2", "y2")))
        if x1 >= x2:
            raise MalformedLine(path, line_no, f"x1={x1} >= x2={x2}")
        if y1 >= y2:
            raise MalformedLine(path, line_no, f"y1={y1} >= y2={y2}")
        record.boxes.append(Annotation(BBox(x1, y1, x2, y2), box_fields[4]))

    manifest = Manifest(list(records.values()))
    logger.info("Read %d images (%d positive) from %s",
                len(manifest.records), len(manifest.positives()), path)
    return manifest


def annotation_rows(m: Manifest, with_groups: bool = True) -> List[List[Any]]:
    rows = []
    for record in m.records:
        tail = [record.group_id] if with_groups else []
        if not record.boxes:
            rows.append([record.image_path, "", "", "", "", ""] + tail)
        for a in record.boxes:
            rows.append([record.image_path, *a.box.as_list(), a.label] + tail)
    return rows


def write_annotations_csv(m: Manifest, path: str, seed: Optional[int] = None,
                          header_comment: bool = True):
    write_csv(path, annotation_rows(m), seed=seed, header_comment=header_comment)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _select_negatives(negatives: List[AnnotationRecord], n_keep: int,
                      rng: np.random.Generator) -> List[AnnotationRecord]:
    picked = rng.choice(len(negatives), size=n_keep, replace=False) if n_keep else []
    keep = set(int(i) for i in picked)
    return [r for i, r in enumerate(negatives) if i in keep]


def balance_negatives(m: Manifest, ratio: float = Config.NEGATIVE_RATIO, seed: int = 0) -> Manifest:
    """Keep every positive and round(ratio * n_pos) random negatives"""
    if ratio < 0 or not math.isfinite(ratio):
        raise ValueError(f"ratio must be a non-negative number, got {ratio}")
    positives, negatives = m.positives(), m.negatives()
    if not positives:
        raise NoPositives("cannot balance a manifest without positive images")

    wanted = _round_half_up(ratio * len(positives))
    n_keep = min(wanted, len(negatives))
    if n_keep < wanted:
        logger.warning("Only %d negatives available, %d requested", len(negatives), wanted)
    rng = np.random.default_rng(seed)
    kept = set(id(r) for r in _select_negatives(negatives, n_keep, rng))

    records = [r for r in m.records if r.is_positive or id(r) in kept]
    achieved = n_keep / len(positives)
    meta = dict(m.meta)
    meta["balance"] = {
        "ratio": ratio,
        "achieved_ratio": achieved,
        "positives": len(positives),
        "negatives_kept": n_keep,
        "negatives_available": len(negatives),
        "seed": seed,
    }
    assignments = {r.image_path: m.assignments[r.image_path]
                   for r in records if r.image_path in m.assignments}
    logger.info("Balanced to %d positives / %d negatives (ratio %.3f)",
                len(positives), n_keep, achieved)
    return Manifest(records, assignments, seed, meta)


def balance_within_splits(m: Manifest, ratio: float = Config.NEGATIVE_RATIO, seed: int = 0) -> Manifest:
    """Balance each split/fold on its own so no record crosses a split"""
    labels = m.split_labels()
    if not labels:
        return balance_negatives(m, ratio, seed)
    records, assignments, per_split = [], {}, {}
    for label, child_seed in zip(labels, child_seeds(seed, len(labels))):
        part = balance_negatives(m.subset(label), ratio, child_seed)
        records.extend(part.records)
        assignments.update(part.assignments)
        per_split[str(label)] = part.meta["balance"]
    order = {id(r): i for i, r in enumerate(m.records)}
    records.sort(key=lambda r: order[id(r)])
    meta = dict(m.meta)
    meta["balance"] = {"ratio": ratio, "seed": seed, "splits": per_split}
    return Manifest(records, assignments, seed, meta)


def _shuffled_groups(m: Manifest, seed: int) -> List[str]:
    groups = sorted(m.groups())
    order = np.random.default_rng(seed).permutation(len(groups))
    return [groups[i] for i in order]


def assign_folds(m: Manifest, k: int = Config.FOLDS, seed: int = 0) -> Manifest:
    """Deal shuffled groups round-robin into k folds; records follow their group"""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    groups = _shuffled_groups(m, seed)
    if len(groups) < k:
        raise TooFewGroups(f"{len(groups)} groups cannot fill {k} folds")
    fold_of = {g: i % k for i, g in enumerate(groups)}
    assignments = {r.image_path: fold_of[r.group_id] for r in m.records}
    meta = dict(m.meta)
    meta["split"] = {"mode": "kfold", "k": k, "seed": seed}
    return Manifest(list(m.records), assignments, seed, meta)


def grouped_kfold(m: Manifest, k: int = Config.FOLDS, seed: int = 0) -> List[Manifest]:
    assigned = assign_folds(m, k, seed)
    folds = [assigned.subset(i) for i in range(k)]
    for i, fold in enumerate(folds):
        logger.info("Fold %d: %d groups, %d records", i, len(fold.groups()), len(fold.records))
    return folds


def grouped_train_val_split(m: Manifest, val_fraction: float = Config.VAL_FRACTION,
                            seed: int = 0) -> Manifest:
    """Two-way split by group; at least one group lands on each side"""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    groups = _shuffled_groups(m, seed)
    if len(groups) < 2:
        raise TooFewGroups(f"{len(groups)} groups cannot form a train/validation split")
    n_val = min(max(_round_half_up(val_fraction * len(groups)), 1), len(groups) - 1)
    val_groups = set(groups[:n_val])
    assignments = {r.image_path: ("validation" if r.group_id in val_groups else "train")
                   for r in m.records}
    meta = dict(m.meta)
    meta["split"] = {"mode": "train_val", "val_fraction": val_fraction, "seed": seed}
    return Manifest(list(m.records), assignments, seed, meta)


@dataclass
class AreaHistogram:
    edges: List[float]
    counts: List[int]
    samples: List[float]
    fraction_below_one: float
    reference_area: float
    scale: float = 1.0

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def rows(self) -> List[Tuple[float, float, int]]:
        return [(lo, hi, c) for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "reference_area": self.reference_area,
            "scale": self.scale,
            "bins": [{"bin_low": lo, "bin_high": hi, "count": c} for lo, hi, c in self.rows()],
            "total": self.total,
            "fraction_below_one": self.fraction_below_one,
        }


def normalized_area_histogram(m: Manifest, reference_area: float = Config.REFERENCE_AREA,
                              bin_edges: Sequence[float] = Config.HISTOGRAM_EDGES,
                              scale: float = 1.0) -> AreaHistogram:
    """Histogram of box area / reference_area; outliers land in the end bins.

    scale models an upscale of the images (areas grow by scale**2).
    """
    if reference_area <= 0:
        raise ValueError(f"reference_area must be positive, got {reference_area}")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges needs at least two increasing values")
    samples = np.array([a.box.area * scale * scale / reference_area for a in m.boxes()],
                       dtype=np.float64)
    if samples.size == 0:
        return AreaHistogram(edges.tolist(), [0] * (edges.size - 1), [], 0.0, reference_area, scale)
    counts, _ = np.histogram(np.clip(samples, edges[0], edges[-1]), bins=edges)
    return AreaHistogram(
        edges=edges.tolist(),
        counts=[int(c) for c in counts],
        samples=samples.tolist(),
        fraction_below_one=float(np.mean(samples < 1.0)),
        reference_area=reference_area,
        scale=scale,
    )


def write_histogram_csv(hist: AreaHistogram, path: str, seed: Optional[int] = None,
                        header_comment: bool = True):
    rows = [("bin_low", "bin_high", "count")] + hist.rows()
    write_csv(path, rows, seed=seed, header_comment=header_comment)


@dataclass
class DatasetStats:
    n_images: int
    n_positive: int
    n_negative: int
    n_boxes: int
    n_groups: int
    mean_box_w: float
    mean_box_h: float
    std_box_w: float
    std_box_h: float
    fraction_below_reference: float

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def dataset_statistics(m: Manifest, reference_area: float = Config.REFERENCE_AREA) -> DatasetStats:
    widths = np.array([a.box.width for a in m.boxes()], dtype=np.float64)
    heights = np.array([a.box.height for a in m.boxes()], dtype=np.float64)
    has_boxes = widths.size > 0
    return DatasetStats(
        n_images=len(m.records),
        n_positive=len(m.positives()),
        n_negative=len(m.negatives()),
        n_boxes=int(widths.size),
        n_groups=len(m.groups()),
        mean_box_w=float(widths.mean()) if has_boxes else 0.0,
        mean_box_h=float(heights.mean()) if has_boxes else 0.0,
        std_box_w=float(widths.std()) if has_boxes else 0.0,
        std_box_h=float(heights.std()) if has_boxes else 0.0,
        fraction_below_reference=float(np.mean(widths * heights < reference_area)) if has_boxes else 0.0,
    )


def split_table(m: Manifest) -> pd.DataFrame:
    """Positive / Negative / Total image counts per split"""
    frame = pd.DataFrame({
        "Set": [str(m.assignments.get(r.image_path, "unassigned")) for r in m.records],
        "Positive": [int(r.is_positive) for r in m.records],
    })
    if frame.empty:
        return pd.DataFrame(columns=["Set", "Positive", "Negative", "Total"])
    table = frame.groupby("Set", sort=True).agg(Positive=("Positive", "sum"), Total=("Positive", "size"))
    table["Negative"] = table["Total"] - table["Positive"]
    return table.reset_index()[["Set", "Positive", "Negative", "Total"]]


def gt_sizes(m: Manifest) -> List[Tuple[float, float]]:
    return [(a.box.width, a.box.height) for a in m.boxes()]


def load_manifest(path: str) -> Manifest:
    """Manifest from either a JSON manifest or an annotations CSV"""
    if str(path).lower().endswith(".json"):
        return Manifest.load(path)
    return read_annotations_csv(path)

