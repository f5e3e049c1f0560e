"""
Synthetic blade scans and a controllable stand-in detector.

Scans are a bright convex blade on a dark background with small darker
elliptical defects (dark-on-bright, like absorption contrast). Everything is
driven by numpy Generators, so a seed reproduces images and boxes exactly.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .geometry import BBox
from .evaluation import Detection
from .storage import child_seeds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    width: int = 960
    height: int = 1200
    blade_scale: float = 0.8
    positive_fraction: float = 0.5
    mean_defects: float = 2.0
    defect_count: Optional[int] = None  # fixed count overrides the distribution
    mean_w: float = 14.0
    mean_h: float = 18.0
    jitter_w: float = 3.0
    jitter_h: float = 4.0
    background_level: int = 20
    blade_level: int = 200
    defect_level: int = 110
    defect_spacing: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError(f"scan {self.width}x{self.height} is too small")
        if not 0 < self.blade_scale <= 1:
            raise ValueError(f"blade_scale must be in (0, 1], got {self.blade_scale}")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must be in [0, 1]")
        if self.mean_w - self.jitter_w < 2 or self.mean_h - self.jitter_h < 2:
            raise ValueError("defects must stay at least 2 px wide and tall")
        levels = (self.background_level, self.blade_level, self.defect_level)
        if not all(0 <= v <= 255 for v in levels):
            raise ValueError(f"intensity levels {levels} must fit in 8 bits")
        if not self.background_level < self.defect_level < self.blade_level:
            raise ValueError("expected background < defect < blade intensity")


def blade_polygon(spec: SynthSpec) -> np.ndarray:
    """Convex tapered outline centered in the scan, wider at the root"""
    w, h = spec.width * spec.blade_scale, spec.height * spec.blade_scale
    cx, cy = spec.width / 2.0, spec.height / 2.0
    top, bottom = cy - h / 2.0, cy + h / 2.0
    points = [
        (cx - 0.35 * w, top),
        (cx + 0.30 * w, top),
        (cx + 0.50 * w, top + 0.35 * h),
        (cx + 0.50 * w, bottom),
        (cx - 0.50 * w, bottom),
        (cx - 0.50 * w, top + 0.25 * h),
    ]
    return np.round(np.array(points)).astype(np.int32)


def _defect_count(spec: SynthSpec, rng: np.random.Generator) -> int:
    if spec.defect_count is not None:
        return spec.defect_count
    if rng.random() >= spec.positive_fraction:
        return 0
    return 1 + int(rng.poisson(max(spec.mean_defects - 1.0, 0.0)))


def _ellipse_mask(w: int, h: int) -> np.ndarray:
    """Pixels whose centers fall inside the ellipse inscribed in a w x h box"""
    ys, xs = np.ogrid[0:h, 0:w]
    nx = (xs + 0.5 - w / 2.0) / (w / 2.0)
    ny = (ys + 0.5 - h / 2.0) / (h / 2.0)
    return nx * nx + ny * ny <= 1.0


def _inside_polygon(polygon: np.ndarray, box: Tuple[int, int, int, int]) -> bool:
    x1, y1, x2, y2 = box
    contour = polygon.reshape(-1, 1, 2)
    return all(cv2.pointPolygonTest(contour, (float(x), float(y)), False) > 0
               for x, y in ((x1, y1), (x2, y1), (x1, y2), (x2, y2)))


def _clear_of(placed: List[Tuple[int, int, int, int]], box, spacing: int) -> bool:
    x1, y1, x2, y2 = box
    return all(x2 + spacing <= a1 or a2 + spacing <= x1 or y2 + spacing <= b1 or b2 + spacing <= y1
               for a1, b1, a2, b2 in placed)


def _place_defect(spec: SynthSpec, polygon: np.ndarray, placed, rng: np.random.Generator,
                  attempts: int = 100) -> Optional[Tuple[int, int, int, int]]:
    """Rejection-sample a defect box inside the blade and clear of placed ones"""
    x_lo, y_lo = (int(v) for v in polygon.min(axis=0))
    x_hi, y_hi = (int(v) for v in polygon.max(axis=0))
    for _ in range(attempts):
        w = int(round(rng.uniform(spec.mean_w - spec.jitter_w, spec.mean_w + spec.jitter_w)))
        h = int(round(rng.uniform(spec.mean_h - spec.jitter_h, spec.mean_h + spec.jitter_h)))
        if x_hi - x_lo <= w or y_hi - y_lo <= h:
            return None
        x1 = int(rng.integers(x_lo, x_hi - w))
        y1 = int(rng.integers(y_lo, y_hi - h))
        candidate = (x1, y1, x1 + w, y1 + h)
        if _inside_polygon(polygon, candidate) and _clear_of(placed, candidate, spec.defect_spacing):
            return x1, y1, w, h
    return None


def generate_synthetic_scan(spec: SynthSpec, seed: Optional[int] = None) -> Tuple[np.ndarray, List[BBox]]:
    """Render one scan; returns the image and tight boxes of every defect"""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    image = np.full((spec.height, spec.width), spec.background_level, dtype=np.uint8)
    polygon = blade_polygon(spec)
    cv2.fillConvexPoly(image, polygon, int(spec.blade_level))

    placed: List[Tuple[int, int, int, int]] = []
    boxes: List[BBox] = []
    for _ in range(_defect_count(spec, rng)):
        placement = _place_defect(spec, polygon, placed, rng)
        if placement is None:
            logger.warning("Could not place a defect after 100 attempts, skipping it")
            continue
        x1, y1, w, h = placement
        mask = _ellipse_mask(w, h)
        candidate = (x1, y1, x1 + w, y1 + h)
        rows, cols = np.nonzero(mask)
        image[y1:y1 + h, x1:x1 + w][mask] = spec.defect_level
        placed.append(candidate)
        boxes.append(BBox(x1 + int(cols.min()), y1 + int(rows.min()),
                          x1 + int(cols.max()) + 1, y1 + int(rows.max()) + 1))
    return image, boxes


def generate_dataset(spec: SynthSpec, count: int) -> Iterator[Tuple[str, np.ndarray, List[BBox]]]:
    """Yield (name, image, boxes) for count independent scans"""
    for index, seed in enumerate(child_seeds(spec.seed, count)):
        image, boxes = generate_synthetic_scan(spec, seed)
        yield f"scan_{index:04d}", image, boxes


def _jittered(box: BBox, jitter: float, rng: np.random.Generator) -> BBox:
    offsets = rng.uniform(-jitter, jitter, size=4) if jitter > 0 else np.zeros(4)
    x1, y1, x2, y2 = (c + o for c, o in zip(box.as_list(), offsets))
    if x2 - x1 < 1.0:
        x1, x2 = (x1 + x2) / 2.0 - 0.5, (x1 + x2) / 2.0 + 0.5
    if y2 - y1 < 1.0:
        y1, y2 = (y1 + y2) / 2.0 - 0.5, (y1 + y2) / 2.0 + 0.5
    return BBox(x1, y1, x2, y2)


def _false_positive(gts: Sequence[BBox], bounds: BBox, mean_w: float, mean_h: float,
                    rng: np.random.Generator, attempts: int = 100) -> Optional[BBox]:
    """Rejection-sample a box inside bounds that overlaps no gt"""
    for _ in range(attempts):
        w = min(float(rng.uniform(0.5, 1.5)) * mean_w, bounds.width)
        h = min(float(rng.uniform(0.5, 1.5)) * mean_h, bounds.height)
        x1 = float(rng.uniform(bounds.x1, bounds.x2 - w))
        y1 = float(rng.uniform(bounds.y1, bounds.y2 - h))
        candidate = BBox(x1, y1, min(x1 + w, bounds.x2), min(y1 + h, bounds.y2))
        if all(candidate.intersection(gt) is None for gt in gts):
            return candidate
    return None


def oracle_detector(gts: Sequence[BBox], jitter: float = 0.0, drop_rate: float = 0.0,
                    fp_rate: float = 0.0, seed: int = 0, image_id: str = "",
                    label: str = "defect", bounds: Optional[BBox] = None,
                    labels: Optional[Sequence[str]] = None) -> List[Detection]:
    """Detector stand-in: ground truth, perturbed, thinned and polluted.

    Kept boxes score U(0.6, 1). False positives score U(0, 0.6), are drawn
    uniformly inside bounds (the image extent, required whenever fp_rate > 0)
    and never overlap a gt box, so they can't rescue a dropped one. Their size
    varies around the mean gt size, or 14x18 on negatives. labels, when given,
    names the class of each gt box; false positives always carry label.
    """
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if not (0 <= drop_rate <= 1 and 0 <= fp_rate <= 1):
        raise ValueError("drop_rate and fp_rate must be in [0, 1]")
    if labels is not None and len(labels) != len(gts):
        raise ValueError(f"got {len(labels)} labels for {len(gts)} boxes")
    if fp_rate > 0 and bounds is None:
        raise ValueError(f"false positives for {image_id or 'an image'} need the image bounds")
    rng = np.random.default_rng(seed)
    detections = []
    for k, gt in enumerate(gts):
        dropped = rng.random() < drop_rate
        box = _jittered(gt, jitter, rng)
        score = float(rng.uniform(0.6, 1.0))
        if not dropped:
            detections.append(Detection(image_id, box, label if labels is None else labels[k], score))

    n_fp = int(rng.poisson(fp_rate * len(gts) + fp_rate))
    mean_w = float(np.mean([g.width for g in gts])) if gts else 14.0
    mean_h = float(np.mean([g.height for g in gts])) if gts else 18.0
    for _ in range(n_fp):
        box = _false_positive(gts, bounds, mean_w, mean_h, rng)
        if box is None:
            logger.debug("No room for a false positive on %s", image_id)
            continue
        detections.append(Detection(image_id, box, label, float(rng.uniform(0.0, 0.6))))
    return detections
