"""
Foreground (aerofoil) extraction from large grayscale scans.

Otsu threshold, 8-connected labeling, largest component by pixel area, then
a margin-padded crop that remembers where it came from.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np

from .errors import ConstantImage, InvalidBox, NoForeground
from .geometry import BBox
from .storage import as_gray_image

logger = logging.getLogger(__name__)

BRIGHT_FG = "bright_fg"
DARK_FG = "dark_fg"
POLARITIES = (BRIGHT_FG, DARK_FG)
CONNECTIVITY = 8


def _levels(img: np.ndarray) -> int:
    return 256 if img.dtype == np.uint8 else 65536


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Between-class variance for every split "class 0 = levels <= t".

    Splits with an empty class score 0.
    """
    counts = hist.astype(np.float64)
    levels = np.arange(counts.size, dtype=np.float64)
    total = counts.sum()
    n0 = np.cumsum(counts)
    m0 = np.cumsum(counts * levels)
    n1 = total - n0
    m1 = m0[-1] - m0
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_gap = m0 / n0 - m1 / n1
        variance = n0 * n1 * mean_gap * mean_gap / (total * total)
    variance[~np.isfinite(variance)] = 0.0
    return variance


def otsu_threshold(img: np.ndarray) -> int:
    """Threshold maximizing between-class variance; ties go to the smallest"""
    as_gray_image(img)
    lo, hi = int(img.min()), int(img.max())
    if lo == hi:
        raise ConstantImage(f"all pixels equal {lo}")
    hist = np.bincount(img.ravel(), minlength=_levels(img))
    variance = between_class_variance(hist)
    # t = max level puts everything in class 0
    threshold = int(np.argmax(variance[:-1]))
    logger.debug("Otsu threshold %d (range %d..%d)", threshold, lo, hi)
    return threshold


def binarize(img: np.ndarray, threshold: int, polarity: str = BRIGHT_FG) -> np.ndarray:
    """Foreground mask: above threshold for bright_fg, at or below for dark_fg"""
    if polarity == BRIGHT_FG:
        return img > threshold
    if polarity == DARK_FG:
        return img <= threshold
    raise ValueError(f"unknown polarity {polarity!r}, expected one of {POLARITIES}")


def largest_foreground_bbox(img: np.ndarray, threshold: int, polarity: str = BRIGHT_FG) -> BBox:
    """Tight box around the largest 8-connected foreground component"""
    mask = binarize(as_gray_image(img), threshold, polarity).astype(np.uint8)
    n_labels, _, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=CONNECTIVITY)
    if n_labels <= 1:
        raise NoForeground(f"no {polarity} pixels at threshold {threshold}")
    areas = stats[1:, cv2.CC_STAT_AREA]
    best = 1 + int(np.argmax(areas))
    left = int(stats[best, cv2.CC_STAT_LEFT])
    top = int(stats[best, cv2.CC_STAT_TOP])
    width = int(stats[best, cv2.CC_STAT_WIDTH])
    height = int(stats[best, cv2.CC_STAT_HEIGHT])
    logger.debug("Largest of %d components: %d px at (%d, %d) %dx%d",
                 n_labels - 1, int(areas[best - 1]), left, top, width, height)
    return BBox(left, top, left + width, top + height)


def crop_with_margin(img: np.ndarray, box: BBox, margin: int = 0) -> Tuple[np.ndarray, BBox]:
    """Sub-image of box grown by margin and clamped to the image.

    Returns the crop and the realized crop box in source coordinates; adding
    (crop_box.x1, crop_box.y1) to in-crop coordinates recovers the source.
    """
    height, width = as_gray_image(img).shape
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    if box.x1 < 0 or box.y1 < 0 or box.x2 > width or box.y2 > height:
        raise InvalidBox(f"box {box.as_list()} exceeds image {width}x{height}")
    x1 = max(0, math.floor(box.x1) - margin)
    y1 = max(0, math.floor(box.y1) - margin)
    x2 = min(width, math.ceil(box.x2) + margin)
    y2 = min(height, math.ceil(box.y2) + margin)
    return img[y1:y2, x1:x2].copy(), BBox(x1, y1, x2, y2)


@dataclass
class CropResult:
    image: np.ndarray
    crop_box: BBox
    foreground_box: BBox
    threshold: int


def crop_foreground(img: np.ndarray, polarity: str = BRIGHT_FG, margin: int = 0,
                    threshold: Optional[int] = None) -> CropResult:
    """Threshold (Otsu unless given), find the blade, crop it with margin"""
    if threshold is None:
        threshold = otsu_threshold(img)
    foreground = largest_foreground_bbox(img, threshold, polarity)
    crop, crop_box = crop_with_margin(img, foreground, margin)
    return CropResult(crop, crop_box, foreground, threshold)
