"""
Rectangle arithmetic and anchor shapes.

Coordinates are continuous pixel positions: origin top-left, x to the right,
y down, pixel (i, j) spanning [i, i+1) x [j, j+1). Anchor ratios are
height / width, so a ratio of 0.5 is a wide shape.
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import InvalidAnchorConfig, InvalidBox


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive width and height"""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"box {coords} needs x1 < x2 and y1 < y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def intersection(self, other: "BBox") -> Optional["BBox"]:
        """Overlap rectangle, or None when the boxes share no area"""
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x1 >= x2 or y1 >= y2:
            return None
        return BBox(x1, y1, x2, y2)

    def hull(self, other: "BBox") -> "BBox":
        """Smallest box containing both"""
        return BBox(min(self.x1, other.x1), min(self.y1, other.y1),
                    max(self.x2, other.x2), max(self.y2, other.y2))

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scale(self, factor: float) -> "BBox":
        return BBox(self.x1 * factor, self.y1 * factor,
                    self.x2 * factor, self.y2 * factor)

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


def iou_pair(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when they only touch"""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    overlap = inter.area
    return overlap / (a.area + b.area - overlap)


def ios_pair(a: BBox, b: BBox) -> float:
    """Intersection over the smaller of the two areas"""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    return inter.area / min(a.area, b.area)


@dataclass(frozen=True)
class AnchorShape:
    width: float
    height: float

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class AnchorConfig:
    sizes: Tuple[float, ...]
    ratios: Tuple[float, ...]
    scales: Tuple[float, ...]

    def __post_init__(self):
        for name in ("sizes", "ratios", "scales"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise InvalidAnchorConfig(f"anchor {name} must not be empty")
            if not all(math.isfinite(v) and v > 0 for v in values):
                raise InvalidAnchorConfig(f"anchor {name} must be positive, got {values}")
            object.__setattr__(self, name, values)

    @property
    def shape_count(self) -> int:
        return len(self.sizes) * len(self.ratios) * len(self.scales)

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "sizes": list(self.sizes),
            "ratios": list(self.ratios),
            "scales": list(self.scales),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnchorConfig":
        try:
            return cls(tuple(data["sizes"]), tuple(data["ratios"]), tuple(data["scales"]))
        except KeyError as e:
            raise InvalidAnchorConfig(f"anchor config is missing {e.args[0]!r}") from e


DEFAULT_ANCHOR_CONFIG = AnchorConfig(Config.ANCHOR_SIZES, Config.ANCHOR_RATIOS, Config.ANCHOR_SCALES)


def anchor_shapes(cfg: AnchorConfig) -> List[AnchorShape]:
    """All anchor shapes, size-major, then ratio, then scale"""
    shapes = []
    for size in cfg.sizes:
        for ratio in cfg.ratios:
            root = math.sqrt(ratio)
            for scale in cfg.scales:
                side = size * scale
                shapes.append(AnchorShape(side / root, side * root))
    return shapes


def anchor_shape_array(cfg: AnchorConfig) -> np.ndarray:
    """(m, 2) array of anchor widths and heights, same order as anchor_shapes"""
    sizes = np.asarray(cfg.sizes, dtype=np.float64)[:, None, None]
    roots = np.sqrt(np.asarray(cfg.ratios, dtype=np.float64))[None, :, None]
    scales = np.asarray(cfg.scales, dtype=np.float64)[None, None, :]
    side = sizes * scales
    widths = (side / roots).reshape(-1)
    heights = (side * roots).reshape(-1)
    return np.stack([widths, heights], axis=1)


def centered_iou_matrix(box_sizes: np.ndarray, shapes: np.ndarray) -> np.ndarray:
    """IoU of every (w, h) box against every concentric anchor shape.

    box_sizes is (n, 2), shapes is (m, 2); result is (n, m).
    """
    bw, bh = box_sizes[:, 0:1], box_sizes[:, 1:2]
    aw, ah = shapes[None, :, 0], shapes[None, :, 1]
    inter = np.minimum(bw, aw) * np.minimum(bh, ah)
    return inter / (bw * bh + aw * ah - inter)


def centered_max_iou(box_w: float, box_h: float, cfg: AnchorConfig) -> float:
    """Best IoU between a box and any anchor shape placed on the same center"""
    if box_w <= 0 or box_h <= 0:
        raise InvalidBox(f"box size {box_w}x{box_h} must be positive")
    sizes = np.array([[box_w, box_h]], dtype=np.float64)
    return float(centered_iou_matrix(sizes, anchor_shape_array(cfg)).max())


def max_iou_per_box(box_sizes: Iterable[Tuple[float, float]], cfg: AnchorConfig) -> np.ndarray:
    sizes = np.asarray(list(box_sizes), dtype=np.float64).reshape(-1, 2)
    if sizes.size == 0:
        return np.zeros(0)
    return centered_iou_matrix(sizes, anchor_shape_array(cfg)).max(axis=1)
