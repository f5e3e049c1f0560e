"""
Overlapping tile plans and the coordinate transforms between source images
and (upscaled) tile space.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import cv2
import numpy as np

from .config import Config
from .errors import GridTooSparse, TileLargerThanImage, TileOutOfBounds
from .geometry import BBox
from .storage import as_gray_image, load_document

logger = logging.getLogger(__name__)

INTERPOLATIONS = {
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
}


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class GridCount:
    n_x: int
    n_y: int


@dataclass(frozen=True)
class Overlap:
    ov_x: int
    ov_y: int


TilingMode = Union[GridCount, Overlap]


@dataclass(frozen=True)
class TileSpec:
    source_id: str
    offset_x: int
    offset_y: int
    tile_w: int
    tile_h: int
    scale: float = Config.TILE_SCALE
    row: int = 0
    col: int = 0

    @property
    def name(self) -> str:
        return f"{self.source_id}_r{self.row}_c{self.col}"

    @property
    def rect(self) -> BBox:
        """Tile rectangle in source coordinates"""
        return BBox(self.offset_x, self.offset_y,
                    self.offset_x + self.tile_w, self.offset_y + self.tile_h)

    @property
    def output_size(self):
        return round_half_up(self.tile_w * self.scale), round_half_up(self.tile_h * self.scale)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "source_id": self.source_id,
            "row": self.row,
            "col": self.col,
            "offset_x": self.offset_x,
            "offset_y": self.offset_y,
            "tile_w": self.tile_w,
            "tile_h": self.tile_h,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TileSpec":
        return cls(
            source_id=data["source_id"],
            offset_x=int(data["offset_x"]),
            offset_y=int(data["offset_y"]),
            tile_w=int(data["tile_w"]),
            tile_h=int(data["tile_h"]),
            scale=float(data["scale"]),
            row=int(data.get("row", 0)),
            col=int(data.get("col", 0)),
        )


@dataclass
class TilePlan:
    source_w: int
    source_h: int
    n_x: int
    n_y: int
    tiles: List[TileSpec] = field(default_factory=list)
    source_path: Optional[str] = None

    def x_offsets(self) -> List[int]:
        return [t.offset_x for t in self.tiles[:self.n_x]]

    def y_offsets(self) -> List[int]:
        return [t.offset_y for t in self.tiles[::self.n_x]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source_path": self.source_path,
            "source_w": self.source_w,
            "source_h": self.source_h,
            "grid": [self.n_x, self.n_y],
            "tiles": [t.to_dict() for t in self.tiles],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TilePlan":
        n_x, n_y = data["grid"]
        return cls(
            source_w=int(data["source_w"]),
            source_h=int(data["source_h"]),
            n_x=int(n_x),
            n_y=int(n_y),
            tiles=[TileSpec.from_dict(t) for t in data["tiles"]],
            source_path=data.get("source_path"),
        )


def _plans_from(document: Dict[str, Any]) -> List[TilePlan]:
    return [TilePlan.from_dict(p) for p in document["plans"]]


def load_tile_plans(path: str) -> List[TilePlan]:
    """Plans from a plans.json written by the tile stage"""
    return load_document(path, _plans_from)


def grid_offsets(length: int, tile: int, count: int) -> List[int]:
    """Evenly spread offsets, round-half-up, mirrored about the axis center"""
    if count < 1:
        raise ValueError(f"tile count must be >= 1, got {count}")
    if count == 1:
        offsets = [0]
    else:
        span = length - tile
        offsets = [0] * count
        for i in range(count):
            mirror = count - 1 - i
            if i <= mirror:
                # round_half_up(i * span / (count - 1)) in integer arithmetic
                offsets[i] = (2 * i * span + count - 1) // (2 * (count - 1))
            else:
                offsets[i] = span - offsets[mirror]
    if offsets[-1] + tile < length or any(b - a > tile for a, b in zip(offsets, offsets[1:])):
        raise GridTooSparse(f"{count} tiles of {tile} px cannot cover {length} px")
    return offsets


def overlap_offsets(length: int, tile: int, overlap: int) -> List[int]:
    """Fixed stride tile - overlap, last tile clamped to the far edge"""
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, {tile}), got {overlap}")
    stride = tile - overlap
    count = math.ceil((length - tile) / stride) + 1
    offsets = [min(i * stride, length - tile) for i in range(count)]
    return offsets


def plan_tiles(src_w: int, src_h: int, tile_w: int, tile_h: int,
               mode: TilingMode = GridCount(*Config.GRID), source_id: str = "image",
               scale: float = Config.TILE_SCALE, source_path: Optional[str] = None) -> TilePlan:
    """Row-major overlapping tile layout covering the whole source image"""
    if tile_w <= 0 or tile_h <= 0:
        raise ValueError(f"tile size must be positive, got {tile_w}x{tile_h}")
    if tile_w > src_w or tile_h > src_h:
        raise TileLargerThanImage(f"tile {tile_w}x{tile_h} exceeds image {src_w}x{src_h}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")

    if isinstance(mode, GridCount):
        xs = grid_offsets(src_w, tile_w, mode.n_x)
        ys = grid_offsets(src_h, tile_h, mode.n_y)
    elif isinstance(mode, Overlap):
        xs = overlap_offsets(src_w, tile_w, mode.ov_x)
        ys = overlap_offsets(src_h, tile_h, mode.ov_y)
    else:
        raise TypeError(f"unsupported tiling mode {mode!r}")

    tiles = [
        TileSpec(source_id, ox, oy, tile_w, tile_h, scale, row=r, col=c)
        for r, oy in enumerate(ys)
        for c, ox in enumerate(xs)
    ]
    logger.debug("Planned %dx%d tiles over %dx%d for %s", len(xs), len(ys), src_w, src_h, source_id)
    return TilePlan(src_w, src_h, len(xs), len(ys), tiles, source_path)


def project_box_to_tile(box: BBox, tile: TileSpec,
                        min_visibility: float = Config.MIN_VISIBILITY) -> Optional[BBox]:
    """Clip to the tile, keep if enough of the box survives, move to tile space"""
    clipped = box.intersection(tile.rect)
    if clipped is None:
        return None
    if clipped.area / box.area < min_visibility:
        return None
    return clipped.translate(-tile.offset_x, -tile.offset_y).scale(tile.scale)


def project_annotations_to_tile(annots: List[BBox], tile: TileSpec,
                                min_visibility: float = Config.MIN_VISIBILITY) -> List[BBox]:
    projected = []
    for box in annots:
        local = project_box_to_tile(box, tile, min_visibility)
        if local is not None:
            projected.append(local)
    return projected


def crop_tile(img: np.ndarray, tile: TileSpec, interpolation: str = Config.INTERPOLATION) -> np.ndarray:
    """Cut the tile out of img and resize it by tile.scale"""
    height, width = as_gray_image(img).shape
    if (tile.offset_x < 0 or tile.offset_y < 0
            or tile.offset_x + tile.tile_w > width or tile.offset_y + tile.tile_h > height):
        raise TileOutOfBounds(f"tile {tile.name} does not fit image {width}x{height}")
    sub = img[tile.offset_y:tile.offset_y + tile.tile_h, tile.offset_x:tile.offset_x + tile.tile_w]
    if tile.scale == 1:
        return sub.copy()
    try:
        flag = INTERPOLATIONS[interpolation]
    except KeyError:
        raise ValueError(f"unknown interpolation {interpolation!r}") from None
    return cv2.resize(sub, tile.output_size, interpolation=flag)


def detection_to_source_coords(det_box: BBox, tile: TileSpec) -> BBox:
    """Inverse of the projection: undo the scale, then the tile offset"""
    return BBox(
        det_box.x1 / tile.scale + tile.offset_x,
        det_box.y1 / tile.scale + tile.offset_y,
        det_box.x2 / tile.scale + tile.offset_x,
        det_box.y2 / tile.scale + tile.offset_y,
    )
