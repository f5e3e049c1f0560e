"""
File handoffs between pipeline stages.

Every write goes to a temporary file in the destination directory and is then
renamed over the target, so readers never see a half-written artifact.
"""
import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import cv2
import numpy as np

from . import __version__
from .errors import MalformedDocument

logger = logging.getLogger(__name__)

T = TypeVar("T")

GRAY_DTYPES = (np.uint8, np.uint16)


def image_key(path: str) -> str:
    """Identity of an image across stages: the file stem"""
    return Path(path).stem


def provenance(seed: Optional[int]) -> Dict[str, Any]:
    return {"tool_version": __version__, "seed": seed}


def child_seeds(seed: int, count: int) -> List[int]:
    """Independent per-item seeds spawned from one run seed"""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def atomic_write_bytes(path: str, data: bytes):
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, target)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_json(path: str, data: Dict[str, Any], seed: Optional[int] = None):
    """Save a JSON document stamped with tool version and seed"""
    payload = {**provenance(seed), **data}
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def load_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_document(path: str, parse: Callable[[Any], T]) -> T:
    """Load a JSON file and build objects from it; shape errors name the file"""
    try:
        data = load_json(path)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(path, f"invalid JSON: {exc}") from None
    try:
        return parse(data)
    except KeyError as exc:
        raise MalformedDocument(path, f"missing field {exc}") from None
    except (TypeError, ValueError, AttributeError) as exc:
        raise MalformedDocument(path, str(exc) or type(exc).__name__) from None


def write_csv(path: str, rows: Iterable[Sequence[Any]], seed: Optional[int] = None,
              header_comment: bool = True):
    """Write CSV rows, optionally led by '#' provenance lines"""
    buffer = io.StringIO()
    if header_comment:
        buffer.write(f"# tileforge {__version__}\n")
        buffer.write(f"# seed={seed}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    for row in rows:
        writer.writerow(["" if value is None else _format_cell(value) for value in row])
    atomic_write_text(path, buffer.getvalue())


def _format_cell(value: Any) -> str:
    if isinstance(value, float):
        # integral floats round-trip as ints, everything else keeps full precision
        return str(int(value)) if value.is_integer() else repr(value)
    return str(value)


def iter_csv_rows(path: str):
    """Yield (line_no, fields) skipping blank and '#' lines"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield line_no, next(csv.reader([stripped]))


def as_gray_image(pixels: np.ndarray) -> np.ndarray:
    """Validate a 2-D 8/16-bit grayscale array"""
    if pixels.ndim != 2 or pixels.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {pixels.shape}")
    if pixels.dtype not in GRAY_DTYPES:
        raise ValueError(f"expected uint8 or uint16 pixels, got {pixels.dtype}")
    return pixels


def read_gray_image(path: str) -> np.ndarray:
    """Read an 8/16-bit PNG or TIFF as a 2-D array, collapsing color to gray"""
    pixels = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if pixels is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if pixels.ndim == 3:
        code = cv2.COLOR_BGRA2GRAY if pixels.shape[2] == 4 else cv2.COLOR_BGR2GRAY
        pixels = cv2.cvtColor(pixels, code)
    return as_gray_image(pixels)


def write_png(path: str, pixels: np.ndarray):
    ok, encoded = cv2.imencode(".png", as_gray_image(pixels))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write_bytes(path, encoded.tobytes())


def list_images(paths: List[str]) -> List[str]:
    """Expand directories into their PNG/TIFF files, sorted"""
    found = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            found.extend(
                str(child) for child in sorted(path.iterdir())
                if child.suffix.lower() in (".png", ".tif", ".tiff")
            )
        else:
            found.append(str(path))
    logger.debug("Resolved %d image paths", len(found))
    return found
