"""
Domain errors raised by tileforge.

Everything derives from TileforgeError so the CLI can turn any of them into
a one-line diagnostic and exit code 1.
"""


class TileforgeError(Exception):
    """Base class for all tileforge errors"""


class InvalidBox(TileforgeError, ValueError):
    """Box with non-positive width/height or non-finite coordinates"""


class InvalidAnchorConfig(TileforgeError, ValueError):
    """Empty or non-positive anchor sizes, ratios or scales"""


class ConstantImage(TileforgeError, ValueError):
    """All pixels share one intensity, so no threshold separates anything"""


class NoForeground(TileforgeError, ValueError):
    """Binarization left zero foreground pixels"""


class TileLargerThanImage(TileforgeError, ValueError):
    """Requested tile does not fit in the source image"""


class TileOutOfBounds(TileforgeError, ValueError):
    """Tile rectangle reaches outside the image it is cut from"""


class GridTooSparse(TileforgeError, ValueError):
    """A fixed tile count cannot cover the source axis"""


class UnknownTile(TileforgeError, KeyError):
    """Detection references a tile that no plan describes"""


class MalformedLine(TileforgeError, ValueError):
    """Unparseable CSV line; carries the file and 1-based line number"""

    def __init__(self, path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{self.path}:{line_no}: {reason}")


class MalformedDocument(TileforgeError, ValueError):
    """JSON input whose structure does not match what the stage expects"""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class NoPositives(TileforgeError, ValueError):
    """Balancing needs at least one positive record"""


class TooFewGroups(TileforgeError, ValueError):
    """Fewer distinct groups than requested folds/splits"""


class EmptyGroundTruth(TileforgeError, ValueError):
    """Anchor objective evaluated against no boxes"""


class InvalidBounds(TileforgeError, ValueError):
    """Search bounds empty, inverted or outside the parameter domain"""


class NoDefinedClasses(TileforgeError, ValueError):
    """No class has a ground-truth instance, so mAP is undefined"""


class BothEmpty(TileforgeError, ValueError):
    """Union IoU of two empty box sets is undefined"""
