import os
from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        return default


class Config:
    LOG_LEVEL = os.getenv("TILEFORGE_LOG_LEVEL", "INFO").upper()
    # TILEFORGE_THREADS caps every internal thread pool
    THREADS = max(1, _env_int("TILEFORGE_THREADS", os.cpu_count() or 1))
    SEED = _env_int("TILEFORGE_SEED", 0)

    # --- Cropping ---
    CROP_MARGIN = 16
    CROP_POLARITY = "bright_fg"

    # --- Tiling (5x5 grid of 500x600 tiles, upscaled 2x) ---
    TILE_W = 500
    TILE_H = 600
    GRID = (5, 5)
    TILE_SCALE = 2.0
    MIN_VISIBILITY = 0.25
    INTERPOLATION = "bilinear"

    # --- Dataset ---
    NEGATIVE_RATIO = 1.1
    FOLDS = 3
    VAL_FRACTION = 0.3
    REFERENCE_AREA = 32.0 * 32.0  # smallest default anchor
    HISTOGRAM_EDGES = tuple(i * 0.25 for i in range(17))  # 0.0 .. 4.0

    # --- Anchors ---
    ANCHOR_SIZES = (32.0, 64.0, 128.0, 256.0, 512.0)
    ANCHOR_RATIOS = (0.5, 1.0, 2.0)
    ANCHOR_SCALES = (1.0, 1.2, 1.6)
    R_BOUNDS = (1.0, 4.0)
    SCALE_BOUNDS = (0.3, 2.0)

    # --- Differential evolution ---
    DE_POPULATION_MULTIPLIER = 15
    DE_MUTATION = (0.5, 1.0)
    DE_RECOMBINATION = 0.7
    DE_MAX_GENERATIONS = 100
    DE_TOLERANCE = 0.01

    # --- Evaluation ---
    MATCH_IOU = 0.5
    SCORE_THRESHOLD = 0.5
    UNION_IOU_MIN = 0.2
    MERGE_THRESHOLD = 0.5
    MERGE_STRATEGY = "nmm"
    MERGE_METRIC = "ios"
    AP_INTERPOLATION = "all_points"


class TestConfig(Config):
    THREADS = 1
    DE_MAX_GENERATIONS = 40


config = {
    'default': Config,
    'test': TestConfig,
}


def get_config(name: str = None):
    """Pick a config class by name, falling back to TILEFORGE_ENV then default"""
    return config.get(name or os.getenv("TILEFORGE_ENV", "default"), Config)
