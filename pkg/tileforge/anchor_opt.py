"""
Differential-evolution search over anchor ratios and scales.

The decision vector is (r, s1, s2, s3): ratios become (1/r, 1, r), the three
scales are sorted, base sizes stay frozen. Fitness is the mean over ground
truth boxes of the best concentric IoU against any anchor shape.
"""
import logging
from abc import ABC, abstractmethod
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import EmptyGroundTruth, InvalidBounds
from .geometry import (DEFAULT_ANCHOR_CONFIG, AnchorConfig, anchor_shape_array,
                       centered_iou_matrix)

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]


def _gt_array(gt_sizes: Sequence[Tuple[float, float]]) -> np.ndarray:
    sizes = np.asarray(list(gt_sizes), dtype=np.float64).reshape(-1, 2)
    if sizes.shape[0] == 0:
        raise EmptyGroundTruth("anchor objective needs at least one ground-truth box")
    if not np.all(np.isfinite(sizes)) or np.any(sizes <= 0):
        raise ValueError("ground-truth widths and heights must be positive")
    return sizes


class AnchorObjective(ABC):
    """Scores an anchor configuration against a ground-truth box population"""

    def __init__(self, gt_sizes: Sequence[Tuple[float, float]]):
        self.gt_sizes = _gt_array(gt_sizes)

    def max_ious(self, cfg: AnchorConfig) -> np.ndarray:
        return centered_iou_matrix(self.gt_sizes, anchor_shape_array(cfg)).max(axis=1)

    @abstractmethod
    def score(self, cfg: AnchorConfig) -> float:
        """Higher is better"""
        pass

    def __call__(self, cfg: AnchorConfig) -> float:
        return self.score(cfg)


class MeanMaxIoUObjective(AnchorObjective):
    def score(self, cfg: AnchorConfig) -> float:
        return float(np.mean(self.max_ious(cfg)))


class ThresholdedIoUObjective(AnchorObjective):
    """Mean max-IoU minus a penalty for each box no anchor reaches threshold on"""

    def __init__(self, gt_sizes: Sequence[Tuple[float, float]], threshold: float = 0.5,
                 penalty: float = 1.0):
        super().__init__(gt_sizes)
        self.threshold = threshold
        self.penalty = penalty

    def score(self, cfg: AnchorConfig) -> float:
        ious = self.max_ious(cfg)
        return float(np.mean(ious) - self.penalty * np.mean(ious < self.threshold))


OBJECTIVES = {
    "mean": MeanMaxIoUObjective,
    "thresholded": ThresholdedIoUObjective,
}


def objective_mean_max_iou(gt_sizes: Sequence[Tuple[float, float]], cfg: AnchorConfig) -> float:
    return MeanMaxIoUObjective(gt_sizes).score(cfg)


def _check_interval(name: str, bounds: Interval, floor: float, inclusive: bool):
    low, high = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(low) and np.isfinite(high)) or low >= high:
        raise InvalidBounds(f"{name} bounds {bounds} need low < high")
    if (low < floor) if inclusive else (low <= floor):
        raise InvalidBounds(f"{name} bounds {bounds} must start {'at or above' if inclusive else 'above'} {floor}")


@dataclass(frozen=True)
class SearchSpace:
    r_bounds: Interval = Config.R_BOUNDS
    scale_bounds: Interval = Config.SCALE_BOUNDS
    sizes: Tuple[float, ...] = Config.ANCHOR_SIZES

    def __post_init__(self):
        _check_interval("ratio", self.r_bounds, 1.0, inclusive=True)
        _check_interval("scale", self.scale_bounds, 0.0, inclusive=False)
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise InvalidBounds(f"anchor sizes {self.sizes} must be positive")

    def bounds(self) -> np.ndarray:
        return np.array([self.r_bounds] + [self.scale_bounds] * 3, dtype=np.float64)

    def to_config(self, vector: Sequence[float]) -> AnchorConfig:
        r, *scales = (float(v) for v in vector)
        return AnchorConfig(tuple(self.sizes), (1.0 / r, 1.0, r), tuple(sorted(scales)))

    def encode(self, cfg: AnchorConfig) -> Optional[np.ndarray]:
        """Decision vector for cfg, or None when cfg is not representable here"""
        if tuple(cfg.sizes) != tuple(self.sizes) or len(cfg.ratios) != 3 or len(cfg.scales) != 3:
            return None
        low_ratio, mid, r = sorted(cfg.ratios)
        if not (np.isclose(mid, 1.0) and np.isclose(low_ratio * r, 1.0)):
            return None
        vector = np.array([r, *sorted(cfg.scales)], dtype=np.float64)
        bounds = self.bounds()
        if np.any(vector < bounds[:, 0]) or np.any(vector > bounds[:, 1]):
            return None
        return vector


@dataclass(frozen=True)
class DEParams:
    population_multiplier: int = Config.DE_POPULATION_MULTIPLIER
    mutation: Interval = Config.DE_MUTATION
    recombination: float = Config.DE_RECOMBINATION
    max_generations: int = Config.DE_MAX_GENERATIONS
    tolerance: float = Config.DE_TOLERANCE
    seed: Optional[int] = None

    def population_size(self, dimensions: int) -> int:
        size = self.population_multiplier * dimensions
        if size < 4:
            raise ValueError(f"population of {size} is below the minimum of 4")
        return size

    def __post_init__(self):
        low, high = self.mutation
        if not 0 <= low <= high <= 2:
            raise ValueError(f"mutation range {self.mutation} must lie within [0, 2]")
        if not 0 <= self.recombination <= 1:
            raise ValueError(f"recombination {self.recombination} must lie within [0, 1]")
        if self.max_generations < 0:
            raise ValueError("max_generations must be non-negative")


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    history: List[float]
    generations: int
    converged: bool


def _evaluate(f: Callable[[np.ndarray], float], vectors: np.ndarray,
              executor: Optional[Executor]) -> np.ndarray:
    if executor is None:
        return np.array([f(v) for v in vectors], dtype=np.float64)
    # map keeps input order, so the reduction is identical to the serial one
    return np.array(list(executor.map(f, vectors)), dtype=np.float64)


def _converged(fitness: np.ndarray, tolerance: float) -> bool:
    return float(fitness.max() - fitness.min()) <= tolerance * abs(float(fitness.mean()))


def differential_evolution(f: Callable[[np.ndarray], float], bounds: np.ndarray,
                           params: DEParams = DEParams(),
                           init: Optional[Sequence[np.ndarray]] = None,
                           executor: Optional[Executor] = None) -> DEResult:
    """Maximize f over a box with DE/best/1/bin.

    F is redrawn from params.mutation every generation, one donor coordinate
    is always crossed over, out-of-bounds coordinates are resampled in bounds
    and selection is greedy. init vectors replace the first population rows.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or bounds.shape[0] == 0:
        raise InvalidBounds(f"bounds must be (D, 2), got shape {bounds.shape}")
    low, high = bounds[:, 0], bounds[:, 1]
    if not (np.all(np.isfinite(bounds)) and np.all(low < high)):
        raise InvalidBounds(f"bounds {bounds.tolist()} need finite low < high")

    dims = bounds.shape[0]
    size = params.population_size(dims)
    rng = np.random.default_rng(params.seed)

    population = rng.uniform(low, high, size=(size, dims))
    for i, vector in enumerate(init or []):
        if i >= size:
            break
        population[i] = np.clip(np.asarray(vector, dtype=np.float64), low, high)
    fitness = _evaluate(f, population, executor)
    best = int(np.argmax(fitness))
    history = [float(fitness[best])]

    generation = 0
    converged = _converged(fitness, params.tolerance)
    while not converged and generation < params.max_generations:
        weight = rng.uniform(*params.mutation)
        trials = np.empty_like(population)
        for i in range(size):
            others = [j for j in range(size) if j != i]
            a, b = rng.choice(others, size=2, replace=False)
            donor = population[best] + weight * (population[a] - population[b])
            cross = rng.random(dims) < params.recombination
            cross[rng.integers(dims)] = True
            trial = np.where(cross, donor, population[i])
            outside = (trial < low) | (trial > high)
            if outside.any():
                trial[outside] = rng.uniform(low[outside], high[outside])
            trials[i] = trial

        trial_fitness = _evaluate(f, trials, executor)
        improved = trial_fitness >= fitness
        population[improved] = trials[improved]
        fitness[improved] = trial_fitness[improved]
        best = int(np.argmax(fitness))
        history.append(float(fitness[best]))
        generation += 1
        converged = _converged(fitness, params.tolerance)
        logger.debug("Generation %d: best %.6f", generation, history[-1])

    return DEResult(population[best].copy(), float(fitness[best]), history, generation, converged)


@dataclass
class OptimizationResult:
    config: AnchorConfig
    fitness: float
    history: List[float]
    below_half: int
    baseline_fitness: float
    baseline_below_half: int
    generations: int
    converged: bool
    objective: str = "mean"
    extras: Dict[str, Any] = field(default_factory=dict)

    def report(self) -> Dict[str, Any]:
        return {
            "objective": self.objective,
            "fitness": self.fitness,
            "baseline_fitness": self.baseline_fitness,
            "history": self.history,
            "generations": self.generations,
            "converged": self.converged,
            "below_half": self.below_half,
            "baseline_below_half": self.baseline_below_half,
            "anchors": self.config.to_dict(),
            **self.extras,
        }


def optimize_anchors(gt_sizes: Sequence[Tuple[float, float]], space: SearchSpace = SearchSpace(),
                     params: DEParams = DEParams(), base: AnchorConfig = DEFAULT_ANCHOR_CONFIG,
                     objective: str = "mean", executor: Optional[Executor] = None) -> OptimizationResult:
    """Search ratios and scales for the ground-truth boxes, seeded with base"""
    try:
        scorer = OBJECTIVES[objective](gt_sizes)
    except KeyError:
        raise ValueError(f"unknown objective {objective!r}, expected one of {sorted(OBJECTIVES)}") from None
    mean_iou = MeanMaxIoUObjective(scorer.gt_sizes)

    def fitness(vector: np.ndarray) -> float:
        return scorer(space.to_config(vector))

    seeded = space.encode(base)
    if seeded is None:
        logger.warning("Base anchor config is outside the search space, not seeding it")
    baseline = scorer(base)
    logger.info("Optimizing anchors for %d boxes; baseline fitness %.4f",
                len(scorer.gt_sizes), baseline)

    result = differential_evolution(fitness, space.bounds(), params,
                                    init=[seeded] if seeded is not None else None,
                                    executor=executor)
    best = space.to_config(result.x)
    logger.info("Best fitness %.4f after %d generations (converged=%s)",
                result.fun, result.generations, result.converged)
    return OptimizationResult(
        config=best,
        fitness=result.fun,
        history=result.history,
        below_half=int(np.sum(mean_iou.max_ious(best) < 0.5)),
        baseline_fitness=baseline,
        baseline_below_half=int(np.sum(mean_iou.max_ious(base) < 0.5)),
        generations=result.generations,
        converged=result.converged,
        objective=objective,
    )
