"""
Robust aggregation of repeated runtime samples, and the experiment that
compares how stable each aggregation strategy is under resampling.
"""

# Standard
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Sequence, Union
import math

# Third Party
import numpy as np

# Local
from .log import log


class ContractViolation(ValueError):
    """Raised when samples or experiment parameters break the preconditions"""


class AggregateStrategy(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"
    MIN = "min"
    MAX = "max"
    TRIMMED_MEAN_20 = "trimmed_mean_20"


STRATEGIES = tuple(AggregateStrategy)

# Fraction trimmed from each end by trimmed_mean_20
TRIM_FRACTION = 0.1


def _validate(samples: Iterable[float]) -> np.ndarray:
    values = np.asarray(list(samples), dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ContractViolation("Samples must be a non-empty flat sequence")
    if not np.all(np.isfinite(values)):
        raise ContractViolation("Samples must all be finite")
    if np.any(values <= 0):
        raise ContractViolation("Samples must all be positive")
    return values


def aggregate(
    samples: Sequence[float],
    strategy: Union[str, AggregateStrategy] = AggregateStrategy.MEDIAN,
) -> float:
    """Collapse repeated measurements into one value"""
    values = np.sort(_validate(samples))
    strategy = AggregateStrategy(strategy)
    if strategy == AggregateStrategy.MEAN:
        return math.fsum(values) / values.size
    if strategy == AggregateStrategy.MEDIAN:
        return float(np.median(values))
    if strategy == AggregateStrategy.MIN:
        return float(values[0])
    if strategy == AggregateStrategy.MAX:
        return float(values[-1])
    cut = int(values.size * TRIM_FRACTION)
    kept = values[cut : values.size - cut]
    return math.fsum(kept) / kept.size


def _aggregate_rows(draws: np.ndarray, strategy: AggregateStrategy) -> np.ndarray:
    """Aggregate each row of a (reps, k) matrix of sorted draws"""
    if strategy == AggregateStrategy.MEAN:
        return draws.mean(axis=1)
    if strategy == AggregateStrategy.MEDIAN:
        return np.median(draws, axis=1)
    if strategy == AggregateStrategy.MIN:
        return draws[:, 0]
    if strategy == AggregateStrategy.MAX:
        return draws[:, -1]
    k = draws.shape[1]
    cut = int(k * TRIM_FRACTION)
    return draws[:, cut : k - cut].mean(axis=1)


@dataclass
class StabilityReport:
    spreads: Dict[str, float]
    sample_size: int
    repetitions: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "spreads": dict(self.spreads),
            "sample_size": self.sample_size,
            "repetitions": self.repetitions,
            "seed": self.seed,
        }


def evaluate_strategies(
    pool: Sequence[float],
    k: int = 10,
    reps: int = 10000,
    seed: int = 0,
    strategies: Iterable[Union[str, AggregateStrategy]] = STRATEGIES,
) -> StabilityReport:
    """Draw k samples without replacement reps times and measure, per
    strategy, the relative spread (std / mean) of the aggregates. Every
    strategy sees the same draws.
    """
    values = _validate(pool)
    if not 1 <= k <= values.size:
        raise ContractViolation(f"Need 1 <= k <= {values.size}, got k={k}")
    if reps < 2:
        raise ContractViolation(f"Need at least 2 repetitions, got {reps}")

    rng = np.random.default_rng(seed)
    draws = np.empty((reps, k))
    for rep in range(reps):
        draws[rep] = values[rng.choice(values.size, size=k, replace=False)]
    draws.sort(axis=1)

    spreads = {}
    for strategy in strategies:
        strategy = AggregateStrategy(strategy)
        aggregates = _aggregate_rows(draws, strategy)
        spreads[strategy.value] = float(np.std(aggregates) / np.mean(aggregates))
    log.debug("Strategy spreads for k=%d reps=%d: %s", k, reps, spreads)
    return StabilityReport(spreads, sample_size=k, repetitions=reps, seed=seed)


def synthetic_timing_pool(
    n: int = 100000, outlier_fraction: float = 0.02, seed: int = 0
) -> np.ndarray:
    """Right-skewed timings around 10 ms with a fraction of slow outliers"""
    rng = np.random.default_rng(seed)
    pool = 10.0 * rng.lognormal(mean=0.0, sigma=0.025, size=n)
    outliers = rng.random(n) < outlier_fraction
    pool[outliers] *= rng.uniform(1.5, 5.0, size=int(outliers.sum()))
    return pool


def load_samples(path: str) -> List[float]:
    """Read one value per line, skipping blanks"""
    with open(path, "r") as handle:
        return [float(line) for line in handle if line.strip()]
