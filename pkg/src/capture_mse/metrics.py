"""Scenario summaries over a populations x samples x strata grid of estimates.

Infinite estimates are excluded from every moment and counted separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ReplicateGrid:
    """``estimates`` has shape (P, S, r); ``truths`` (P, r)."""

    estimates: np.ndarray
    truths: np.ndarray

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=float)
        truths = np.asarray(self.truths, dtype=float)
        if est.ndim != 3:
            raise MetricError("estimates must be a (populations, samples, strata) array")
        if truths.shape != (est.shape[0], est.shape[2]):
            raise MetricError(f"truths must have shape {(est.shape[0], est.shape[2])}")
        object.__setattr__(self, "estimates", est)
        object.__setattr__(self, "truths", truths)

    @property
    def shape(self):
        return self.estimates.shape

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.estimates)

    @property
    def infinite_count(self) -> int:
        return int((~self.finite).sum())

    def errors(self) -> np.ndarray:
        """Finite N_hat - N values, flattened."""
        diff = self.estimates - self.truths[:, None, :]
        return diff[self.finite]


@dataclass(frozen=True)
class MetricsSummary:
    method: str
    marb_percent: float
    cv_percent: float
    mse: float
    infinite_count: int

    @property
    def label(self) -> str:
        """'inf' when any replicate was infinite (the tabulated convention)."""
        return "inf" if self.infinite_count else f"{self.marb_percent:.3f}"


def _require_finite(grid: ReplicateGrid):
    if not grid.finite.any():
        raise MetricError("every replicate estimate is infinite")


def marb(grid: ReplicateGrid) -> float:
    """Mean absolute relative bias in percent over finite replicates."""
    _require_finite(grid)
    rel = np.abs(grid.estimates - grid.truths[:, None, :]) / grid.truths[:, None, :]
    return float(rel[grid.finite].mean() * 100)


def mse(grid: ReplicateGrid) -> float:
    _require_finite(grid)
    return float(np.mean(grid.errors() ** 2))


def anova_vca(grid: ReplicateGrid, stratum: int) -> tuple[float, float]:
    """Balanced one-way random-effects ANOVA of one stratum's estimates.

    Groups are populations, replicates within a group are samples.  Returns
    (between-population variance, within-population variance) with the
    between component truncated at zero.
    """
    y = grid.estimates[:, :, stratum]
    P, S = y.shape
    if P < 2 or S < 2:
        raise MetricError("variance components need at least 2 populations and 2 samples")
    if not np.all(np.isfinite(y)):
        raise MetricError("unbalanced grid: infinite estimates present")
    group_means = y.mean(axis=1)
    grand = group_means.mean()
    ms_within = ((y - group_means[:, None]) ** 2).sum() / (P * (S - 1))
    ms_between = S * ((group_means - grand) ** 2).sum() / (P - 1)
    return max(0.0, (ms_between - ms_within) / S), float(ms_within)


def cv(grid: ReplicateGrid) -> float:
    """Within-population (sampling) coefficient of variation in percent,
    averaged over strata; infinite if any replicate is infinite."""
    if grid.infinite_count:
        return math.inf
    values = []
    for l in range(grid.shape[2]):
        _, within = anova_vca(grid, l)
        values.append(math.sqrt(within) / grid.estimates[:, :, l].mean() * 100)
    return float(np.mean(values))


def summarize(method: str, grid: ReplicateGrid) -> MetricsSummary:
    return MetricsSummary(method, marb(grid), cv(grid), mse(grid), grid.infinite_count)
