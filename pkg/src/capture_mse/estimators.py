"""Population-size estimators: closed forms and loglinear-model based.

An estimate of the missed cell is either a nonnegative float or
``math.inf``.  Closed forms that have no information at all (a zero
denominator *and* a zero numerator) are also reported as infinite, with
``degenerate=True``, so that a silent zero cannot bias a total downwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .glm import FixedFit
from .glmm import MixedFit, predict_missing_mixed
from .tables import (
    CORNER, DualStratumCounts, ModelSpec, SpecificationError, StratifiedTable,
    TripleStratumCounts, design_rows,
)


class Method(str, Enum):
    LP = "LP"
    CHAPMAN = "Chapman"
    FIXED_MODEL = "FixedModel"
    MIXED_MODEL = "MixedModel"
    FIENBERG_TRIPLE = "FienbergTriple"
    FIXED_TRIPLE_MODEL = "FixedTripleModel"
    MIXED_TRIPLE_MODEL = "MixedTripleModel"


@dataclass(frozen=True)
class StratumEstimate:
    mu00_hat: float
    nhat: float
    method: Method
    degenerate: bool = False

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.nhat)


@dataclass(frozen=True)
class PopulationEstimate:
    per_stratum: tuple[StratumEstimate, ...]
    labels: tuple[str, ...]
    method: Method

    @property
    def nhat_total(self) -> float:
        total = 0.0
        for est in self.per_stratum:
            total += est.nhat
        return total

    @property
    def is_infinite(self) -> bool:
        return any(e.is_infinite for e in self.per_stratum)

    @property
    def nhat(self) -> np.ndarray:
        return np.array([e.nhat for e in self.per_stratum])


def _estimate(observed: int, mu: float, method: Method, degenerate: bool = False) -> StratumEstimate:
    return StratumEstimate(mu, observed + mu, method, degenerate)


def _ratio(numerator: int, denominator: int) -> tuple[float, bool]:
    """(estimate, degenerate) for a product-ratio closed form."""
    if denominator > 0:
        return numerator / denominator, False
    return math.inf, numerator == 0


def lincoln_petersen(counts: DualStratumCounts) -> StratumEstimate:
    mu, degenerate = _ratio(counts.n10 * counts.n01, counts.n11)
    return _estimate(counts.total, mu, Method.LP, degenerate)


def chapman(counts: DualStratumCounts) -> StratumEstimate:
    mu = counts.n10 * counts.n01 / (counts.n11 + 1)
    return _estimate(counts.total, mu, Method.CHAPMAN)


def fienberg_triple(counts: TripleStratumCounts) -> StratumEstimate:
    c = counts
    mu, degenerate = _ratio(c.n111 * c.n001 * c.n100 * c.n010, c.n101 * c.n011 * c.n110)
    return _estimate(c.total, mu, Method.FIENBERG_TRIPLE, degenerate)


_CLOSED_FORMS = {
    Method.LP: lincoln_petersen,
    Method.CHAPMAN: chapman,
    Method.FIENBERG_TRIPLE: fienberg_triple,
}


def stratified_estimate(table: StratifiedTable, method: Method | str) -> PopulationEstimate:
    """Apply a closed-form estimator to every stratum and sum."""
    method = Method(method)
    if method not in _CLOSED_FORMS:
        raise ValueError(f"{method.value} is not a closed-form estimator")
    if (method is Method.FIENBERG_TRIPLE) != (table.lists == 3):
        raise SpecificationError(f"{method.value} does not apply to a {table.lists}-list table")
    fn = _CLOSED_FORMS[method]
    return PopulationEstimate(tuple(fn(s) for s in table.strata), table.labels, method)


def _missing_cell_closed_form(counts) -> tuple[float, bool]:
    if isinstance(counts, DualStratumCounts):
        est = lincoln_petersen(counts)
    else:
        est = fienberg_triple(counts)
    return est.mu00_hat, est.degenerate


def nhat_from_fixed_fit(fit: FixedFit, table: StratifiedTable, spec: ModelSpec) -> PopulationEstimate:
    """Missed cell from corner-point parameters: exp(intercept + stratum effect).

    Where the maximum-likelihood estimate does not exist (a zero count in a
    denominator cell) the stratum is flagged infinite; where it sits on the
    boundary (zero numerator) it is exactly zero.
    """
    if spec.parameterization != CORNER or fit.spec.parameterization != CORNER:
        raise SpecificationError("population estimates from a fixed fit need corner-point coding")
    missing = (0,) * spec.lists
    rows, columns = design_rows(spec, table.n_strata, [missing], list(table.labels))
    if tuple(columns) != tuple(fit.columns):
        raise SpecificationError("fit does not match the model specification")
    method = Method.FIXED_MODEL if spec.lists == 2 else Method.FIXED_TRIPLE_MODEL
    out = []
    for l, counts in enumerate(table.strata):
        closed, degenerate = _missing_cell_closed_form(counts)
        if math.isinf(closed) or closed == 0.0:
            mu = closed
        else:
            mu = float(np.exp(rows[l] @ fit.coefficients))
        out.append(_estimate(counts.total, mu, method, degenerate))
    return PopulationEstimate(tuple(out), table.labels, method)


def nhat_from_mixed_fit(fit: MixedFit, table: StratifiedTable, spec: ModelSpec) -> PopulationEstimate:
    """Observed counts plus the shrinkage prediction of the missed cell."""
    method = Method.MIXED_MODEL if spec.lists == 2 else Method.MIXED_TRIPLE_MODEL
    out = tuple(_estimate(counts.total, predict_missing_mixed(fit, spec, l), method)
                for l, counts in enumerate(table.strata))
    return PopulationEstimate(out, table.labels, method)


def with_n11_plus_one(counts: DualStratumCounts) -> DualStratumCounts:
    return replace(counts, n11=counts.n11 + 1)
