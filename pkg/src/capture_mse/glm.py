"""Poisson loglinear models fitted by iteratively reweighted least squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tables import DesignMatrix, ModelSpec, SpecificationError, StratifiedTable, design_matrix

MAX_ITER = 100
ABS_TOL = 1e-10
REL_TOL = 1e-12
COND_LIMIT = 1e12


class FitConvergenceError(RuntimeError):
    """IRLS hit the iteration cap.  ``fit`` carries the last iterate."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


@dataclass(frozen=True)
class FixedFit:
    spec: ModelSpec
    columns: tuple[str, ...]
    coefficients: np.ndarray
    fitted_means: np.ndarray
    counts: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    deviance_trace: tuple[float, ...] = ()
    complete: bool = False

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.columns.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.columns, self.coefficients)}


def poisson_deviance(counts, means) -> float:
    """2 * sum(n log(n/mu) - (n - mu)), with the n log n term taken as 0 at n = 0.

    Written as n log1p(d) - mu d with d = (n - mu) / mu, so near-exact fits
    do not lose every digit to cancellation.
    """
    counts = np.asarray(counts, dtype=float)
    means = np.asarray(means, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = (counts - means) / means
        terms = np.where(counts > 0, counts * np.log1p(delta), 0.0) - (counts - means)
    return float(max(2.0 * terms.sum(), 0.0))


def deviance(table: StratifiedTable, fit: FixedFit) -> float:
    counts = table.complete_counts() if fit.complete else table.counts()
    counts = counts.ravel()
    if counts.shape != fit.fitted_means.shape:
        raise ValueError("fit does not match table dimensions")
    return poisson_deviance(counts, fit.fitted_means)


def check_rank(X: np.ndarray) -> None:
    n, p = X.shape
    if p == 0:
        raise SpecificationError("design matrix has no columns")
    if p > n:
        raise SpecificationError(f"{p} parameters but only {n} cells: design is rank deficient")
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > COND_LIMIT:
        raise SpecificationError(
            f"design matrix is rank deficient (condition number {s[0] / max(s[-1], 1e-300):.3g})")


def _wls(X, z, w):
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
    return beta


def irls(X: np.ndarray, y: np.ndarray, max_iter: int = MAX_ITER):
    """Maximise the Poisson log-likelihood of ``y`` under ``log mu = X beta``.

    Returns ``(beta, mu, deviance, converged, iterations, trace)``.  Step
    halving keeps the deviance sequence nonincreasing.
    """
    y = np.asarray(y, dtype=float)
    mu = y + 0.5
    eta = np.log(mu)
    beta = _wls(X, eta, mu)
    eta = X @ beta
    mu = np.exp(eta)
    dev = poisson_deviance(y, mu)
    trace = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = eta + (y - mu) / mu
        proposal = _wls(X, z, mu)
        step = proposal - beta
        for _ in range(30):
            new_beta = beta + step
            new_eta = X @ new_beta
            with np.errstate(over="ignore"):
                new_mu = np.exp(new_eta)
            new_dev = poisson_deviance(y, new_mu) if np.all(np.isfinite(new_mu)) else np.inf
            if new_dev <= dev + 1e-12 * max(1.0, dev):
                break
            step = step / 2
        else:
            new_beta, new_eta, new_mu, new_dev = beta, eta, mu, dev
        change = abs(dev - new_dev)
        beta, eta, mu, dev = new_beta, new_eta, new_mu, new_dev
        trace.append(dev)
        if change < ABS_TOL or change < REL_TOL * dev:
            converged = True
            break
    return beta, mu, dev, converged, it, tuple(trace)


def fit_design(design: DesignMatrix, spec: ModelSpec, complete: bool = False) -> FixedFit:
    check_rank(design.matrix)
    beta, mu, dev, converged, it, trace = irls(design.matrix, design.counts)
    fit = FixedFit(spec, design.columns, beta, mu, design.counts, dev, converged, it, trace, complete)
    if not converged:
        raise FitConvergenceError(f"IRLS did not converge in {MAX_ITER} iterations", fit)
    return fit


def fit_fixed(table: StratifiedTable, spec: ModelSpec, complete: bool = False) -> FixedFit:
    """Maximum-likelihood fit of a fixed-effects loglinear model.

    Zero cells stay in the likelihood; for a maximal model a zero ``n11``
    drives the stratum's parameters towards infinity, which the estimators
    detect from the counts and flag.
    """
    if spec.is_mixed:
        raise SpecificationError("fit_fixed called with random terms; use fit_mixed")
    return fit_design(design_matrix(spec, table, complete), spec, complete)


def score(design: DesignMatrix, fit: FixedFit) -> np.ndarray:
    """X^T (n - mu) at the fitted values."""
    return design.matrix.T @ (design.counts - fit.fitted_means)
