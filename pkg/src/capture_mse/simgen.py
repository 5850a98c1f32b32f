"""Synthetic stratified populations and capture-recapture samples.

Populations are generated on the corner-point loglinear scale: per stratum
``log mu_00 = lambda + lambda^R``, ``log(mu_10 / mu_00) = lambda^A + lambda^AR``
and ``log(mu_01 / mu_00) = lambda^B + lambda^BR``, so the two lists are
independent within every stratum by construction.  Heterogeneity enters as
centred random numbers added to the three stratum-level parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .glmm import fit_mixed
from .tables import DualStratumCounts, SpecificationError, StratifiedTable, mixed_dual_spec

DEFAULT_SCALE = 10_000.0
REDRAW_CAP = 1_000
DEFAULT_VARIANCES = (0.0143, 0.0253, 0.0232)


class SimulationError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


class Distribution(str, Enum):
    NORMAL = "Normal"
    LOGNORMAL = "Lognormal"
    PARETO = "Pareto"


def stream(base_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a replicate key, e.g. (scenario, population, kind, sample).

    Uses numpy's SeedSequence hash over the key and a counter-based Philox
    bit generator, so streams do not depend on scheduling order.
    """
    seq = np.random.SeedSequence(entropy=int(base_seed) & (2**64 - 1),
                                 spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class PopulationTruth:
    """Region sizes ``sizes`` (r,) and cell probabilities ``probs`` (r, 4)
    ordered (11, 10, 01, 00) within each region."""

    sizes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(sizes), 4):
            raise ValueError("probs must have shape (regions, 4)")
        if np.any(sizes <= 0) or np.any(probs <= 0):
            raise ValueError("sizes and cell probabilities must be positive")
        if np.max(np.abs(probs.sum(axis=1) - 1)) > 1e-12:
            raise ValueError("cell probabilities must sum to 1 in every region")
        sizes.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "probs", probs)

    @property
    def n_regions(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> float:
        return float(self.sizes.sum())

    @property
    def pi_a(self) -> np.ndarray:
        return self.probs[:, 0] + self.probs[:, 1]

    @property
    def pi_b(self) -> np.ndarray:
        return self.probs[:, 0] + self.probs[:, 2]

    @property
    def shares(self) -> np.ndarray:
        return self.sizes / self.sizes.sum()

    def region_sizes(self, N: float) -> np.ndarray:
        """True (fractional) region sizes when the population total is N."""
        return N * self.shares

    def corner_parameters(self) -> np.ndarray:
        """(r, 3): log mu_00, log odds of list A, log odds of list B per region."""
        cells = self.sizes[:, None] * self.probs
        log00 = np.log(cells[:, 3])
        return np.column_stack([log00, np.log(cells[:, 1]) - log00, np.log(cells[:, 2]) - log00])


def _from_corner(params: np.ndarray) -> PopulationTruth:
    c0, a, b = params[:, 0], params[:, 1], params[:, 2]
    cells = np.exp(np.column_stack([c0 + a + b, c0 + a, c0 + b, c0]))
    sizes = cells.sum(axis=1)
    return PopulationTruth(sizes, cells / sizes[:, None])


def cell_probabilities(pi_a, pi_b) -> np.ndarray:
    pi_a = np.asarray(pi_a, dtype=float)
    pi_b = np.asarray(pi_b, dtype=float)
    return np.stack([pi_a * pi_b, pi_a * (1 - pi_b), (1 - pi_a) * pi_b,
                     (1 - pi_a) * (1 - pi_b)], axis=-1)


def base_population(r: int, pi_a: float, pi_b: float, scale: float = DEFAULT_SCALE) -> PopulationTruth:
    """Homogeneous regions of size scale / r with independent inclusion."""
    if not (0 < pi_a < 1 and 0 < pi_b < 1):
        raise SpecificationError("inclusion probabilities must lie strictly between 0 and 1")
    if r < 1:
        raise SpecificationError("at least one region is required")
    if not scale > 0:
        raise SpecificationError("scale must be positive")
    probs = np.tile(cell_probabilities(pi_a, pi_b), (r, 1))
    return PopulationTruth(np.full(r, scale / r), probs)


# ---------------------------------------------------------------------------
# perturbations

def moment_match_lognormal(sigma2: float) -> tuple[float, float]:
    """(mu_L, sigma2_L) of the lognormal with mean 1 and variance sigma2."""
    if not sigma2 > 0:
        raise SpecificationError("variance must be positive")
    s2 = math.log1p(sigma2)
    return -s2 / 2, s2


def moment_match_pareto(sigma2: float) -> tuple[float, float]:
    """(alpha, x_m) of the Pareto with mean 1 and variance sigma2."""
    if not sigma2 > 0:
        raise SpecificationError("variance must be positive")
    alpha = 1 + math.sqrt(1 + 1 / sigma2)
    return alpha, (alpha - 1) / alpha


def centred_draws(distribution: Distribution | str, sigma2: float, size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Mean-zero draws with variance sigma2 (skewed families shifted by -1)."""
    distribution = Distribution(distribution)
    if sigma2 == 0:
        return np.zeros(size)
    if distribution is Distribution.NORMAL:
        return rng.normal(0.0, math.sqrt(sigma2), size)
    if distribution is Distribution.LOGNORMAL:
        mu_l, s2_l = moment_match_lognormal(sigma2)
        return rng.lognormal(mu_l, math.sqrt(s2_l), size) - 1.0
    alpha, x_m = moment_match_pareto(sigma2)
    return x_m * (1.0 + rng.pareto(alpha, size)) - 1.0


@dataclass(frozen=True)
class PerturbationSpec:
    distribution: Distribution = Distribution.NORMAL
    variances: tuple[float, float, float] = DEFAULT_VARIANCES

    def __post_init__(self):
        object.__setattr__(self, "distribution", Distribution(self.distribution))
        variances = tuple(float(v) for v in self.variances)
        if len(variances) != 3 or any(not v >= 0 for v in variances):
            raise SpecificationError("three nonnegative variances are required")
        object.__setattr__(self, "variances", variances)


def perturb(pop: PopulationTruth, spec: PerturbationSpec, rng: np.random.Generator) -> PopulationTruth:
    """Add centred random numbers to the region, list-A-by-region and
    list-B-by-region corner-point parameters."""
    if not any(spec.variances):
        return pop
    params = pop.corner_parameters()
    for k, sigma2 in enumerate(spec.variances):
        if sigma2 > 0:
            params[:, k] += centred_draws(spec.distribution, sigma2, pop.n_regions, rng)
    return _from_corner(params)


# ---------------------------------------------------------------------------
# integer region sizes and sampling

def integerize(sizes, N: int, rng: np.random.Generator) -> np.ndarray:
    """Integer region sizes summing to N from fractional ones.

    Fractional parts are rounded up with probability equal to the fraction.
    With residuals ``d = rounded - true``, a shortfall is topped up by one
    multinomial draw with weights ``-d`` shifted to a minimum of zero (so
    regions rounded down the most gain first); an excess is removed by a
    multinomial draw with weights ``d`` shifted likewise (regions rounded up
    the most lose first), redrawn whenever a region would go negative.
    """
    sizes = np.asarray(sizes, dtype=float)
    N = int(N)
    if np.any(sizes < 0) or N < 0:
        raise ValueError("sizes and N must be nonnegative")
    floor = np.floor(sizes)
    frac = sizes - floor
    rounded = (floor + (rng.random(len(sizes)) < frac)).astype(np.int64)
    total = int(rounded.sum())
    if total == N:
        return rounded
    d = rounded - sizes
    if total < N:
        weights = -d
        weights = weights - weights.min()
        return rounded + rng.multinomial(N - total, _normalise(weights))
    pvals = _normalise(d - d.min())
    for _ in range(REDRAW_CAP):
        candidate = rounded - rng.multinomial(total - N, pvals)
        if np.all(candidate >= 0):
            return candidate
    raise SimulationError(f"could not remove {total - N} units without negative regions "
                          f"after {REDRAW_CAP} redraws")


def _normalise(weights: np.ndarray) -> np.ndarray:
    s = weights.sum()
    if s <= 0:
        return np.full(len(weights), 1.0 / len(weights))
    return weights / s


def sample_counts(region_sizes, probs, rng: np.random.Generator) -> np.ndarray:
    """(r, 4) multinomial cell counts with integer region sizes."""
    return rng.multinomial(np.asarray(region_sizes, dtype=np.int64), probs)


def table_from_cells(cells: np.ndarray) -> StratifiedTable:
    cells = np.asarray(cells)
    return StratifiedTable(tuple(DualStratumCounts(int(c[0]), int(c[1]), int(c[2]), float(c[3]))
                                 for c in cells))


def draw_sample(pop: PopulationTruth, N: int, rng: np.random.Generator) -> StratifiedTable:
    """Integerise region sizes to a total of N, then one multinomial per region."""
    region_sizes = integerize(pop.region_sizes(N), N, rng)
    return table_from_cells(sample_counts(region_sizes, pop.probs, rng))


def population_csv_rows(pop: PopulationTruth, table: StratifiedTable, N: float):
    """Rows for the audit CSV ``stratum,n11,n10,n01,n00_truth,Nl_truth,piA,piB``."""
    truth = pop.region_sizes(N)
    for lab, s, nl, pa, pb in zip(table.labels, table.strata, truth, pop.pi_a, pop.pi_b):
        yield (lab, s.n11, s.n10, s.n01, s.n00_truth, float(nl), float(pa), float(pb))


POPULATION_CSV_HEADER = ("stratum", "n11", "n10", "n01", "n00_truth", "Nl_truth", "piA", "piB")


# ---------------------------------------------------------------------------
# variance calibration

@dataclass(frozen=True)
class CalibrationResult:
    sigma2: tuple[float, float, float]
    fits: int
    warning_free: int


def calibration_population(rng: np.random.Generator, n_regions: int = 30, N: int = 500):
    """Uniform inclusion probabilities and Poisson region sizes."""
    pi_a = rng.uniform(0.7, 0.9, n_regions)
    pi_b = rng.uniform(0.6, 0.8, n_regions)
    sizes = rng.poisson(N / n_regions, n_regions)
    return sizes, cell_probabilities(pi_a, pi_b)


def calibrate_variances(rng: np.random.Generator, replicates: int = 1000, n_regions: int = 30,
                        N: int = 500, min_fits: int = 50) -> CalibrationResult:
    """Mean estimated variance components over warning-free mixed fits."""
    sizes, probs = calibration_population(rng, n_regions, N)
    spec = mixed_dual_spec()
    collected = []
    fits = 0
    for _ in range(replicates):
        table = table_from_cells(sample_counts(sizes, probs, rng))
        try:
            fit = fit_mixed(table, spec)
        except SpecificationError:
            continue
        fits += 1
        if not fit.convergence_warnings:
            collected.append(fit.variance.as_tuple())
    if len(collected) < min_fits:
        raise CalibrationError(f"only {len(collected)} warning-free fits (need {min_fits})")
    mean = np.mean(collected, axis=0)
    return CalibrationResult(tuple(float(x) for x in mean), fits, len(collected))
