"""Poisson loglinear mixed models by Laplace-approximated maximum likelihood.

Random effects are nested in the stratifying variable and mutually
independent: one scalar per (random term, stratum) with variance
``sigma2[term]``.  Internally the effects are written ``u = sigma * v`` with
``v ~ N(0, I)`` so that a zero variance is an ordinary point of the
parameter space rather than a singularity.

Because every stratum owns its own cells and its own random effects, the
conditional-mode problem splits into independent small blocks (3x3 for two
lists, 7x7 for three), each solved by its own damped Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._kernels import laplace_deviance
from .glm import fit_fixed
from .tables import (
    SUM_ZERO, ModelSpec, SpecificationError, StratifiedTable, design_rows, random_design,
)

INNER_MAX_ITER = 50
INNER_TOL = 1e-10
ZERO_SD = 1e-6          # sd below this is reported as a zero variance
START_SD = 0.1
LOG_SD_FLOOR = -14.0     # flat below here, so the simplex contracts instead of drifting
GRAD_CHECK_TOL = 2e-3   # scaled-gradient tolerance for convergence warnings


class MixedFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class VarianceComponents:
    sigma2: dict

    def __post_init__(self):
        for name, value in self.sigma2.items():
            if not value >= 0:
                raise ValueError(f"variance {name} must be nonnegative, got {value}")

    def __getitem__(self, name):
        return self.sigma2[name]

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(self.sigma2[k] for k in sorted(self.sigma2))


@dataclass(frozen=True)
class MixedFit:
    spec: ModelSpec
    labels: tuple[str, ...]
    fixed_columns: tuple[str, ...]
    fixed_coefficients: np.ndarray
    random_terms: tuple[str, ...]
    random_modes: np.ndarray            # (strata, random terms)
    variance: VarianceComponents
    laplace_deviance: float
    converged: bool
    convergence_warnings: tuple[str, ...] = ()
    evaluations: int = 0
    log_sd: np.ndarray = field(default=None, repr=False)

    def coef(self, name: str) -> float:
        return float(self.fixed_coefficients[self.fixed_columns.index(name)])

    def modes(self, term: str) -> np.ndarray:
        return self.random_modes[:, self.random_terms.index(term)]

    def as_dict(self) -> dict:
        return {
            "fixed": {k: float(v) for k, v in zip(self.fixed_columns, self.fixed_coefficients)},
            "random_modes": {
                term: {lab: float(v) for lab, v in zip(self.labels, self.random_modes[:, k])}
                for k, term in enumerate(self.random_terms)
            },
            "variance": {k: float(v) for k, v in self.variance.sigma2.items()},
            "laplace_deviance": float(self.laplace_deviance),
            "converged": bool(self.converged),
            "warnings": list(self.convergence_warnings),
        }


class LaplaceProblem:
    """Arrays and warm-start state for one table/model pair.

    Shapes: ``y`` (strata, cells); ``X`` (strata, cells, p); ``Z`` (cells, q).
    """

    def __init__(self, table: StratifiedTable, spec: ModelSpec):
        if not spec.is_mixed:
            raise SpecificationError("mixed model needs at least one random term")
        if spec.parameterization != SUM_ZERO:
            raise SpecificationError("mixed models use the sum-zero parameterization")
        if spec.lists != table.lists:
            raise SpecificationError(f"model has {spec.lists} lists but the table has {table.lists}")
        self.table = table
        self.spec = spec
        self.y = table.counts()
        r, m = self.y.shape
        X, self.columns = design_rows(spec, r, table.cells, list(table.labels))
        self.X = X.reshape(r, m, -1)
        self.Z = random_design(spec, table.cells)
        self.terms = tuple(spec.random_term_list)
        self.p = self.X.shape[2]
        self.q = self.Z.shape[1]
        self.v = np.zeros((r, self.q))
        self.warnings: set[str] = set()

    # -- inner problem ---------------------------------------------------
    def modes(self, beta, sd):
        """Conditional modes in the spherical scale; returns (v, mu, H, value).

        ``value`` is the Laplace deviance at (beta, sd).
        """
        beta = np.ascontiguousarray(beta, dtype=float)
        sd = np.ascontiguousarray(sd, dtype=float)
        v = self.v.copy()
        value, status = laplace_deviance(self.y, self.X, self.Z, beta, sd, v,
                                         INNER_TOL, INNER_MAX_ITER)
        if status == 2:
            v = np.zeros_like(v)
            value, status = laplace_deviance(self.y, self.X, self.Z, beta, sd, v,
                                             INNER_TOL, INNER_MAX_ITER)
        if status == 1:
            self.warnings.add(f"conditional-mode iteration cap ({INNER_MAX_ITER}) reached")
        if status == 2:
            raise FloatingPointError("penalised likelihood has no finite, positive-definite mode")
        self.v = v
        A = self.Z * sd
        mu = np.exp(np.einsum("lmp,p->lm", self.X, beta) + v @ A.T)
        H = np.einsum("mq,lm,mk->lqk", A, mu, A) + np.eye(self.q)
        return v, mu, H, value

    def objective(self, beta, log_sd) -> float:
        """Laplace deviance: sum of Poisson deviance residuals + |v|^2 + log det H."""
        sd = np.exp(np.asarray(log_sd, dtype=float))
        v = self.v
        value, status = laplace_deviance(self.y, self.X, self.Z,
                                         np.ascontiguousarray(beta, dtype=float),
                                         np.ascontiguousarray(sd), v, INNER_TOL, INNER_MAX_ITER)
        if status == 2:
            self.v = np.zeros_like(v)
            value, status = laplace_deviance(self.y, self.X, self.Z,
                                             np.ascontiguousarray(beta, dtype=float),
                                             np.ascontiguousarray(sd), self.v,
                                             INNER_TOL, INNER_MAX_ITER)
            if status == 2:
                raise FloatingPointError("penalised likelihood has no finite, positive-definite mode")
        if status == 1:
            self.warnings.add(f"conditional-mode iteration cap ({INNER_MAX_ITER}) reached")
        return float(value)

    def gradient(self, beta, log_sd) -> np.ndarray:
        """Analytic gradient of :meth:`objective` in (beta, log sd)."""
        beta = np.asarray(beta, dtype=float)
        sd = np.exp(np.asarray(log_sd, dtype=float))
        v, mu, H, _ = self.modes(beta, sd)
        A = self.Z * sd
        Hinv = np.linalg.inv(H)
        resid = self.y - mu
        lev = np.einsum("mq,lqk,mk->lm", A, Hinv, A)
        wl = mu * lev

        # fixed effects
        AtWX = np.einsum("mq,lm,lmp->lqp", A, mu, self.X)
        dv_db = -np.einsum("lqk,lkp->lqp", Hinv, AtWX)
        deta_db = self.X + np.einsum("mq,lqp->lmp", A, dv_db)
        g_beta = -2.0 * np.einsum("lmp,lm->p", self.X, resid) + np.einsum("lm,lmp->p", wl, deta_db)

        # log standard deviations
        g_sd = np.zeros(self.q)
        ZtWA = np.einsum("mk,lm,mq->lkq", self.Z, mu, A)
        for k in range(self.q):
            P = self.Z[:, k][None, :] * (sd[k] * v[:, k])[:, None]          # (l, m)
            dg = -np.einsum("mq,lm,lm->lq", A, mu, P)
            dg[:, k] += sd[k] * (resid @ self.Z[:, k])
            dv = np.einsum("lqk,lk->lq", Hinv, dg)
            deta = P + dv @ A.T
            trace_a = 2.0 * sd[k] * np.einsum("lj,lj->", ZtWA[:, k, :], Hinv[:, :, k])
            g_sd[k] = -2.0 * (resid * P).sum() + trace_a + (wl * deta).sum()
        return np.concatenate([g_beta, g_sd])

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[: self.p], theta[self.p:]

    def fun(self, theta) -> float:
        beta, log_sd = self.split(theta)
        log_sd = np.maximum(log_sd, LOG_SD_FLOOR)
        try:
            return self.objective(beta, log_sd)
        except (FloatingPointError, np.linalg.LinAlgError):
            return np.inf


def _variances(terms, sd2) -> dict:
    return {t: (0.0 if np.sqrt(s) < ZERO_SD else float(s)) for t, s in zip(terms, sd2)}


def _as_log_sd(spec, sigma):
    terms = spec.random_term_list
    if isinstance(sigma, VarianceComponents):
        sigma = [sigma.sigma2[t] for t in terms]
    elif isinstance(sigma, dict):
        sigma = [sigma[t] for t in terms]
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (len(terms),):
        raise ValueError(f"expected {len(terms)} variances, got {sigma.shape}")
    if np.any(sigma < 0):
        raise ValueError("variances must be nonnegative")
    with np.errstate(divide="ignore"):
        return 0.5 * np.log(sigma)


def conditional_modes(table: StratifiedTable, spec: ModelSpec, beta, sigma) -> np.ndarray:
    """Predicted random effects u (strata, terms) maximising the penalised
    likelihood at fixed ``beta`` and variances ``sigma``."""
    problem = LaplaceProblem(table, spec)
    sd = np.exp(_as_log_sd(spec, sigma))
    v, *_ = problem.modes(np.asarray(beta, dtype=float), sd)
    return v * sd


def laplace_objective(table: StratifiedTable, spec: ModelSpec, beta, sigma) -> float:
    """-2 x Laplace log marginal likelihood, shifted by the saturated
    log-likelihood so that it reduces to the GLM deviance when every
    variance is zero."""
    problem = LaplaceProblem(table, spec)
    return problem.objective(np.asarray(beta, dtype=float), _as_log_sd(spec, sigma))


def laplace_gradient(table: StratifiedTable, spec: ModelSpec, beta, log_sd) -> np.ndarray:
    problem = LaplaceProblem(table, spec)
    return problem.gradient(np.asarray(beta, dtype=float), np.asarray(log_sd, dtype=float))


def penalized_gradient(table, spec, beta, sigma, u) -> np.ndarray:
    """Gradient in u of l(beta, u) - sum(u^2 / 2 sigma^2); for checking modes."""
    problem = LaplaceProblem(table, spec)
    sigma2 = np.exp(2 * _as_log_sd(spec, sigma))
    eta = np.einsum("lmp,p->lm", problem.X, np.asarray(beta, dtype=float)) + u @ problem.Z.T
    return (problem.y - np.exp(eta)) @ problem.Z - u / sigma2


def _check_table(table: StratifiedTable, allow_empty_strata: bool = False):
    if table.n_strata < 2:
        raise SpecificationError("random effects need at least two strata")
    totals = table.stratum_totals()
    if np.all(totals == 0):
        raise SpecificationError("every stratum has all-zero counts")
    if np.any(totals == 0) and not allow_empty_strata:
        empty = [lab for lab, t in zip(table.labels, totals) if t == 0]
        raise SpecificationError(f"strata with all-zero counts: {empty}")


def _nelder_mead(fun, x0, step, max_fev):
    n = len(x0)
    simplex = np.vstack([x0] + [x0 + step[i] * np.eye(n)[i] for i in range(n)])
    return minimize(fun, x0, method="Nelder-Mead",
                    options={"initial_simplex": simplex, "xatol": 1e-6, "fatol": 1e-9,
                             "maxfev": max_fev, "adaptive": n > 6})


def _gradient_check(problem: LaplaceProblem, theta) -> list[str]:
    """Scaled-gradient test at the optimum, skipping variances on the boundary."""
    beta, log_sd = problem.split(theta)
    free = np.concatenate([np.ones(problem.p, bool), np.exp(log_sd) > 1e-3])
    grad = problem.gradient(beta, log_sd)[free]
    idx = np.flatnonzero(free)
    hess = np.empty((len(idx), len(idx)))
    h = 1e-4
    for a, i in enumerate(idx):
        e = np.zeros(len(theta))
        e[i] = h
        gp = problem.gradient(*problem.split(theta + e))[free]
        gm = problem.gradient(*problem.split(theta - e))[free]
        hess[:, a] = (gp - gm) / (2 * h)
    hess = 0.5 * (hess + hess.T)
    try:
        np.linalg.cholesky(hess)
    except np.linalg.LinAlgError:
        return ["Hessian of the Laplace deviance is not positive definite at the optimum"]
    scaled = np.linalg.solve(hess, grad)
    worst = float(np.max(np.abs(scaled)))
    if worst > GRAD_CHECK_TOL:
        return [f"failed to converge: max|scaled gradient| = {worst:.3g} > {GRAD_CHECK_TOL}"]
    return []


def fit_mixed(table: StratifiedTable, spec: ModelSpec, max_fev: int | None = None,
              check: bool = True, allow_empty_strata: bool = False) -> MixedFit:
    """Fit a mixed loglinear model; returns a fit even when it carries warnings.

    Outer search is Nelder-Mead over (beta, log sd) started from the fixed
    fit of the same fixed part with every sd at 0.1, followed by one
    restart from a perturbed copy of the best point.

    A stratum whose observed cells are all zero is rejected unless
    ``allow_empty_strata``; when allowed, its prediction comes entirely from
    the shrunken random effects.
    """
    problem = LaplaceProblem(table, spec)
    _check_table(table, allow_empty_strata)
    fixed_spec = ModelSpec(spec.lists, spec.terms, (), SUM_ZERO)
    beta0 = fit_fixed(table, fixed_spec).coefficients
    theta0 = np.concatenate([beta0, np.full(problem.q, np.log(START_SD))])
    n = len(theta0)
    max_fev = max_fev or 400 * n
    step = np.concatenate([np.full(problem.p, 0.05), np.full(problem.q, 1.0)])

    res = _nelder_mead(problem.fun, theta0, step, max_fev)
    best_x, best_f, evals = res.x, res.fun, res.nfev
    converged = bool(res.success)
    restart = best_x + 0.5 * step * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    res2 = _nelder_mead(problem.fun, restart, 0.5 * step, max_fev)
    evals += res2.nfev
    if res2.fun < best_f:
        best_x, best_f, converged = res2.x, res2.fun, bool(res2.success)
    if not np.isfinite(best_f):
        raise MixedFitError("Laplace objective is not finite at any start")

    best_x = best_x.copy()
    best_x[problem.p:] = np.maximum(best_x[problem.p:], LOG_SD_FLOOR)
    warnings = set(problem.warnings)
    if not converged:
        warnings.add(f"outer search stopped at the evaluation limit ({max_fev})")
    if check:
        warnings.update(_gradient_check(problem, best_x))

    beta, log_sd = problem.split(best_x)
    sd = np.exp(log_sd)
    sd = np.where(sd < ZERO_SD, 0.0, sd)
    v, *_ = problem.modes(beta, sd)
    laplace = problem.objective(beta, np.log(np.maximum(sd, 1e-300)))
    return MixedFit(
        spec=spec,
        labels=table.labels,
        fixed_columns=problem.columns,
        fixed_coefficients=beta,
        random_terms=problem.terms,
        random_modes=v * sd,
        variance=VarianceComponents(_variances(problem.terms, sd ** 2)),
        laplace_deviance=laplace,
        converged=converged and not warnings,
        convergence_warnings=tuple(sorted(warnings)),
        evaluations=evals,
        log_sd=log_sd,
    )


def predict_missing_mixed(fit: MixedFit, spec: ModelSpec, stratum: int) -> float:
    """Predicted mean of the never-observed cell for one stratum (index)."""
    r = len(fit.labels)
    missing = (0,) * spec.lists
    x, _ = design_rows(spec, r, [missing], list(fit.labels))
    z = random_design(spec, [missing])[0]
    eta = x[stratum] @ fit.fixed_coefficients + z @ fit.random_modes[stratum]
    return float(np.exp(eta))
