import math

import numpy as np
import pytest
from scipy.optimize import brentq, minimize, minimize_scalar
from scipy.special import gammaln

from capture_mse.estimators import lincoln_petersen, nhat_from_mixed_fit
from capture_mse.glm import fit_fixed, poisson_deviance
from capture_mse.glmm import (
    MixedFit, VarianceComponents, conditional_modes, fit_mixed, laplace_gradient,
    laplace_objective, penalized_gradient, predict_missing_mixed,
)
from capture_mse.simgen import PerturbationSpec, base_population, draw_sample, perturb, stream
from capture_mse.tables import (
    SUM_ZERO, ModelSpec, SpecificationError, StratifiedTable, independence_spec,
    mixed_dual_spec, mixed_triple_spec,
)

DUAL_X = np.array([[1.0, 1, 1], [1, 1, -1], [1, -1, 1]])    # intercept, A, B at 11, 10, 01
INTERCEPT_ONLY = ModelSpec(2, {"intercept", "A", "B"}, {"u0"}, SUM_ZERO)


def _table(seed, r=10, N=2000, variances=(0.0143, 0.0253, 0.0232)):
    pop = perturb(base_population(r, 0.8, 0.7), PerturbationSpec("Normal", variances),
                  stream(seed, 1))
    return draw_sample(pop, N, stream(seed, 2))


def _laplace_oracle(table, beta, sigma2):
    """Laplace approximation computed stratum by stratum with generic tools:
    BFGS for the mode and a finite-difference Hessian."""
    y = table.counts()
    D = np.asarray(sigma2, float)
    total = 0.0
    const = 0.0
    for yl in y:
        def negpen(u):
            eta = DUAL_X @ beta + DUAL_X @ u
            return -(yl @ eta - np.exp(eta).sum() - gammaln(yl + 1).sum()) + 0.5 * np.sum(u * u / D)
        u = minimize(negpen, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
        h = 1e-4
        H = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                e_i, e_j = np.eye(3)[i] * h, np.eye(3)[j] * h
                H[i, j] = (negpen(u + e_i + e_j) - negpen(u + e_i - e_j)
                           - negpen(u - e_i + e_j) + negpen(u - e_i - e_j)) / (4 * h * h)
        ll = -(negpen(u) - 0.5 * np.sum(u * u / D))
        # -2 [l(beta, u) - u'D^-1u / 2 - log det(H / 2 pi) / 2]
        spec_form = -2 * (ll - 0.5 * np.sum(u * u / D) - 0.5 * np.linalg.slogdet(H / (2 * np.pi))[1])
        # the normal prior's own normalising constant, missing from the form above
        total += spec_form + np.sum(np.log(2 * np.pi * D))
        # saturated log-likelihood, so the value reduces to a deviance
        const += 2 * np.sum(gammaln(yl + 1) - np.where(yl > 0, yl * np.log(np.maximum(yl, 1)) - yl, 0))
    return total - const


# ---------------------------------------------------------------------------
# conditional modes

def test_modes_vanish_with_tiny_variance():
    t = _table(0)
    beta = fit_fixed(t, independence_spec(SUM_ZERO)).coefficients - [math.log(10), 0, 0]
    u = conditional_modes(t, mixed_dual_spec(), beta, [1e-12] * 3)
    assert np.max(np.abs(u)) < 1e-4


def test_modes_zero_for_identical_strata():
    t = StratifiedTable.dual([(56, 24, 14)] * 4)
    beta = fit_fixed(StratifiedTable.dual([(56, 24, 14)]), independence_spec(SUM_ZERO)).coefficients
    for s2 in (1e-3, 0.5, 10.0):
        u = conditional_modes(t, mixed_dual_spec(), beta, [s2] * 3)
        assert np.max(np.abs(u)) < 1e-8


def test_random_intercept_two_strata_oracle():
    t = StratifiedTable.dual([(56, 24, 14), (28, 12, 7)])
    ba, bb = fit_fixed(t, independence_spec(SUM_ZERO)).coefficients[1:]
    base = DUAL_X[:, 1:] @ [ba, bb]
    y = t.counts()

    def mode_1d(yl, b0):
        # maximise sum(y eta - exp(eta)) - u^2 / 2 over scalar u, sigma2 = 1
        f = lambda u: -(yl @ (b0 + base + u) - np.exp(b0 + base + u).sum()) + 0.5 * u * u
        return minimize_scalar(f, bounds=(-5, 5), method="bounded",
                               options={"xatol": 1e-12}).x

    b0 = brentq(lambda b: mode_1d(y[0], b) + mode_1d(y[1], b), 0, 6, xtol=1e-14)
    u = conditional_modes(t, INTERCEPT_ONLY, [b0, ba, bb], [1.0])[:, 0]
    np.testing.assert_allclose(u, [mode_1d(y[0], b0), mode_1d(y[1], b0)], atol=1e-7)
    assert u[0] == pytest.approx(-u[1], abs=1e-7)
    half_gap = 0.5 * math.log(94 / 47)
    assert np.all(np.abs(u) < half_gap)


@pytest.mark.parametrize("seed", range(4))
def test_inner_stationarity(seed):
    t = _table(seed)
    rng = np.random.default_rng(seed)
    beta = np.array([math.log(200), 0.7, 0.4]) + rng.normal(0, 0.1, 3)
    sigma2 = rng.uniform(0.001, 0.5, 3)
    u = conditional_modes(t, mixed_dual_spec(), beta, sigma2)
    g = penalized_gradient(t, mixed_dual_spec(), beta, sigma2, u)
    assert np.max(np.abs(g)) < 1e-8


def test_monotone_shrinkage():
    t = _table(3, r=5, N=1500)
    beta = fit_fixed(t, independence_spec(SUM_ZERO)).coefficients - [math.log(5), 0, 0]
    grid = np.logspace(-6, 2, 6)
    for k in range(3):
        sizes = []
        for s2 in grid:
            sigma2 = [0.02, 0.02, 0.02]
            sigma2[k] = s2
            u = conditional_modes(t, mixed_dual_spec(), beta, sigma2)
            sizes.append(np.max(np.abs(u[:, k])))
        assert all(b >= a - 1e-12 for a, b in zip(sizes, sizes[1:])), sizes


# ---------------------------------------------------------------------------
# Laplace objective

def test_objective_reduces_to_glm_deviance():
    t = StratifiedTable.dual([(56, 24, 14)])
    beta = np.array([3.0, 0.6, 0.3])
    value = laplace_objective(t, mixed_dual_spec(), beta, [0.0, 0.0, 0.0])
    glm = poisson_deviance(t.counts().ravel(), np.exp(DUAL_X @ beta))
    assert abs(value - glm) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_objective_matches_independent_laplace(seed):
    t = _table(seed, r=6, N=1200)
    rng = np.random.default_rng(seed)
    beta = np.array([math.log(120), 0.7, 0.4]) + rng.normal(0, 0.05, 3)
    sigma2 = rng.uniform(0.005, 0.3, 3)
    ours = laplace_objective(t, mixed_dual_spec(), beta, sigma2)
    assert ours == pytest.approx(_laplace_oracle(t, beta, sigma2), abs=1e-4)


def test_objective_finite_after_doubling_counts():
    t = _table(1, r=5)
    fit = fit_mixed(t, mixed_dual_spec())
    doubled = StratifiedTable.dual([tuple(2 * c for c in s.observed) for s in t.strata])
    beta = fit.fixed_coefficients + [math.log(2), 0, 0]
    sigma2 = np.maximum(fit.variance.as_tuple(), 1e-4)
    assert math.isfinite(laplace_objective(doubled, mixed_dual_spec(), beta, sigma2))


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(7)
    spec = mixed_dual_spec()
    for i in range(20):
        t = _table(100 + i, r=int(rng.integers(3, 12)), N=int(rng.integers(500, 5000)))
        r = t.n_strata
        beta = np.array([math.log(t.counts().sum() / r / 3), 0.6, 0.3]) + rng.normal(0, 0.1, 3)
        log_sd = np.log(rng.uniform(0.03, 0.6, 3))
        g = laplace_gradient(t, spec, beta, log_sd)
        theta = np.concatenate([beta, log_sd])
        h = 1e-5

        def f(th):
            return laplace_objective(t, spec, th[:3], np.exp(2 * th[3:]))

        fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(6)])
        rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0)
        assert rel < 1e-4, (i, g, fd)


# ---------------------------------------------------------------------------
# fit_mixed

def test_zero_heterogeneity_recovery():
    t = _table(5, r=10, N=30000, variances=(0.0, 0.0, 0.0))
    fit = fit_mixed(t, mixed_dual_spec())
    assert max(fit.variance.as_tuple()) <= 0.01
    pooled_counts = t.counts().sum(axis=0)
    pooled = fit_fixed(StratifiedTable.dual([tuple(pooled_counts)]), independence_spec(SUM_ZERO))
    expected = pooled.coefficients - [math.log(t.n_strata), 0, 0]
    np.testing.assert_allclose(fit.fixed_coefficients, expected, atol=1e-2)


def test_single_stratum_rejected():
    with pytest.raises(SpecificationError):
        fit_mixed(StratifiedTable.dual([(56, 24, 14)]), mixed_dual_spec())


def test_all_zero_stratum_rejected():
    with pytest.raises(SpecificationError):
        fit_mixed(StratifiedTable.dual([(5, 4, 3), (0, 0, 0)]), mixed_dual_spec())


def test_fixed_only_spec_rejected():
    with pytest.raises(SpecificationError):
        fit_mixed(StratifiedTable.dual([(5, 4, 3), (2, 2, 2)]), independence_spec(SUM_ZERO))


def test_empty_stratum_allowed_on_request():
    t = StratifiedTable.dual([(5, 3, 2), (0, 0, 0), (6, 2, 2), (4, 3, 1)])
    fit = fit_mixed(t, mixed_dual_spec(), allow_empty_strata=True)
    assert np.all(np.isfinite(nhat_from_mixed_fit(fit, t, fit.spec).nhat))


@pytest.mark.parametrize("seed", range(3))
def test_fit_is_local_minimum(seed):
    t = _table(seed + 20, r=15, N=1500)
    spec = mixed_dual_spec()
    fit = fit_mixed(t, spec)
    sd = np.sqrt(fit.variance.as_tuple())
    best = laplace_objective(t, spec, fit.fixed_coefficients, sd ** 2)
    assert best == pytest.approx(fit.laplace_deviance, abs=1e-9)
    rng = np.random.default_rng(seed)
    for _ in range(32):
        beta = fit.fixed_coefficients + 1e-2 * rng.normal(size=3)
        sd_new = np.where(sd > 0, sd * np.exp(1e-2 * rng.normal(size=3)), 1e-2 * np.abs(rng.normal(size=3)))
        assert laplace_objective(t, spec, beta, sd_new ** 2) >= best - 1e-9


def test_random_intercept_modes_nearly_centred():
    # equal region sizes with heterogeneous inclusion only
    pop = perturb(base_population(20, 0.8, 0.7), PerturbationSpec("Normal", (0.05, 0.0, 0.0)),
                  stream(9, 1))
    t = draw_sample(pop, 20000, stream(9, 2))
    fit = fit_mixed(t, mixed_dual_spec())
    u0 = fit.modes("u0")
    assert abs(u0.sum()) < 0.05 * np.max(np.abs(u0))


def test_fitted_means_positive_and_serialisable():
    t = _table(2)
    fit = fit_mixed(t, mixed_dual_spec())
    d = fit.as_dict()
    assert set(d["variance"]) == {"u0", "u1", "u2"}
    assert all(v >= 0 for v in d["variance"].values())
    r = t.n_strata
    eta = np.einsum("mp,p->m", DUAL_X, fit.fixed_coefficients)[None, :] + fit.random_modes @ DUAL_X.T
    assert np.all(np.exp(eta) > 0)
    assert len(d["random_modes"]["u0"]) == r


def test_triple_mixed_predictions_finite():
    rng = np.random.default_rng(4)
    rows = rng.poisson([40, 20, 20, 20, 10, 10, 10], (6, 7))
    t = StratifiedTable.triple(rows)
    fit = fit_mixed(t, mixed_triple_spec())
    assert fit.random_modes.shape == (6, 7)
    preds = [predict_missing_mixed(fit, fit.spec, l) for l in range(6)]
    assert all(math.isfinite(p) and p >= 0 for p in preds)


# ---------------------------------------------------------------------------
# prediction of the missed cell

def _manual_fit(spec, beta, modes, labels):
    terms = tuple(spec.random_term_list)
    return MixedFit(spec, labels, ("intercept", "A", "B"), np.asarray(beta, float), terms,
                    np.asarray(modes, float), VarianceComponents({t: 0.0 for t in terms}),
                    0.0, True)


def test_prediction_without_random_part():
    beta = [2.0, 0.7, 0.4]
    fit = _manual_fit(mixed_dual_spec(), beta, np.zeros((3, 3)), ("a", "b", "c"))
    for l in range(3):
        assert predict_missing_mixed(fit, fit.spec, l) == pytest.approx(math.exp(2.0 - 0.7 - 0.4),
                                                                        rel=1e-14)


def test_prediction_symmetric_strata():
    t = StratifiedTable.dual([(56, 24, 14), (56, 24, 14)])
    fit = fit_mixed(t, mixed_dual_spec())
    a, b = (predict_missing_mixed(fit, fit.spec, l) for l in range(2))
    assert a == pytest.approx(b, rel=1e-9)


def test_prediction_uses_minus_one_contrasts():
    fit = _manual_fit(mixed_dual_spec(), [2.0, 0.7, 0.4], [[0.1, 0.2, 0.3], [0, 0, 0]], ("a", "b"))
    assert predict_missing_mixed(fit, fit.spec, 0) == pytest.approx(
        math.exp(2.0 + 0.1 - (0.7 + 0.2) - (0.4 + 0.3)), rel=1e-14)


def test_shrinkage_direction():
    t = _table(11, r=10, N=3000)
    fit = fit_mixed(t, mixed_dual_spec())
    pooled = lincoln_petersen(type(t.strata[0])(*t.counts().sum(axis=0)))
    share = t.stratum_totals() / t.stratum_totals().sum()
    between = 0
    for l, counts in enumerate(t.strata):
        local = lincoln_petersen(counts).mu00_hat
        # pooled missed-cell estimate allotted to the stratum by its observed share
        global_ = pooled.mu00_hat * share[l]
        pred = predict_missing_mixed(fit, fit.spec, l)
        lo, hi = sorted((local, global_))
        between += lo - 1e-9 <= pred <= hi + 1e-9
    assert between >= 8
