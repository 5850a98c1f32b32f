import math

import numpy as np
import pytest
from hypothesis import given

from capture_mse.estimators import lincoln_petersen
from capture_mse.glm import (
    FitConvergenceError, check_rank, deviance, fit_fixed, irls, poisson_deviance, score,
)
from capture_mse.tables import (
    CORNER, SUM_ZERO, ModelSpec, SpecificationError, StratifiedTable,
    conditional_independence_spec, design_matrix, independence_spec, saturated_dual_spec,
    triple_maximal_spec,
)

from conftest import dual_tables, triple_tables


def _deviance_oracle(n, mu):
    # written out cell by cell, independently of the vectorised version
    total = 0.0
    for a, b in zip(n, mu):
        total += 2 * ((a * math.log(a / b) if a > 0 else 0.0) - (a - b))
    return total


def test_independence_single_stratum_gives_six():
    t = StratifiedTable.dual([(56, 24, 14)])
    fit = fit_fixed(t, independence_spec())
    assert math.exp(fit.coef("intercept")) == pytest.approx(6.0, rel=1e-10)
    assert fit.converged


def test_sum_zero_reproduces_counts():
    t = StratifiedTable.dual([(56, 24, 14)])
    fit = fit_fixed(t, independence_spec(SUM_ZERO))
    np.testing.assert_allclose(fit.fitted_means, [56, 24, 14], rtol=1e-10)


def test_two_equal_strata_zero_region_contrast():
    t = StratifiedTable.dual([(56, 24, 14), (56, 24, 14)])
    fit = fit_fixed(t, conditional_independence_spec())
    for name in ("R[2]", "AR[2]", "BR[2]"):
        assert abs(fit.coef(name)) < 1e-9
    assert math.exp(fit.coef("intercept")) == pytest.approx(6.0, rel=1e-10)


def test_deviance_examples():
    assert poisson_deviance([2], [1]) == pytest.approx(2 * (2 * math.log(2) - 1), abs=1e-12)
    assert poisson_deviance([2], [1]) == pytest.approx(0.7725887222397811, abs=1e-12)
    assert poisson_deviance([3, 0, 7], [3, 0, 7]) == 0.0
    t = StratifiedTable.dual([(5, 3, 2), (8, 1, 4)])
    fit = fit_fixed(t, conditional_independence_spec())
    assert deviance(t, fit) < 1e-8


@given(dual_tables(all_positive=True))
def test_deviance_matches_oracle(table):
    fit = fit_fixed(table, independence_spec())
    n = table.counts().ravel()
    assert deviance(table, fit) == pytest.approx(_deviance_oracle(n, fit.fitted_means),
                                                 rel=1e-9, abs=1e-9)
    assert deviance(table, fit) >= 0


@given(dual_tables(all_positive=True))
def test_score_equations(table):
    spec = independence_spec()
    fit = fit_fixed(table, spec)
    assert np.max(np.abs(score(design_matrix(spec, table), fit))) < 1e-6


@given(dual_tables(n11_positive=True))
def test_maximal_dual_matches_closed_form(table):
    fit = fit_fixed(table, conditional_independence_spec())
    assert np.all(fit.fitted_means > 0)
    for l, counts in enumerate(table.strata):
        eta = fit.coef("intercept") + (fit.coef(f"R[{l + 1}]") if l else 0.0)
        expected = lincoln_petersen(counts).mu00_hat
        if expected > 0:
            assert math.exp(eta) == pytest.approx(expected, rel=1e-6)


@given(dual_tables(all_positive=True, max_strata=4))
def test_parameterization_invariance(table):
    a = fit_fixed(table, independence_spec(CORNER)).fitted_means
    b = fit_fixed(table, independence_spec(SUM_ZERO)).fitted_means
    np.testing.assert_allclose(a, b, rtol=1e-8)
    a = fit_fixed(table, conditional_independence_spec(CORNER)).fitted_means
    b = fit_fixed(table, conditional_independence_spec(SUM_ZERO)).fitted_means
    np.testing.assert_allclose(a, b, rtol=1e-8)


@given(triple_tables())
def test_triple_maximal_reproduces_counts(table):
    fit = fit_fixed(table, triple_maximal_spec())
    np.testing.assert_allclose(fit.fitted_means, table.counts().ravel(), rtol=1e-8)


@given(dual_tables(max_strata=4))
def test_deviance_monotone(table):
    spec = independence_spec()
    d = design_matrix(spec, table)
    if table.counts().sum() == 0:
        return
    *_, trace = irls(d.matrix, d.counts)
    assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(trace, trace[1:]))


def test_zero_n11_fit_succeeds():
    t = StratifiedTable.dual([(10, 4, 3), (0, 5, 3)])
    fit = fit_fixed(t, conditional_independence_spec())
    assert fit.converged
    assert np.all(fit.fitted_means > 0)


def test_saturated_complete_reproduces():
    from capture_mse.tables import DualStratumCounts
    t = StratifiedTable((DualStratumCounts(56, 24, 14, 6.0), DualStratumCounts(30, 10, 9, 4.0)))
    fit = fit_fixed(t, saturated_dual_spec(), complete=True)
    np.testing.assert_allclose(fit.fitted_means, t.complete_counts().ravel(), rtol=1e-8)


def test_rank_deficient_rejected():
    with pytest.raises(SpecificationError):
        check_rank(np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]))
    # saturated dual model has 4 parameters for 3 observed cells
    t = StratifiedTable.dual([(5, 4, 3)])
    with pytest.raises(SpecificationError):
        fit_fixed(t, saturated_dual_spec(stratified=False))


def test_random_terms_rejected():
    spec = ModelSpec(2, {"intercept", "A", "B"}, {"u0"}, SUM_ZERO)
    with pytest.raises(SpecificationError):
        fit_fixed(StratifiedTable.dual([(5, 4, 3), (2, 2, 2)]), spec)


def test_iteration_cap_carries_last_iterate(monkeypatch):
    import capture_mse.glm as glm
    monkeypatch.setattr(glm, "MAX_ITER", 1)
    t = StratifiedTable.dual([(10, 4, 3), (0, 5, 3)])
    original = glm.irls
    monkeypatch.setattr(glm, "irls", lambda X, y: original(X, y, max_iter=1))
    with pytest.raises(FitConvergenceError) as err:
        glm.fit_fixed(t, conditional_independence_spec())
    assert err.value.fit is not None and err.value.fit.iterations == 1
