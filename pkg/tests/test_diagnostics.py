import warnings

import numpy as np
import pytest

from latentweights.data import ItemResponseMatrix
from latentweights.diagnostics import (
    ItemFitReport, UndefinedStatistic, cronbach_alpha, first_eigenvalue, infit_outfit,
    item_fit_report, margin_residuals, mean_squares, point_measure_correlation,
    residual_pca_first_eigenvalue,
)
from latentweights.latent import LatentFit, TwoPLParams, fit_2pl_em, gauss_hermite

from conftest import simulate_2pl

B0 = np.array([0.5, 0.0, -0.5, 1.0, 0.2, -0.3])
B1 = np.array([1.0, 1.2, 1.4, 1.1, 0.9, 1.3])


def truth_fit(theta):
    return LatentFit(TwoPLParams(B0, B1), theta, 0.0, 0, True, quad=gauss_hermite())


def test_alpha_duplicated_columns():
    col = np.array([0, 1, 1, 0, 1])
    assert cronbach_alpha(np.column_stack([col, col])) == pytest.approx(1.0)


def test_alpha_independent_columns(rng):
    x = (rng.random((10_000, 5)) < 0.5).astype(int)
    assert abs(cronbach_alpha(x)) < 0.05


def test_alpha_undefined():
    with pytest.raises(UndefinedStatistic):
        cronbach_alpha(np.ones((5, 3)))
    with pytest.raises(UndefinedStatistic):
        cronbach_alpha(np.ones((1, 3)))


def test_margin_residuals_at_truth(rng):
    mat, theta = simulate_2pl(rng, 20_000, B0, B1)
    fit = truth_fit(theta)
    two = margin_residuals(mat, fit, 2)
    assert len(two) == 15 * 4
    assert max(c.R for c in two) < 4
    three = margin_residuals(mat, fit, 3)
    assert len(three) == 20 * 8
    for cells in (two, three):
        assert all(c.R >= 0 for c in cells)
        tables = {}
        for c in cells:
            tables.setdefault(c.items, []).append(c)
        for t in tables.values():
            assert sum(c.expected for c in t) == pytest.approx(20_000, abs=1e-6)
            assert sum(c.observed for c in t) == 20_000


def test_margin_order_checked(rng):
    mat, theta = simulate_2pl(rng, 50, B0, B1)
    with pytest.raises(ValueError):
        margin_residuals(mat, truth_fit(theta), 4)


def test_infit_outfit_near_one_at_truth(rng):
    mat, theta = simulate_2pl(rng, 20_000, B0, B1)
    infit, outfit = infit_outfit(mat, truth_fit(theta))
    np.testing.assert_allclose(infit, 1.0, atol=0.1)
    np.testing.assert_allclose(outfit, 1.0, atol=0.1)


def test_outfit_underdispersed_when_data_follow_rounded_probs(rng):
    theta = rng.normal(0, 2, 2000)
    fit = truth_fit(theta)
    q = 1 / (1 + np.exp(-(B0 + B1 * theta[:, None])))
    _, outfit = infit_outfit(np.round(q).astype(int), fit)
    assert np.all(outfit < 1)


def test_infit_equals_outfit_with_equal_variances(rng):
    x = (rng.random((300, 4)) < 0.3).astype(float)
    q = np.full_like(x, 0.3)
    infit, outfit = mean_squares(x, q)
    np.testing.assert_allclose(infit, outfit, rtol=1e-12)


def test_clamping_warns():
    fit = LatentFit(TwoPLParams([50.0, 0, 0], [1.0, 1, 1]), np.zeros(4), 0.0, 0, True)
    with pytest.warns(UserWarning):
        infit, outfit = infit_outfit(np.ones((4, 3)), fit)
    assert np.all(np.isfinite(infit)) and np.all(outfit >= 0)


def test_point_measure_correlation(rng):
    theta = rng.standard_normal(10_000)
    up = (theta > np.median(theta)).astype(int)
    down = 1 - up
    noise = (rng.random(10_000) < 0.5).astype(int)
    r = point_measure_correlation(np.column_stack([up, noise, down]), theta)
    assert r[0] > 0.7
    assert abs(r[1]) < 0.05
    assert r[2] < 0
    report = ItemFitReport(np.ones(3), np.ones(3), r)
    assert 2 in report.flagged() and 0 not in report.flagged()


def test_point_measure_constant_column_undefined(rng):
    theta = rng.standard_normal(20)
    x = np.column_stack([np.ones(20), (theta > 0).astype(int), (theta > 1).astype(int)])
    with pytest.warns(UserWarning):
        r = point_measure_correlation(x, theta)
    assert np.isnan(r[0])
    assert 0 in ItemFitReport(np.ones(3), np.ones(3), r).flagged()


def test_first_eigenvalue_identity():
    z = np.array([[1, 1, 1], [-1, 1, -1], [1, -1, -1], [-1, -1, 1]], dtype=float)
    assert first_eigenvalue(z) == pytest.approx(1.0, abs=1e-12)


def test_pca_unidimensional(rng):
    mat, _ = simulate_2pl(rng, 2000, B0, B1)
    assert residual_pca_first_eigenvalue(mat, fit_2pl_em(mat)) < 2.0


def test_pca_two_factor(rng):
    hits = 0
    for _ in range(5):
        t1, t2 = rng.standard_normal(2000), rng.standard_normal(2000)
        eta = np.column_stack([4.0 * t1] * 3 + [4.0 * t2] * 3)
        x = (rng.random(eta.shape) < 1 / (1 + np.exp(-eta))).astype(int)
        mat = ItemResponseMatrix(x)
        hits += residual_pca_first_eigenvalue(mat, fit_2pl_em(mat)) >= 2.0
    assert hits >= 4


def test_pca_rank_warning(rng):
    with pytest.warns(UserWarning):
        first_eigenvalue(rng.standard_normal((3, 5)))


def test_diagnostics_are_pure(rng):
    mat, _ = simulate_2pl(rng, 500, B0, B1)
    fit = fit_2pl_em(mat)
    a = item_fit_report(mat, fit)
    b = item_fit_report(mat, fit)
    assert a.infit.tobytes() == b.infit.tobytes()
    assert a.outfit.tobytes() == b.outfit.tobytes()
    assert [c.R for c in a.margins] == [c.R for c in b.margins]
    assert np.all(a.infit >= 0) and np.all(np.abs(a.point_measure_corr) <= 1)
