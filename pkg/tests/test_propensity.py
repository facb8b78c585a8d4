import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from latentweights.data import ItemResponseMatrix, SurveySample
from latentweights.latent import LatentFit, TwoPLParams
from latentweights.propensity import (
    PHANTOM_ID, PropensityConfig, PropensityModel, SeparationError, adjust_sample,
    augment_phantom, detect_separation, estimate_thetas_stage1, fit_response_logistic, irls,
    item_response_prob_hat, unit_response_prob,
)

from conftest import simulate_2pl


def make_sample(rng, n=400, unit_rate=0.7):
    mat, theta = simulate_2pl(rng, n, [1.0, 0.5, 0.0, 1.2, 0.3], [1.0, 1.2, 1.5, 1.0, 1.1])
    resp = rng.random(n) < expit(0.7 + theta)
    x = mat.x.astype(bool) & resp[:, None]
    resp &= x.any(axis=1)
    y = np.where(x, rng.normal(size=x.shape), np.nan)
    return SurveySample(np.arange(n), np.full(n, n / 4000), y, resp, 4000)


def test_augment_phantom():
    mat = ItemResponseMatrix(np.ones((5, 4), dtype=int))
    aug = augment_phantom(mat)
    assert aug.x.shape == (6, 4)
    np.testing.assert_array_equal(aug.x[-1], 0)
    assert aug.x[-1].sum() == 0 and aug.unit_id[-1] == PHANTOM_ID
    with pytest.raises(ValueError):
        augment_phantom(aug)


def test_stage1_nonrespondents_share_phantom_score(rng):
    s = make_sample(rng)
    st = estimate_thetas_stage1(s)
    nr = ~s.unit_respondent
    assert nr.any()
    np.testing.assert_array_equal(st.theta[nr], st.phantom_theta)
    assert np.all(st.fit.params.beta1 > 0)
    assert st.phantom_theta <= st.theta[s.unit_respondent].min()


def test_stage1_full_response_scores_respondents(rng):
    s = make_sample(rng)
    r = s.unit_respondent
    full = SurveySample(s.unit_id[r], s.pi[r], s.y[r], r[r], s.N)
    st = estimate_thetas_stage1(full)
    assert st.theta.size == full.n
    np.testing.assert_allclose(st.theta, st.fit.theta[:-1])


def test_stage1_needs_respondents():
    y = np.full((4, 3), np.nan)
    s = SurveySample(np.arange(4), np.full(4, 0.5), y, np.zeros(4, bool), 8)
    with pytest.raises(ValueError):
        estimate_thetas_stage1(s)


def test_canonical_separation():
    theta = np.array([-2.0, -1.0, 1.0, 2.0])
    R = np.array([0, 0, 1, 1])
    X = np.column_stack([np.ones(4), theta])
    assert detect_separation(X, R)
    model = fit_response_logistic(theta, R, config=PropensityConfig(seed=3))
    assert model.separation_handled and np.all(np.isfinite(model.coef))
    firth = fit_response_logistic(theta, R, config=PropensityConfig(remedy="firth"))
    assert firth.separation_handled and np.all(np.isfinite(firth.coef))
    np.testing.assert_array_equal(firth.theta, theta)
    with pytest.raises(SeparationError):
        fit_response_logistic(theta, R, config=PropensityConfig(remedy="none"))


def test_overlap_is_not_separation(rng):
    theta = rng.standard_normal(200)
    R = rng.random(200) < 0.6
    assert not detect_separation(np.column_stack([np.ones(200), theta]), R)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        fit_response_logistic(np.arange(5.0), np.ones(5, bool))


def test_recovers_generator(rng):
    theta = rng.standard_normal(10_000)
    R = rng.random(10_000) < expit(0.7 + theta)
    model = fit_response_logistic(theta, R)
    assert not model.separation_handled
    assert abs(model.alpha0 - 0.7) < 0.15 and abs(model.alpha1 - 1.0) < 0.15


def test_null_generator_gives_flat_propensity(rng):
    theta = rng.standard_normal(5000)
    R = rng.random(5000) < 0.65
    model = fit_response_logistic(theta, R)
    assert np.all(np.abs(model.fitted - R.mean()) < 0.03)


def test_irls_matches_direct_optimizer(rng):
    X = np.column_stack([np.ones(500), rng.standard_normal((500, 2))])
    y = (rng.random(500) < expit(X @ [0.3, -0.8, 1.1])).astype(float)
    beta, ok, _ = irls(X, y)
    nll = lambda b: -np.sum(y * log_expit(X @ b) + (1 - y) * log_expit(-(X @ b)))
    ref = minimize(nll, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
    assert ok
    np.testing.assert_allclose(beta, ref, atol=1e-5)


def test_argmax_invariance_under_shift(rng):
    theta = rng.standard_normal(1000)
    R = rng.random(1000) < expit(0.5 + theta)
    cfg = PropensityConfig(remedy="none")
    a = fit_response_logistic(theta, R, config=cfg)
    b = fit_response_logistic(theta + 2.5, R, config=cfg)
    assert b.alpha0 == pytest.approx(a.alpha0 - a.alpha1 * 2.5, abs=1e-7)
    np.testing.assert_allclose(a.fitted, b.fitted, atol=1e-8)


def test_covariates_enter_the_model(rng):
    theta = rng.standard_normal(4000)
    z = rng.standard_normal(4000)
    R = rng.random(4000) < expit(0.2 + theta - 0.8 * z)
    model = fit_response_logistic(theta, R, covariates=z)
    assert model.gamma.shape == (1,) and abs(model.gamma[0] + 0.8) < 0.15
    p = unit_response_prob(model, theta[:3], z[:3])
    np.testing.assert_allclose(p, model.fitted[:3])


def test_unit_response_prob():
    m = PropensityModel(0.0, 1.0)
    assert unit_response_prob(m, 0.0) == 0.5
    vals = unit_response_prob(m, np.linspace(-3, 3, 20))
    assert np.all(np.diff(vals) > 0)
    floor = PropensityModel(np.log(1e-9), 0.0)
    assert unit_response_prob(floor, 0.0, p_min=0.01) == 0.01
    assert unit_response_prob(PropensityModel(60.0, 0.0), 0.0) < 1.0


def test_item_response_prob_hat():
    fit = LatentFit(TwoPLParams([0.0, 0, 0], [1.0, 1, 1]), np.array([0.0, 1.0]), 0.0, 0, True)
    assert item_response_prob_hat(fit, 0, 1) == 0.5
    assert item_response_prob_hat(fit, 1, 1) > item_response_prob_hat(fit, 0, 1)


def test_adjust_sample_gives_every_unit_positive_probabilities(rng):
    s = make_sample(rng)
    adj = adjust_sample(s, rng=np.random.default_rng(1))
    assert adj.p_hat.shape == (s.n,) and adj.q_hat.shape == (s.n, s.m)
    assert np.all(adj.p_hat >= 0.01) and np.all(adj.q_hat >= 0.01)
    assert np.all(adj.p_hat < 1) and np.all(np.isfinite(adj.theta))


def test_adjust_sample_degenerate_phases(rng):
    y = rng.normal(size=(30, 4))
    s = SurveySample(np.arange(30), np.full(30, 0.1), y, np.ones(30, bool), 300)
    adj = adjust_sample(s)
    np.testing.assert_array_equal(adj.p_hat, 1.0)
    np.testing.assert_array_equal(adj.q_hat, 1.0)
    assert adj.model is None and adj.stage1 is None
