import numpy as np
import pytest

from latentweights.data import SurveySample
from latentweights.estimators import (
    build_weights, ht_estimator, naive_estimator, three_phase_estimator,
)
from latentweights.simulation import PopulationSpec, build_population, draw_sample, stream


def full_sample(y, N):
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    n = y.shape[0]
    return SurveySample(np.arange(n), np.full(n, n / N), y, np.ones(n, bool), N)


def test_build_weights():
    ws = build_weights([0.5], [0.5], [0.5])
    assert ws.w3[0] == 8.0 and ws.w2[0] == 4.0 and ws.w1[0] == 2.0
    ws = build_weights([0.2, 0.5], [1, 1], [1, 1])
    np.testing.assert_array_equal(ws.w3, ws.w1)
    with pytest.raises(ValueError):
        build_weights([0.5], [0.5], [0.0])
    with pytest.raises(ValueError):
        build_weights([0.5], [1.2], [0.5])


def test_ht_simple_cases():
    assert ht_estimator(full_sample(np.ones(10), 100), 0) == pytest.approx(100.0)
    s = SurveySample(np.array([3]), np.array([1 / 50]), np.array([[4.0]]),
                     np.array([True]), 50)
    assert ht_estimator(s, 0) == pytest.approx(200.0)


def test_ht_needs_full_item_response():
    y = np.array([[1.0], [np.nan]])
    s = SurveySample(np.arange(2), np.full(2, 0.5), y, np.array([True, True]), 4)
    with pytest.raises(ValueError):
        ht_estimator(s, 0)


def test_full_response_reductions(rng):
    s = full_sample(rng.normal(3, 1, 40), 400)
    ht = ht_estimator(s, 0)
    assert naive_estimator(s, 0) == pytest.approx(ht, rel=1e-12)
    assert three_phase_estimator(s, 0, np.ones(40), np.ones(40)) == pytest.approx(ht, rel=1e-12)


def test_naive_needs_respondents():
    y = np.full((3, 1), np.nan)
    s = SurveySample(np.arange(3), np.full(3, 0.5), y, np.zeros(3, bool), 6)
    with pytest.raises(ValueError):
        naive_estimator(s, 0)


def test_three_phase_rejects_zero_probability(rng):
    s = full_sample(rng.normal(size=5), 50)
    with pytest.raises(ValueError):
        three_phase_estimator(s, 0, np.zeros(5), np.ones(5))


def test_three_phase_ignores_missing_units():
    y = np.array([[2.0, 1.0], [np.nan, 1.0], [np.nan, np.nan]])
    s = SurveySample(np.arange(3), np.full(3, 0.5), y, np.array([True, True, False]), 6)
    p = np.array([0.5, 0.5, 1e-3])
    q = np.array([[0.25, 1.0], [1e-3, 0.5], [1e-3, 1e-3]])
    assert three_phase_estimator(s, 0, p, q) == pytest.approx(2.0 / (0.5 * 0.5 * 0.25))
    assert three_phase_estimator(s, 1, p, q) == pytest.approx(1 / 0.25 + 1 / 0.125)


def test_three_phase_unbiased_at_true_probabilities():
    pop = build_population(PopulationSpec(seed=11, item_draw="rescaled"))
    est = []
    for i in range(3000):
        s, idx = draw_sample(pop, 200, stream(5, 1, i))
        est.append(three_phase_estimator(s, pop.target, pop.p[idx], pop.q[idx]))
    est = np.array(est)
    se = est.std(ddof=1) / np.sqrt(est.size)
    assert abs(est.mean() - pop.total) < 3 * se
