import math

import numpy as np
import pytest

from conftest import random_survival
from src.components.cox_engine import (
    SurvivalRecord,
    breslow_baseline,
    build_risk_index,
    fit_linear_cph,
    log_partial_likelihood,
    log_partial_likelihood_grad,
    predict_survival,
    stack_records,
)
from src.components.errors import ConfigurationError, InputError


def naive_log_partial_likelihood(scores, time, event) -> float:
    total = 0.0
    for i in range(len(time)):
        if not event[i]:
            continue
        denom = sum(math.exp(scores[j]) for j in range(len(time)) if time[j] >= time[i])
        total += scores[i] - math.log(denom)
    return total


def test_risk_index_order_and_groups():
    idx = build_risk_index(np.array([3.0, 1.0, 2.0]), np.ones(3, dtype=bool))
    assert list(idx.order) == [1, 2, 0]
    assert set(idx.risk_set(1)) == {0, 1, 2}

    tied = build_risk_index(np.full(4, 2.0), np.ones(4, dtype=bool))
    assert len(tied.tie_groups) == 1
    assert sorted(tied.tie_groups[0]) == [0, 1, 2, 3]


def test_risk_sets_match_set_comprehension(rng):
    time = np.array([1.0, 1.0, 2.0])
    event = np.array([True, False, True])
    idx = build_risk_index(time, event)
    assert list(idx.event_positions) == [0, 2]
    assert list(idx.risk_set(2)) == [2]
    for _ in range(20):
        time, event = random_survival(rng, 15, tie_levels=5)
        idx = build_risk_index(time, event)
        for i in range(15):
            assert set(idx.risk_set(i)) == {j for j in range(15) if time[j] >= time[i]}
        for group in idx.tie_groups:
            assert np.all(time[group] == time[group[0]])
        assert sorted(idx.order) == list(range(15))


def test_risk_index_rejects_bad_input():
    with pytest.raises(InputError):
        build_risk_index(np.array([]), np.array([]))
    with pytest.raises(InputError):
        build_risk_index(np.array([1.0, 0.0]), np.array([True, True]))


def test_record_validation():
    with pytest.raises(InputError):
        SurvivalRecord(np.array([0.1]), -1.0, True)
    with pytest.raises(InputError):
        SurvivalRecord(np.array([np.nan]), 1.0, True)
    X, time, event = stack_records([SurvivalRecord([0.1, 0.2], 2.0, 1), SurvivalRecord([0.3, 0.4], 1.0, 0)])
    assert X.shape == (2, 2) and list(time) == [2.0, 1.0] and list(event) == [True, False]


def test_log_partial_likelihood_examples():
    idx = build_risk_index(np.array([1.0, 2.0, 3.0]), np.ones(3, dtype=bool))
    assert log_partial_likelihood(np.zeros(3), idx) == pytest.approx(-math.log(6), abs=1e-12)
    single = build_risk_index(np.array([4.0]), np.array([True]))
    assert log_partial_likelihood(np.array([2.7]), single) == 0.0


def test_log_partial_likelihood_with_ties_matches_double_loop(rng):
    time = np.array([1.0, 2.0, 2.0, 3.0])
    event = np.array([True, True, True, False])
    scores = rng.normal(size=4)
    expected = naive_log_partial_likelihood(scores, time, event)
    assert log_partial_likelihood(scores, build_risk_index(time, event)) == pytest.approx(expected, abs=1e-12)


def test_log_partial_likelihood_matches_double_loop_random(rng):
    for _ in range(100):
        n = int(rng.integers(1, 51))
        time, event = random_survival(rng, n, tie_levels=int(rng.integers(0, 6)))
        scores = rng.normal(0, 1.5, n)
        expected = naive_log_partial_likelihood(scores, time, event)
        actual = log_partial_likelihood(scores, build_risk_index(time, event))
        assert actual == pytest.approx(expected, abs=1e-12 * max(1.0, abs(expected)) * 10)


def test_non_finite_scores_rejected():
    idx = build_risk_index(np.array([1.0, 2.0]), np.array([True, True]))
    with pytest.raises(InputError):
        log_partial_likelihood(np.array([0.0, np.inf]), idx)
    with pytest.raises(InputError):
        log_partial_likelihood(np.zeros(3), idx)


def test_translation_invariance_and_concavity(rng):
    for _ in range(50):
        time, event = random_survival(rng, 30, tie_levels=8)
        idx = build_risk_index(time, event)
        a, b = rng.normal(size=30), rng.normal(size=30)
        c = rng.uniform(-50, 50)
        assert log_partial_likelihood(a + c, idx) == pytest.approx(log_partial_likelihood(a, idx), abs=1e-9)
        mid = log_partial_likelihood((a + b) / 2, idx)
        assert mid >= 0.5 * (log_partial_likelihood(a, idx) + log_partial_likelihood(b, idx)) - 1e-12


def test_gradient_hand_example():
    idx = build_risk_index(np.array([1.0, 2.0]), np.array([True, False]))
    assert np.allclose(log_partial_likelihood_grad(np.zeros(2), idx), [0.5, -0.5], atol=1e-15)


def test_gradient_sums_to_zero(rng):
    for _ in range(100):
        time, event = random_survival(rng, 40, tie_levels=int(rng.integers(0, 10)))
        grad = log_partial_likelihood_grad(rng.normal(0, 2, 40), build_risk_index(time, event))
        assert abs(grad.sum()) < 1e-10


def test_gradient_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(50):
        n = int(rng.integers(2, 30))
        time, event = random_survival(rng, n, tie_levels=int(rng.integers(0, 5)))
        idx = build_risk_index(time, event)
        scores = rng.normal(size=n)
        grad = log_partial_likelihood_grad(scores, idx)
        numeric = np.empty(n)
        for j in range(n):
            step = np.zeros(n)
            step[j] = h
            numeric[j] = (log_partial_likelihood(scores + step, idx) - log_partial_likelihood(scores - step, idx)) / (2 * h)
        assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-7)


def test_breslow_baseline_examples():
    idx = build_risk_index(np.array([1.0, 2.0, 3.0]), np.ones(3, dtype=bool))
    base = breslow_baseline(np.zeros(3), idx)
    assert np.allclose(base.times, [1.0, 2.0, 3.0])
    assert np.allclose(base.cum_hazard, [1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2 + 1], atol=1e-12)

    halved = breslow_baseline(np.full(3, math.log(2)), idx)
    assert np.allclose(np.diff(halved.cum_hazard, prepend=0.0), np.diff(base.cum_hazard, prepend=0.0) / 2)

    tail = build_risk_index(np.array([1.0, 2.0, 5.0, 6.0]), np.array([True, True, False, False]))
    assert list(breslow_baseline(np.zeros(4), tail).times) == [1.0, 2.0]


def test_breslow_requires_events():
    idx = build_risk_index(np.array([1.0, 2.0]), np.array([False, False]))
    with pytest.raises(InputError):
        breslow_baseline(np.zeros(2), idx)


def test_predict_survival_examples():
    idx = build_risk_index(np.array([1.0, 2.0, 3.0]), np.ones(3, dtype=bool))
    base = breslow_baseline(np.zeros(3), idx)
    assert predict_survival(0.0, base, 0.5) == 1.0
    assert predict_survival(-50.0, base, 3.0) == pytest.approx(1.0, abs=1e-10)
    assert predict_survival(0.0, base, 2.0) == pytest.approx(math.exp(-(1 / 3 + 1 / 2)), abs=1e-12)
    with pytest.raises(InputError):
        predict_survival(0.0, base, -1.0)


def test_baseline_monotone_and_survival_in_unit_interval(rng):
    for _ in range(20):
        time, event = random_survival(rng, 50, tie_levels=int(rng.integers(0, 10)))
        scores = rng.normal(size=50)
        base = breslow_baseline(scores, build_risk_index(time, event))
        assert np.all(np.diff(base.cum_hazard) >= 0) and base.cum_hazard[0] >= 0
        grid = np.linspace(0, time.max() + 1, 200)
        surv = predict_survival(scores[0], base, grid)
        assert np.all((surv >= 0) & (surv <= 1))
        assert np.all(np.diff(surv) <= 0)


def test_fit_linear_cph_recovers_generator_slopes(linear_data):
    fit = fit_linear_cph(linear_data.raw_X, linear_data.time, linear_data.event)
    assert fit.converged
    assert np.allclose(fit.beta, [1.0, 2.0], atol=0.15)
    assert np.all(np.abs(fit.beta - [1.0, 2.0]) <= 3 * fit.standard_errors)


def test_fit_linear_cph_flags_separated_data():
    X = np.array([[3.0], [2.0], [1.0], [0.0]])
    fit = fit_linear_cph(X, np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4, dtype=bool))
    assert not fit.converged
    assert fit.beta[0] > 5.0
    assert np.isfinite(fit.log_likelihood)


def test_fit_linear_cph_errors(rng):
    X = rng.normal(size=(20, 1))
    time, event = random_survival(rng, 20)
    with pytest.raises(ConfigurationError):
        fit_linear_cph(np.hstack([X, X]), time, event)
    with pytest.raises(InputError):
        fit_linear_cph(X, time, np.zeros(20, dtype=bool))
