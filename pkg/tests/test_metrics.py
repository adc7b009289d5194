import numpy as np
import pytest

from conftest import random_survival
from src.components.errors import InputError, UndefinedMetricError
from src.components.metrics import (
    Horizon,
    brier_score,
    c_index,
    censoring_km,
    horizon_metrics,
    kaplan_meier,
    percentile_horizons,
)


def pairwise_c_index(times, events, scores, horizon=np.inf, weighting="event_weighted"):
    times, events, scores = np.asarray(times, float), np.asarray(events, bool), np.asarray(scores, float)
    comparable = (times[:, None] < times[None, :]) & events[:, None] & (times[:, None] <= horizon)
    weight = comparable * ((1.0 + events[None, :]) if weighting == "event_weighted" else 1.0)
    higher = scores[:, None] > scores[None, :]
    tied = scores[:, None] == scores[None, :]
    return float(np.sum(weight * higher) + 0.5 * np.sum(weight * tied)) / float(np.sum(weight))


# Kaplan-Meier


def test_kaplan_meier_hand_example():
    km = kaplan_meier([1.0, 2.0, 3.0], [1, 0, 1])
    assert km(np.array([1.0, 2.0, 3.0])) == pytest.approx([2 / 3, 2 / 3, 0.0])
    assert km(0.5) == 1.0
    assert km(2.5) == pytest.approx(2 / 3)
    assert km.left_limit(1.0) == 1.0


def test_kaplan_meier_without_events_is_one():
    km = kaplan_meier([1.0, 2.0, 5.0], [0, 0, 0])
    assert np.all(km(np.linspace(0.1, 10, 50)) == 1.0)


def test_kaplan_meier_all_events_is_empirical_survival():
    n = 6
    km = kaplan_meier(np.arange(1.0, n + 1), np.ones(n))
    assert km(np.arange(1.0, n + 1)) == pytest.approx((n - np.arange(1, n + 1)) / n)


def test_flipping_censoring_twice_gives_original_estimator(rng):
    times, events = random_survival(rng, 200, tie_levels=30)
    direct = kaplan_meier(times, events)
    twice = censoring_km(times, ~events.astype(bool))
    assert np.array_equal(direct.times, twice.times)
    assert np.array_equal(direct.surv, twice.surv)


def test_kaplan_meier_is_non_increasing(rng):
    times, events = random_survival(rng, 300, tie_levels=40)
    km = kaplan_meier(times, events)
    assert np.all(np.diff(km.surv) <= 0)
    assert np.all((km.surv >= 0) & (km.surv <= 1))


def test_kaplan_meier_rejects_empty_input():
    with pytest.raises(InputError):
        kaplan_meier([], [])


# C-index


def test_c_index_perfect_ranking():
    assert c_index([1, 2, 3], [1, 1, 1], [3, 2, 1], horizon=3.0) == 1.0


def test_c_index_reversed_ranking():
    assert c_index([1, 2, 3], [1, 1, 1], [1, 2, 3], horizon=3.0) == 0.0


def test_c_index_weighted_pairs_with_tie():
    assert c_index([1, 2, 3], [1, 1, 0], [2, 2, 1], horizon=3.0) == pytest.approx(0.75)


def test_c_index_unweighted_pairs_with_tie():
    assert c_index([1, 2, 3], [1, 1, 0], [2, 2, 1], weighting="harrell") == pytest.approx(2.5 / 3)


def test_c_index_matches_pair_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 501))
        times = rng.integers(1, 60, n).astype(float)
        events = rng.random(n) < 0.7
        events[0] = True
        times[0] = 1.0
        times[-1] = 100.0
        scores = rng.integers(0, 25, n).astype(float)
        horizon = float(rng.uniform(1.0, 100.0))
        weighting = "event_weighted" if rng.random() < 0.5 else "harrell"
        expected = pairwise_c_index(times, events, scores, horizon, weighting)
        assert c_index(times, events, scores, horizon, weighting) == expected


def test_c_index_anti_symmetric_without_ties(rng):
    times, events = random_survival(rng, 400)
    scores = rng.normal(size=400)
    assert c_index(times, events, scores) + c_index(times, events, -scores) == pytest.approx(1.0, abs=1e-12)


def test_c_index_invariant_to_increasing_transform(rng):
    times, events = random_survival(rng, 400, tie_levels=50)
    scores = rng.normal(size=400)
    assert c_index(times, events, scores) == c_index(times, events, 3.0 * np.exp(scores) + 1.0)


def test_c_index_of_random_scores_is_near_half():
    rng = np.random.default_rng(1000)
    times, events = random_survival(rng, 1000, censor_rate=0.2)
    assert 0.45 <= c_index(times, events, rng.normal(size=1000)) <= 0.55


def test_c_index_horizon_accepts_horizon_type():
    times, events, scores = [1, 2, 3, 4], [1, 1, 1, 0], [4, 1, 2, 3]
    assert c_index(times, events, scores, Horizon(1.5, "p25")) == c_index(times, events, scores, 1.5)


def test_c_index_without_comparable_pairs():
    with pytest.raises(UndefinedMetricError):
        c_index([1, 2, 3], [0, 0, 0], [1, 2, 3])
    with pytest.raises(UndefinedMetricError):
        c_index([2, 3, 4], [1, 1, 1], [1, 2, 3], horizon=1.0)


def test_c_index_input_errors():
    with pytest.raises(InputError):
        c_index([1, 2], [1, 1], [1.0])
    with pytest.raises(InputError):
        c_index([1, 2], [1, 1], [1.0, 2.0], weighting="uno")
    with pytest.raises(InputError):
        c_index([1, 2], [1, 1], [np.nan, 2.0])


# Brier score


def test_brier_perfect_prediction():
    times = np.array([3.0, 4.0, 5.0])
    events = np.ones(3)
    assert brier_score(times, events, np.ones(3), censoring_km(times, events), 2.0) == 0.0


def test_brier_constant_half():
    times = np.array([1.0, 2.0, 4.0, 5.0])
    events = np.ones(4)
    assert brier_score(times, events, np.full(4, 0.5), censoring_km(times, events), 3.0) == pytest.approx(0.25)


def test_brier_ipcw_hand_example():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.array([1, 0, 1, 0])
    surv = np.array([0.9, 0.8, 0.4, 0.3])
    # G = 1 before 2, 2/3 on [2, 4)
    expected = (0.81 / 1.0 + 0.0 + 0.36 / (2 / 3) + 0.49 / (2 / 3)) / 4
    assert brier_score(times, events, surv, censoring_km(times, events), 2.5) == pytest.approx(expected)
    assert expected == pytest.approx(0.52125)


def test_brier_constant_predictor_minimum_at_survival_fraction():
    rng = np.random.default_rng(5)
    times = rng.exponential(1.0, 1000) + 1e-6
    events = np.ones(1000)
    horizon = 0.7
    censor = censoring_km(times, events)
    levels = np.linspace(0.0, 1.0, 101)
    scores = [brier_score(times, events, np.full(1000, p), censor, horizon) for p in levels]
    surviving = np.mean(times > horizon)
    assert abs(levels[int(np.argmin(scores))] - surviving) <= 0.01


def test_brier_undefined_when_censoring_survival_is_zero():
    censor = censoring_km([1.0, 2.0], [1, 0])
    with pytest.raises(UndefinedMetricError):
        brier_score([3.0, 4.0], [0, 1], [0.5, 0.5], censor, 2.5)


# Horizons


def test_percentile_horizons_exact_quartiles():
    horizons = percentile_horizons([1, 2, 3, 4, 5])
    assert [h.t for h in horizons] == [2.0, 3.0, 4.0]
    assert [h.label for h in horizons] == ["p25", "p50", "p75"]


def test_percentile_horizons_single_time():
    assert [h.t for h in percentile_horizons([3.5])] == [3.5, 3.5, 3.5]


def test_percentile_horizons_uniform_sample():
    times = np.random.default_rng(11).uniform(0, 1, 10000)
    for h, q in zip(percentile_horizons(times), (0.25, 0.5, 0.75)):
        assert abs(h.t - q) <= 0.02


def test_horizon_rejects_non_positive_time():
    with pytest.raises(InputError):
        Horizon(0.0, "p25")
    with pytest.raises(InputError):
        percentile_horizons([])


def test_horizon_metrics_reports_undefined_cells():
    censor = censoring_km([1.0, 2.0, 3.0, 4.0, 5.0], np.ones(5))
    cells = horizon_metrics(
        [1.0, 2.0, 3.0],
        [0, 0, 0],
        [0.1, 0.2, 0.3],
        lambda t: np.full(3, 0.5),
        [Horizon(2.0, "p50")],
        censor,
    )
    assert [c["horizon_label"] for c in cells] == ["p50", "all"]
    assert cells[0]["c_index"] is None
    assert cells[0]["brier"] == pytest.approx(0.25 / 3)
    assert "reason" in cells[0]
    assert cells[1]["horizon_t"] is None
    assert cells[1]["brier"] is None


def test_horizon_metrics_fills_defined_cells():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.ones(4)
    cells = horizon_metrics(
        times,
        events,
        [4.0, 3.0, 2.0, 1.0],
        lambda t: (times > t).astype(float),
        percentile_horizons(times),
        censoring_km(times, events),
    )
    assert len(cells) == 4
    assert all(c["c_index"] == 1.0 for c in cells)
    assert all(c["brier"] == 0.0 for c in cells[:3])
    assert not any("reason" in c for c in cells)
