"""
Hawkes 过程：条件强度、状态递推、曝光计数、仿真
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from modules.hawkes import (
    NetworkModel, EventSequence, StageSchedule, ModelError, SingularShiftError, DomainError, ExplosionError,
    empirical_intensity, exposure_counts, intensity_at, make_rng, simulate, simulate_function, state_at,
)
from modules.ratesolver import PiecewiseExo


def _const(mu):
    return lambda t: mu


def test_intensity_without_excitation_is_exogenous():
    model = NetworkModel(np.zeros((2, 2)), 1.0, np.array([0.3, 0.7]), np.eye(2))
    events = EventSequence.from_records(10.0, 2, [(1.0, 0), (2.5, 1), (4.0, 0)])
    for t in (0.0, 3.0, 9.9):
        assert_allclose(intensity_at(model, events, _const(model.mu), t), model.mu)


def test_single_event_closed_form():
    model = NetworkModel(np.array([[0.5]]), 0.1, np.array([1.0]), np.eye(1), allow_unstable=True)
    events = EventSequence.from_records(10.0, 1, [(0.0, 0)])
    lam = intensity_at(model, events, _const(model.mu), 2.0)
    assert_allclose(lam, [1.0 + 0.5 * np.exp(-0.2)], rtol=1e-14)


def test_intensity_matches_direct_sum():
    A = np.array([[0.2, 0.1], [0.05, 0.3]])
    model = NetworkModel(A, 1.0, np.array([0.4, 0.2]), np.eye(2))
    records = [(0.5, 1), (1.2, 0), (2.0, 1)]
    events = EventSequence.from_records(5.0, 2, records)
    t = 3.1
    expected = model.mu.copy()
    for t_k, d_k in records:
        expected = expected + A[:, d_k] * np.exp(-model.omega * (t - t_k))
    assert_allclose(intensity_at(model, events, _const(model.mu), t), expected, rtol=1e-13)


def test_intensity_is_left_continuous():
    model = NetworkModel(np.array([[0.5]]), 1.0, np.array([1.0]), np.eye(1))
    events = EventSequence.from_records(5.0, 1, [(2.0, 0)])
    # 事件时刻本身不计入
    assert_allclose(intensity_at(model, events, _const(model.mu), 2.0), [1.0])


def test_intensity_outside_horizon():
    model = NetworkModel(np.zeros((1, 1)), 1.0, np.array([1.0]), np.eye(1))
    with pytest.raises(DomainError):
        intensity_at(model, EventSequence.empty(5.0, 1), _const(model.mu), 6.0)


def test_state_pure_decay(small_model):
    events = EventSequence.empty(10.0, 3)
    assert_array_equal(state_at(small_model, events, np.zeros(3), 0.0, 4.0), np.zeros(3))
    x = np.array([0.3, 0.1, 0.2])
    assert_allclose(state_at(small_model, events, x, 1.0, 3.5), x * np.exp(-0.1 * 2.5))


def test_state_matches_full_recomputation(small_model):
    events = EventSequence.from_records(10.0, 3, [(0.4, 0), (1.1, 2), (2.3, 1), (2.9, 0), (4.2, 2)])
    exo = _const(small_model.mu)
    x = np.zeros(3)
    t_prev = 0.0
    for t in (1.0, 3.0, 5.0, 7.5):
        x = state_at(small_model, events, x, t_prev, t)
        t_prev = t
        assert_allclose(x, intensity_at(small_model, events, exo, t) - small_model.mu, atol=1e-14)


def test_exposure_counts_identity():
    events = EventSequence.from_records(10.0, 3, [(1.0, 0), (2.0, 0), (3.0, 2), (4.0, 0)])
    assert_allclose(exposure_counts(events, np.eye(3), (0.0, 10.0)), [3.0, 0.0, 1.0])
    assert_allclose(exposure_counts(events, np.eye(3), (5.0, 5.0)), np.zeros(3))


def test_exposure_counts_dense_follow_matrix(rng):
    n = 4
    times = np.sort(rng.uniform(0.0, 8.0, size=25))
    users = rng.integers(0, n, size=25)
    events = EventSequence(8.0, n, times, users)
    B = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(B, 1.0)
    counts = np.array([np.sum((users == j) & (times >= 2.0) & (times < 6.0)) for j in range(n)])
    expected = np.array([sum(B[i, j] * counts[j] for j in range(n)) for i in range(n)])
    assert_allclose(exposure_counts(events, B, (2.0, 6.0)), expected)


def test_counts_include_events_at_horizon():
    events = EventSequence.from_records(4.0, 2, [(1.0, 0), (4.0, 1)])
    assert_allclose(events.counts(0.0, 4.0), [1.0, 1.0])
    assert_allclose(events.counts(0.0, 3.0), [1.0, 0.0])


def test_simultaneous_events_sorted_by_user():
    events = EventSequence.from_records(5.0, 3, [(2.0, 2), (1.0, 1), (2.0, 0)])
    assert_array_equal(events.users, [1, 0, 2])


def test_schedule_equal_partition():
    schedule = StageSchedule(4, 10.0)
    assert_allclose(schedule.tau, [0.0, 2.5, 5.0, 7.5, 10.0])
    assert schedule.tau[-1] == 10.0
    assert schedule.bounds(3) == (7.5, 10.0)
    with pytest.raises(DomainError):
        schedule.bounds(4)
    with pytest.raises(DomainError):
        StageSchedule(0, 1.0)


def test_model_validation():
    with pytest.raises(ModelError):
        NetworkModel(np.array([[-0.1]]), 1.0, np.array([1.0]), np.eye(1))
    with pytest.raises(ModelError):
        NetworkModel(np.zeros((2, 2)), 1.0, np.ones(2), np.zeros((2, 2)))
    with pytest.raises(ModelError):
        NetworkModel(np.array([[2.0]]), 1.0, np.array([1.0]), np.eye(1))
    unstable = NetworkModel(np.array([[2.0]]), 1.0, np.array([1.0]), np.eye(1), allow_unstable=True)
    assert unstable.stability_ratio == pytest.approx(2.0)


def test_singular_shift_rejected():
    with pytest.raises(SingularShiftError):
        NetworkModel(np.array([[0.5]]), 0.5, np.array([1.0]), np.eye(1), allow_unstable=True)


def test_rng_streams_are_reproducible():
    a = make_rng(7, 1, 2).random(5)
    b = make_rng(7, 1, 2).random(5)
    c = make_rng(7, 1, 3).random(5)
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_simulation_is_deterministic(small_model, schedule3):
    controls = np.full((3, 3), 0.1)
    e1 = simulate(small_model, controls, schedule3, seed=11, stream=(0, 1))
    e2 = simulate(small_model, controls, schedule3, seed=11, stream=(0, 1))
    assert_array_equal(e1.times, e2.times)
    assert_array_equal(e1.users, e2.users)


def test_simulation_respects_window(small_model, schedule3):
    events = simulate(small_model, np.full((3, 3), 2.0), schedule3, window=(2.0, 4.0), seed=3)
    assert len(events) > 0
    assert events.times.min() >= 2.0
    assert events.times.max() < 4.0


def test_unstable_simulation_rejected():
    model = NetworkModel(np.array([[2.0]]), 1.0, np.array([1.0]), np.eye(1), allow_unstable=True)
    object.__setattr__(model, "allow_unstable", False)
    with pytest.raises(ModelError):
        simulate(model, np.zeros((1, 1)), StageSchedule(1, 1.0))


def test_explosion_cap():
    model = NetworkModel(np.zeros((1, 1)), 1.0, np.array([50.0]), np.eye(1))
    with pytest.raises(ExplosionError):
        simulate(model, np.zeros((1, 1)), StageSchedule(1, 10.0), event_cap=10)


def test_homogeneous_poisson_counts():
    model = NetworkModel(np.zeros((2, 2)), 1.0, np.zeros(2), np.eye(2))
    schedule = StageSchedule(1, 10.0)
    controls = np.full((1, 2), 2.0)
    runs = 1000
    counts = np.vstack([simulate(model, controls, schedule, seed=5, stream=(r,)).counts() for r in range(runs)])
    se = counts.std(axis=0, ddof=1) / np.sqrt(runs)
    assert np.all(np.abs(counts.mean(axis=0) - 20.0) <= 4 * se)


def test_branching_ratio_long_run_rate():
    # a/ω = 0.5 ⇒ 平稳速率 μ/(1 - 0.5)
    model = NetworkModel(np.array([[0.5]]), 1.0, np.array([1.0]), np.eye(1))
    T = 4000.0
    events = simulate(model, np.zeros((1, 1)), StageSchedule(1, T), seed=17)
    assert len(events) / T == pytest.approx(2.0, rel=0.1)


def test_piecewise_exo_lookup():
    exo = PiecewiseExo([0.0, 1.0, 2.0], [[0.1, 0.2], [0.3, 0.4]])
    assert_allclose(exo(0.5), [0.1, 0.2])
    assert_allclose(exo(1.0), [0.3, 0.4])
    assert_allclose(exo(2.0), [0.3, 0.4])


def test_thinning_time_rescaling():
    # 非齐次 Poisson：Λ(t) = t + 0.5(1 - cos t)，间隔 Λ(t_k) - Λ(t_{k-1}) ~ Exp(1)
    model = NetworkModel(np.zeros((1, 1)), 1.0, np.zeros(1), np.eye(1))
    exo = lambda t: np.array([1.0 + 0.5 * np.sin(t)])
    events = simulate_function(model, exo, np.array([1.5]), 400.0, seed=23)
    big_lambda = events.times + 0.5 * (1.0 - np.cos(events.times))
    gaps = np.diff(np.concatenate([[0.0], big_lambda]))
    assert stats.kstest(gaps, "expon").pvalue > 1e-3


def test_thinning_rejects_bad_bound():
    model = NetworkModel(np.zeros((1, 1)), 1.0, np.zeros(1), np.eye(1))
    with pytest.raises(DomainError):
        simulate_function(model, lambda t: np.array([2.0]), np.array([1.0]), 50.0, seed=1)


def test_empirical_intensity_rows(small_model, schedule3):
    events = simulate(small_model, np.full((3, 3), 0.1), schedule3, seed=8)
    probes = [0.5, 2.0, 5.5]
    grid = empirical_intensity(small_model, events, _const(small_model.mu), probes)
    assert grid.shape == (3, 3)
    for row, t in zip(grid, probes):
        assert_allclose(row, intensity_at(small_model, events, _const(small_model.mu), t))
