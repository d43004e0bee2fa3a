"""
曝光线性模型：块结构、两种模式、两种后端
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from modules.exposure import (
    CUMULATIVE, PER_STAGE, ConstraintSet, build_exposure_model, dump_blocks, mean_exposure,
)
from modules.hawkes import NetworkModel, StageSchedule, DomainError, simulate
from modules.ratesolver import MATRIX_FREE, MatrixBackend, gamma, upsilon

FREE = MatrixBackend(mode=MATRIX_FREE)


def _constraints(M, n, budget=1.0, cap=0.5):
    return ConstraintSet(np.ones((M, n)), np.full(M, budget), np.full((M, n), cap))


@pytest.mark.parametrize("mode", [CUMULATIVE, PER_STAGE])
def test_last_stage_blocks(small_model, schedule3, constraints3, mode):
    lem = build_exposure_model(small_model, schedule3, 2, constraints3, mode)
    delta = schedule3.delta
    assert lem.K == 1
    assert_allclose(lem.X, gamma(small_model, delta), rtol=1e-12)
    assert_allclose(lem.Y, gamma(small_model, delta), rtol=1e-12)
    assert_allclose(lem.W, upsilon(small_model, delta), rtol=1e-12)


def test_per_stage_without_excitation_is_poisson():
    n, M, T = 2, 4, 8.0
    model = NetworkModel(np.zeros((n, n)), 0.5, np.zeros(n), np.eye(n))
    schedule = StageSchedule(M, T)
    lem = build_exposure_model(model, schedule, 0, _constraints(M, n), PER_STAGE)
    u = np.arange(1.0, 1.0 + n * M) / 10.0
    out = lem.apply_X(u)
    assert_allclose(out, schedule.delta * u, rtol=1e-12)


def test_cumulative_minus_previous_block_is_per_stage(small_model, schedule3, constraints3):
    cum = build_exposure_model(small_model, schedule3, 0, constraints3, CUMULATIVE)
    per = build_exposure_model(small_model, schedule3, 0, constraints3, PER_STAGE)
    n = small_model.n
    for name in ("X", "Y", "W"):
        C, P = getattr(cum, name), getattr(per, name)
        assert_allclose(C[:n], P[:n], atol=1e-14)
        for m in range(1, cum.K):
            assert_allclose(C[m * n:(m + 1) * n] - C[(m - 1) * n:m * n], P[m * n:(m + 1) * n], atol=1e-12)


def test_block_lower_triangular(small_model, schedule3, constraints3):
    lem = build_exposure_model(small_model, schedule3, 0, constraints3, CUMULATIVE)
    n = small_model.n
    assert_allclose(lem.X[:n, n:], 0.0)
    assert_allclose(lem.X[n:2 * n, 2 * n:], 0.0)


def test_zero_inputs_give_zero_exposure(small_model, schedule3, constraints3):
    lem = build_exposure_model(small_model, schedule3, 0, constraints3)
    assert_allclose(mean_exposure(lem, np.zeros(lem.size), np.zeros(3), np.zeros(3)), np.zeros(lem.size))


@pytest.mark.parametrize("mode", [CUMULATIVE, PER_STAGE])
def test_matrix_free_agrees_with_materialized(small_model, schedule3, constraints3, rng, mode):
    dense = build_exposure_model(small_model, schedule3, 1, constraints3, mode)
    free = build_exposure_model(small_model, schedule3, 1, constraints3, mode, FREE)
    assert not free.materialized
    u = rng.uniform(0.0, 0.2, size=dense.size)
    y = rng.normal(size=dense.size)
    x_l = rng.uniform(0.0, 0.1, size=3)
    assert_allclose(free.apply_X(u), dense.apply_X(u), rtol=1e-8, atol=1e-12)
    assert_allclose(free.apply_XT(y), dense.apply_XT(y), rtol=1e-8, atol=1e-12)
    assert_allclose(free.offset(small_model.mu, x_l), dense.offset(small_model.mu, x_l), rtol=1e-8)
    assert_allclose(free.dense_X(), dense.X, rtol=1e-8, atol=1e-12)


def test_matrix_free_adjoint(small_model, schedule3, constraints3, rng):
    free = build_exposure_model(small_model, schedule3, 0, constraints3, PER_STAGE, FREE)
    u = rng.normal(size=free.size)
    y = rng.normal(size=free.size)
    assert y @ free.apply_X(u) == pytest.approx(u @ free.apply_XT(y), rel=1e-8)


def test_constraint_system(constraints3):
    from modules.exposure import _constraint_system
    Z, z = _constraint_system(constraints3, 1)
    assert Z.shape == (2 + 6 + 6, 6)
    assert_allclose(z[:2], [0.2, 0.25])
    u = np.full(6, 0.05)
    assert np.all(Z @ u <= z + 1e-12)


def test_constraint_violation(constraints3):
    assert constraints3.feasible(0, np.zeros(3))
    assert constraints3.violation(0, [0.2, 0.2, 0.2]) == pytest.approx(0.3)
    assert constraints3.violation(1, [0.25, 0.0, 0.0]) == pytest.approx(0.05)
    assert constraints3.violation(1, [-0.1, 0.0, 0.0]) == pytest.approx(0.1)


def test_invalid_arguments(small_model, schedule3, constraints3):
    with pytest.raises(DomainError):
        build_exposure_model(small_model, schedule3, 3, constraints3)
    with pytest.raises(DomainError):
        build_exposure_model(small_model, schedule3, 0, constraints3, "weekly")
    with pytest.raises(DomainError):
        build_exposure_model(small_model, StageSchedule(2, 6.0), 0, constraints3)
    with pytest.raises(DomainError):
        ConstraintSet(np.ones((2, 3)), np.ones(3), np.ones((2, 3)))
    lem = build_exposure_model(small_model, schedule3, 0, constraints3)
    with pytest.raises(DomainError):
        mean_exposure(lem, np.zeros(4), small_model.mu, np.zeros(3))


def test_dump_blocks(small_model, schedule3, constraints3, tmp_path):
    lem = build_exposure_model(small_model, schedule3, 0, constraints3)
    path = tmp_path / "blocks.csv"
    rows = dump_blocks(lem, path)
    assert rows > 0
    assert path.read_text().startswith("block,row,col,value")


@pytest.mark.slow
@pytest.mark.parametrize("mode", [CUMULATIVE, PER_STAGE])
def test_mean_exposure_matches_simulation(small_model, mode):
    M, T, l, runs = 4, 8.0, 1, 5000
    schedule = StageSchedule(M, T)
    constraints = _constraints(M, 3, budget=1.0, cap=0.4)
    controls = np.array([[0.0, 0.0, 0.0], [0.3, 0.1, 0.2], [0.0, 0.4, 0.1], [0.2, 0.2, 0.2]])
    x_l = np.array([0.05, 0.0, 0.02])
    lem = build_exposure_model(small_model, schedule, l, constraints, mode)
    predicted = mean_exposure(lem, controls[l:].ravel(), small_model.mu, x_l).reshape(M - l, 3)

    tau = schedule.tau
    samples = np.empty((runs, M - l, 3))
    for r in range(runs):
        events = simulate(small_model, controls, schedule, x_init=x_l, window=(tau[l], T), seed=21, stream=(r,))
        for k, m in enumerate(range(l, M)):
            start = tau[l] if mode == CUMULATIVE else tau[m]
            samples[r, k] = small_model.B @ events.counts(start, tau[m + 1])
    se = samples.std(axis=0, ddof=1) / np.sqrt(runs)
    # 12 个坐标同时检验，取 4 个标准误
    assert np.all(np.abs(samples.mean(axis=0) - predicted) <= 4 * se)
