"""
Ψ(t)、速率函数、Γ/Υ 以及两种矩阵后端
"""
import numpy as np
import pytest
import scipy.linalg
import scipy.sparse
from numpy.testing import assert_allclose
from scipy.integrate import quad, quad_vec, solve_ivp

from modules.hawkes import NetworkModel, DomainError
from modules.ratesolver import (
    MATRIX_FREE, MatrixBackend, PiecewiseExo, SampledExo,
    certify_psi, eta_general, eta_piecewise, expm_action, gamma, gamma_action, psi, psi_action, renewal_residual,
    response_table, shift_matrix, solve_shifted, upsilon, upsilon_action,
)

FREE = MatrixBackend(mode=MATRIX_FREE)


def _scalar_model():
    return NetworkModel(np.array([[0.5]]), 0.1, np.array([1.0]), np.eye(1), allow_unstable=True)


def _psi_by_ode(model, t):
    """Ψ = I + A Z，Z' = I + (A - ωI) Z，Z(0) = 0"""
    n = model.n
    K = shift_matrix(model)

    def rhs(_, z):
        return (np.eye(n) + K @ z.reshape(n, n)).ravel()

    sol = solve_ivp(rhs, (0.0, t), np.zeros(n * n), rtol=1e-12, atol=1e-14, method="DOP853")
    return np.eye(n) + model.A @ sol.y[:, -1].reshape(n, n)


def test_psi_at_zero_is_identity(small_model):
    assert_allclose(psi(small_model, 0.0), np.eye(3))


def test_psi_scalar_closed_form():
    expected = np.exp(0.4) + 0.25 * (np.exp(0.4) - 1.0)
    assert_allclose(psi(_scalar_model(), 1.0), [[expected]], rtol=1e-13)


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
def test_psi_matches_renewal_solution(small_model, t):
    assert_allclose(psi(small_model, t), _psi_by_ode(small_model, t), atol=1e-6)


def test_psi_negative_time(small_model):
    with pytest.raises(DomainError):
        psi(small_model, -1.0)


def test_eta_single_level(small_model):
    c = np.array([0.3, 0.1, 0.2])
    exo = PiecewiseExo([0.0, 5.0], [c])
    assert_allclose(eta_piecewise(small_model, exo, 3.0), psi(small_model, 3.0) @ c, rtol=1e-12)


def test_eta_equal_levels_ignore_breakpoints(small_model):
    c = np.array([0.3, 0.1, 0.2])
    exo = PiecewiseExo([0.0, 1.0, 2.5, 4.0], [c, c, c])
    assert_allclose(eta_piecewise(small_model, exo, 3.7), psi(small_model, 3.7) @ c, rtol=1e-12)


def test_eta_general_zero_exo(small_model):
    assert_allclose(eta_general(small_model, lambda t: np.zeros(3), 4.0, 0.01), np.zeros(3))


def test_eta_general_matches_piecewise(small_model):
    exo = PiecewiseExo([0.0, 3.0, 6.0], [[0.2, 0.1, 0.3], [0.05, 0.25, 0.1]])
    for t in (2.0, 4.5, 6.0):
        assert_allclose(eta_general(small_model, exo, t, 1e-3), eta_piecewise(small_model, exo, t), atol=1e-6)


def test_eta_at_breakpoint_takes_new_level(small_model):
    exo = PiecewiseExo([0.0, 5.0, 10.0], [[0.1, 0.1, 0.1], [0.5, 0.3, 0.2]])
    at = eta_piecewise(small_model, exo, 5.0)
    assert_allclose(at, eta_general(small_model, exo, 5.0, 1e-3), atol=1e-6)
    before = eta_piecewise(small_model, exo, 5.0 - 1e-9)
    assert_allclose(at - before, exo.levels[1] - exo.levels[0], atol=1e-6)


def test_eta_general_empty_grid():
    with pytest.raises(DomainError):
        SampledExo(np.zeros(0), np.zeros((0, 3)))


def test_gamma_upsilon_at_zero(small_model):
    assert_allclose(gamma(small_model, 0.0), np.zeros((3, 3)))
    assert_allclose(upsilon(small_model, 0.0), np.zeros((3, 3)))


def test_gamma_scalar_quadrature():
    model = _scalar_model()
    ref, _ = quad(lambda s: psi(model, s)[0, 0], 0.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    assert_allclose(gamma(model, 1.0), [[ref]], atol=1e-9)


def test_gamma_matches_quadrature(small_model):
    t = 2.0
    ref, _ = quad_vec(lambda s: small_model.B @ psi(small_model, s), 0.0, t, epsabs=1e-13, epsrel=1e-12)
    assert_allclose(gamma(small_model, t), ref, atol=1e-8)


def test_upsilon_without_excitation():
    omega, t = 0.3, 2.0
    model = NetworkModel(np.zeros((2, 2)), omega, np.zeros(2), np.eye(2))
    assert_allclose(upsilon(model, t), (1.0 - np.exp(-omega * t)) / omega * np.eye(2), rtol=1e-13)


def test_upsilon_matches_quadrature(small_model):
    K = shift_matrix(small_model)
    ref, _ = quad_vec(lambda s: small_model.B @ scipy.linalg.expm(K * s), 0.0, 3.0, epsabs=1e-13, epsrel=1e-12)
    assert_allclose(upsilon(small_model, 3.0), ref, atol=1e-8)


def test_expm_action_zero_and_diagonal():
    v = np.array([1.0, -2.0, 0.5])
    for backend in (MatrixBackend(), FREE):
        assert_allclose(expm_action(np.zeros((3, 3)), v, backend), v)
    d = np.array([0.1, -0.5, 1.2])
    assert_allclose(expm_action(np.diag(d), v, FREE), np.exp(d) * v, rtol=1e-12)


def test_expm_action_matches_dense(rng):
    M = rng.normal(scale=0.2, size=(30, 30))
    v = rng.normal(size=30)
    ref = scipy.linalg.expm(M) @ v
    out = expm_action(scipy.sparse.csr_matrix(M), v, FREE)
    assert np.linalg.norm(out - ref) <= 1e-10 * np.linalg.norm(ref)


def test_solve_shifted_trivial_cases():
    model = NetworkModel(np.zeros((3, 3)), 0.5, np.zeros(3), np.eye(3))
    b = np.array([1.0, 2.0, -1.0])
    assert_allclose(solve_shifted(model, np.zeros(3)), np.zeros(3))
    for backend in (MatrixBackend(), FREE):
        assert_allclose(solve_shifted(model, b, backend), -b / 0.5, rtol=1e-10)


def test_solve_shifted_gmres_residual():
    n = 200
    rs = np.random.default_rng(3)
    A = scipy.sparse.random(n, n, density=0.02, random_state=rs, data_rvs=lambda k: rs.uniform(0.0, 0.01, k))
    model = NetworkModel(A.toarray(), 0.1, np.zeros(n), np.eye(n))
    b = rs.normal(size=n)
    x = solve_shifted(model, b, FREE)
    assert np.linalg.norm(shift_matrix(model) @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_matrix_free_agrees_with_dense(small_model, rng):
    v = rng.uniform(size=3)
    for t in (0.7, 3.0):
        assert_allclose(psi_action(small_model, t, v, FREE), psi(small_model, t) @ v, rtol=1e-8)
        assert_allclose(gamma_action(small_model, t, v, FREE), gamma(small_model, t) @ v, rtol=1e-8)
        assert_allclose(upsilon_action(small_model, t, v, FREE), upsilon(small_model, t) @ v, rtol=1e-8)
        assert_allclose(gamma_action(small_model, t, v, FREE, transpose=True),
                        gamma(small_model, t).T @ v, rtol=1e-8)


def test_response_table_is_cached(small_model):
    t1 = response_table(small_model, 2.0, 3)
    t2 = response_table(small_model, 2.0, 3)
    assert t1 is t2
    assert_allclose(t1.gammas[2], gamma(small_model, 4.0))


def test_renewal_residual_small(small_model):
    for t in (1.0, 5.0, 20.0):
        assert renewal_residual(small_model, t) <= 1e-5


def test_certify_psi_rows(small_model):
    rows = certify_psi(small_model, [2.0, 8.0])
    assert [t for t, _ in rows] == [2.0, 8.0]
    assert all(0.0 <= r <= 1e-5 for _, r in rows)


def test_dense_backend_threshold():
    backend = MatrixBackend(dense_threshold=2)
    with pytest.raises(ValueError):
        backend.check(3)
