"""
均值强度求解模块
Ψ(t)、分段常数与一般时变外生强度下的速率函数 η(t)、积分算子 Γ(t) / Υ(t)，
以及稠密 / matrix-free 两种矩阵后端（expm 作用、移位线性方程组）
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.integrate import simpson

import config
from modules.hawkes import NetworkModel, SingularShiftError, DomainError

logger = logging.getLogger(__name__)

DENSE = "dense"
MATRIX_FREE = "matrix-free"


class NumericalError(RuntimeError):
    """迭代方法未收敛"""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message}（残差 {residual:.3e}）")
        self.residual = residual


@dataclass(frozen=True)
class MatrixBackend:
    """矩阵后端：dense 直接计算；matrix-free 只做矩阵-向量乘"""
    mode: str = DENSE
    tol: float = config.KRYLOV_TOL
    maxiter: int = config.KRYLOV_MAXITER
    dense_threshold: int = config.DENSE_THRESHOLD

    def __post_init__(self):
        if self.mode not in (DENSE, MATRIX_FREE):
            raise ValueError(f"未知后端模式: {self.mode}")

    def check(self, n: int):
        if self.mode == DENSE and n > self.dense_threshold:
            raise ValueError(f"n={n} 超过稠密阈值 {self.dense_threshold}，请使用 matrix-free 后端")

    @property
    def dense(self) -> bool:
        return self.mode == DENSE


def choose_backend(n: int) -> MatrixBackend:
    """按规模自动选择后端"""
    mode = DENSE if n <= config.DENSE_THRESHOLD else MATRIX_FREE
    return MatrixBackend(mode=mode)


DEFAULT_BACKEND = MatrixBackend()


@dataclass(frozen=True, eq=False)
class PiecewiseExo:
    """右连续分段常数外生强度：[τ_{m-1}, τ_m) 上取 levels[m-1]"""
    breakpoints: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        lv = np.atleast_2d(np.asarray(self.levels, dtype=float))
        if bp.ndim != 1 or bp.size != lv.shape[0] + 1:
            raise DomainError("breakpoints 数量必须比 levels 多 1")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise DomainError("breakpoints 必须从 0 开始严格递增")
        if np.any(lv < 0):
            raise DomainError("levels 必须非负")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "levels", lv)

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    def __call__(self, t: float) -> np.ndarray:
        m = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        m = min(max(m, 0), self.levels.shape[0] - 1)
        return self.levels[m]


@dataclass(frozen=True, eq=False)
class SampledExo:
    """均匀网格上采样的时变外生强度，网格之间线性插值"""
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.size == 0:
            raise DomainError("采样网格为空")
        if values.shape[0] != times.size:
            raise DomainError("values 行数必须与采样点数一致")
        if times.size > 1:
            steps = np.diff(times)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, times[-1]):
                raise DomainError("采样网格必须均匀递增")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def __call__(self, t: float) -> np.ndarray:
        idx = np.searchsorted(self.times, t, side="right") - 1
        idx = min(max(int(idx), 0), self.times.size - 1)
        if idx == self.times.size - 1:
            return self.values[idx]
        w = (t - self.times[idx]) / (self.times[idx + 1] - self.times[idx])
        return (1 - w) * self.values[idx] + w * self.values[idx + 1]


# ========== 后端基础操作 ==========

def shift_matrix(model: NetworkModel) -> np.ndarray:
    """K = A - ωI"""
    return model.A - model.omega * np.eye(model.n)


@lru_cache(maxsize=32)
def _shift_lu(model: NetworkModel):
    try:
        return scipy.linalg.lu_factor(shift_matrix(model), check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SingularShiftError(f"A - ωI 分解失败: {e}") from e


@lru_cache(maxsize=32)
def _shift_sparse(model: NetworkModel):
    K = scipy.sparse.csr_matrix(model.A) - model.omega * scipy.sparse.identity(model.n, format="csr")
    return K.tocsr(), K.T.tocsr(), float(K.diagonal().sum())


def expm_action(M, v, backend: MatrixBackend = DEFAULT_BACKEND, trace: float | None = None) -> np.ndarray:
    """e^{M} v

    dense: scipy.linalg.expm（Padé + scaling and squaring）
    matrix-free: expm_multiply（截断 Taylor + scaling，只做矩阵-向量乘）
    """
    v = np.asarray(v, dtype=float)
    if backend.dense and isinstance(M, np.ndarray):
        return scipy.linalg.expm(M) @ v
    if trace is None and scipy.sparse.issparse(M):
        trace = float(M.diagonal().sum())
    out = scipy.sparse.linalg.expm_multiply(M, v, traceA=trace)
    if not np.all(np.isfinite(out)):
        raise NumericalError("expm_multiply 结果含非有限值", float("inf"))
    return np.asarray(out)


def solve_shifted(model: NetworkModel, b, backend: MatrixBackend = DEFAULT_BACKEND,
                  transpose: bool = False) -> np.ndarray:
    """解 (A - ωI) x = b（transpose=True 时解转置方程）

    dense 用 LU；matrix-free 用 GMRES，残差 ‖Kx - b‖ ≤ tol‖b‖
    """
    b = np.asarray(b, dtype=float)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    if backend.dense:
        return scipy.linalg.lu_solve(_shift_lu(model), b, trans=1 if transpose else 0, check_finite=False)

    K, KT, _ = _shift_sparse(model)
    op = KT if transpose else K
    restart = min(model.n, 50)
    x, info = scipy.sparse.linalg.gmres(op, b, rtol=0.1 * backend.tol, atol=0.0,
                                        restart=restart, maxiter=backend.maxiter)
    residual = float(np.linalg.norm(op @ x - b))
    if info != 0 or residual > backend.tol * bnorm:
        raise NumericalError(f"GMRES 未收敛（info={info}）", residual / bnorm)
    return x


def _exp_action(model: NetworkModel, t: float, v, backend: MatrixBackend, transpose: bool = False):
    """e^{Kt} v（或 e^{K^T t} v）"""
    if backend.dense:
        K = shift_matrix(model)
        return scipy.linalg.expm((K.T if transpose else K) * t) @ v
    K, KT, trace = _shift_sparse(model)
    op = KT if transpose else K
    return expm_action(op * t, v, backend, trace=trace * t)


# ========== Ψ(t) 与速率函数 ==========

def psi(model: NetworkModel, t: float, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """Ψ(t) = e^{Kt} + ω K^{-1}(e^{Kt} - I)，K = A - ωI；Ψ(0) = I"""
    if t < 0:
        raise DomainError(f"t={t} 必须非负")
    n = model.n
    if t == 0:
        return np.eye(n)
    if not backend.dense:
        return np.column_stack([psi_action(model, t, e, backend) for e in np.eye(n)])
    E = scipy.linalg.expm(shift_matrix(model) * t)
    return E + model.omega * scipy.linalg.lu_solve(_shift_lu(model), E - np.eye(n), check_finite=False)


def psi_action(model: NetworkModel, t: float, v, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """Ψ(t) v"""
    v = np.asarray(v, dtype=float)
    if t == 0:
        return v.copy()
    if backend.dense:
        return psi(model, t, backend) @ v
    ev = _exp_action(model, t, v, backend)
    return ev + model.omega * solve_shifted(model, ev - v, backend)


def eta_piecewise(model: NetworkModel, exo: PiecewiseExo, t: float,
                  backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """分段常数外生强度下的速率函数

    η(t) = Σ_{k: τ_k ≤ t} Ψ(t - τ_k)(c_k - c_{k-1})，c_{-1} = 0；断点处取右极限
    """
    if t < 0 or t > exo.T * (1 + 1e-12):
        raise DomainError(f"t={t} 超出 [0, {exo.T}]")
    if t == 0:
        return exo.levels[0].copy()
    eta = np.zeros(model.n)
    prev = np.zeros(model.n)
    for k, tau_k in enumerate(exo.breakpoints[:-1]):
        if tau_k > t:
            break
        jump = exo.levels[k] - prev
        if np.any(jump):
            eta += psi_action(model, t - tau_k, jump, backend)
        prev = exo.levels[k]
    return eta


def eta_piecewise_grid(model: NetworkModel, exo: PiecewiseExo, times,
                       backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """在时间网格上批量计算 η，返回 (len(times), n)"""
    return np.vstack([eta_piecewise(model, exo, float(t), backend) for t in np.asarray(times, dtype=float)])


def _segments(exo, t: float) -> list[tuple[float, float]]:
    """按外生强度的断点把 [0, t] 切成光滑子区间"""
    cuts = [0.0]
    bp = getattr(exo, "breakpoints", None)
    if bp is not None:
        cuts += [float(b) for b in bp if 0.0 < b < t]
    cuts.append(float(t))
    return list(zip(cuts[:-1], cuts[1:]))


def eta_general(model: NetworkModel, exo_fn, t: float, quadrature_step: float,
                backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """一般时变外生强度下的速率函数（复合梯形公式）

    η(t) = μ(t) + A ∫_0^t e^{K(t-s)} μ(s) ds

    exo_fn: 可调用对象（PiecewiseExo / SampledExo / 任意 t -> n 维向量）；
    有断点时在断点处分段积分，子区间右端取左极限。
    递推 y_j = e^{Kh}(y_{j-1} + h/2 f_{j-1}) + h/2 f_j
    """
    if isinstance(exo_fn, SampledExo) and exo_fn.times.size == 0:
        raise DomainError("采样网格为空")
    if quadrature_step <= 0:
        raise DomainError(f"quadrature_step 必须为正，收到 {quadrature_step}")
    if t < 0:
        raise DomainError(f"t={t} 必须非负")
    mu_t = np.asarray(exo_fn(t), dtype=float)
    if t == 0:
        return mu_t.copy()

    n = model.n
    y = np.zeros(n)
    step_cache = {}
    for a, b in _segments(exo_fn, t):
        N = max(1, int(math.ceil((b - a) / quadrature_step - 1e-9)))
        h = (b - a) / N
        nodes = a + h * np.arange(N + 1)
        if backend.dense:
            key = round(h, 15)
            if key not in step_cache:
                step_cache[key] = scipy.linalg.expm(shift_matrix(model) * h)
            E = step_cache[key]
            apply_E = lambda v, E=E: E @ v  # noqa: E731
        else:
            apply_E = lambda v, h=h: _exp_action(model, h, v, backend)  # noqa: E731
        f_prev = np.asarray(exo_fn(nodes[0]), dtype=float)
        for j in range(1, N + 1):
            s = nodes[j] if j < N else np.nextafter(b, a)
            f_j = np.asarray(exo_fn(s), dtype=float)
            y = apply_E(y + 0.5 * h * f_prev) + 0.5 * h * f_j
            f_prev = f_j
    return mu_t + model.A @ y


# ========== 积分算子 Γ / Υ ==========

def integrated_exp(model: NetworkModel, t: float, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """V(t) = ∫_0^t e^{Ks} ds = K^{-1}(e^{Kt} - I)"""
    n = model.n
    if t == 0:
        return np.zeros((n, n))
    backend.check(n)
    E = scipy.linalg.expm(shift_matrix(model) * t)
    return scipy.linalg.lu_solve(_shift_lu(model), E - np.eye(n), check_finite=False)


def integrated_psi(model: NetworkModel, t: float, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """∫_0^t Ψ(s) ds = V(t) + ω K^{-1}(V(t) - tI)"""
    n = model.n
    if t == 0:
        return np.zeros((n, n))
    V = integrated_exp(model, t, backend)
    return V + model.omega * scipy.linalg.lu_solve(_shift_lu(model), V - t * np.eye(n), check_finite=False)


def gamma(model: NetworkModel, t: float, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """Γ(t) = B ∫_0^t Ψ(s) ds

    印刷版公式 BΥ(t) + B(A-ωI)^{-1}(Υ(t) - It)/ω 重复乘了 B 且 ω 位置有误，
    这里按定义积分重新推导：B[V(t) + ω K^{-1}(V(t) - tI)]
    """
    if t < 0:
        raise DomainError(f"t={t} 必须非负")
    if not backend.dense:
        return np.column_stack([gamma_action(model, t, e, backend) for e in np.eye(model.n)])
    return model.B @ integrated_psi(model, t, backend)


def upsilon(model: NetworkModel, t: float, backend: MatrixBackend = DEFAULT_BACKEND) -> np.ndarray:
    """Υ(t) = B ∫_0^t e^{Ks} ds = B K^{-1}(e^{Kt} - I)"""
    if t < 0:
        raise DomainError(f"t={t} 必须非负")
    if not backend.dense:
        return np.column_stack([upsilon_action(model, t, e, backend) for e in np.eye(model.n)])
    return model.B @ integrated_exp(model, t, backend)


def _v_action(model, t, v, backend, transpose):
    ev = _exp_action(model, t, v, backend, transpose)
    return solve_shifted(model, ev - v, backend, transpose=transpose)


def gamma_action(model: NetworkModel, t: float, v, backend: MatrixBackend = DEFAULT_BACKEND,
                 transpose: bool = False) -> np.ndarray:
    """Γ(t) v（transpose=True 时为 Γ(t)^T v），只用 expm 作用与移位求解"""
    v = np.asarray(v, dtype=float)
    if t == 0:
        return np.zeros_like(v)
    if transpose:
        z = model.B.T @ v
        V = _v_action(model, t, z, backend, True)
        return V + model.omega * solve_shifted(model, V - t * z, backend, transpose=True)
    V = _v_action(model, t, v, backend, False)
    return model.B @ (V + model.omega * solve_shifted(model, V - t * v, backend))


def upsilon_action(model: NetworkModel, t: float, v, backend: MatrixBackend = DEFAULT_BACKEND,
                   transpose: bool = False) -> np.ndarray:
    """Υ(t) v（transpose=True 时为 Υ(t)^T v）"""
    v = np.asarray(v, dtype=float)
    if t == 0:
        return np.zeros_like(v)
    if transpose:
        return _v_action(model, t, model.B.T @ v, backend, True)
    return model.B @ _v_action(model, t, v, backend, False)


@dataclass(eq=False)
class ResponseTable:
    """Γ_k = Γ(kΔ)、Υ_k = Υ(kΔ)，k = 0..M 的缓存表

    dense 后端存矩阵；matrix-free 后端只存算子，按需做矩阵-向量乘。
    建好之后只读，可在各重规划阶段与线程间共享。
    """
    model: NetworkModel
    delta: float
    M: int
    backend: MatrixBackend = DEFAULT_BACKEND
    gammas: list = field(default_factory=list)
    upsilons: list = field(default_factory=list)

    def __post_init__(self):
        n = self.model.n
        if self.backend.dense:
            self.backend.check(n)
            self.gammas = [gamma(self.model, k * self.delta, self.backend) for k in range(self.M + 1)]
            self.upsilons = [upsilon(self.model, k * self.delta, self.backend) for k in range(self.M + 1)]
            logger.debug(f"[算子] 已缓存 Γ/Υ 表 n={n} M={self.M} Δ={self.delta:.4f}")

    def gamma_mv(self, k: int, v, transpose: bool = False) -> np.ndarray:
        if self.backend.dense:
            G = self.gammas[k]
            return (G.T if transpose else G) @ v
        return gamma_action(self.model, k * self.delta, v, self.backend, transpose)

    def upsilon_mv(self, k: int, v, transpose: bool = False) -> np.ndarray:
        if self.backend.dense:
            U = self.upsilons[k]
            return (U.T if transpose else U) @ v
        return upsilon_action(self.model, k * self.delta, v, self.backend, transpose)


@lru_cache(maxsize=16)
def response_table(model: NetworkModel, delta: float, M: int,
                   backend: MatrixBackend = DEFAULT_BACKEND) -> ResponseTable:
    """按 (model, Δ, M, backend) 复用 Γ/Υ 表"""
    return ResponseTable(model, delta, M, backend)


# ========== 校验 ==========

def renewal_residual(model: NetworkModel, t: float, panels: int = 400) -> float:
    """Ψ(t) - I - ∫_0^t Φ(t-s)Ψ(s) ds 的 ∞-范数（复合 Simpson）"""
    if t == 0:
        return 0.0
    if panels % 2:
        panels += 1
    n = model.n
    s = np.linspace(0.0, t, panels + 1)
    h = t / panels
    K = shift_matrix(model)
    Eh = scipy.linalg.expm(K * h)
    lu = _shift_lu(model)
    # Ψ(s_j)，e^{K s_j} 用步进幂递推
    E = np.eye(n)
    psis = np.empty((panels + 1, n, n))
    for j in range(panels + 1):
        psis[j] = E + model.omega * scipy.linalg.lu_solve(lu, E - np.eye(n), check_finite=False)
        E = Eh @ E
    kernel = np.exp(-model.omega * (t - s))[:, None, None] * (model.A[None, :, :] @ psis)
    integral = simpson(kernel, x=s, axis=0)
    R = psis[-1] - np.eye(n) - integral
    return float(np.linalg.norm(R, ord=np.inf))


def certify_psi(model: NetworkModel, times, panels: int = 400) -> list[tuple[float, float]]:
    """更新方程残差表，返回 [(t, residual), ...]"""
    rows = [(float(t), renewal_residual(model, float(t), panels)) for t in np.asarray(times, dtype=float)]
    worst = max((r for _, r in rows), default=0.0)
    logger.info(f"[校验] Ψ 更新方程残差最大值 {worst:.3e}（{len(rows)} 个时间点）")
    return rows
