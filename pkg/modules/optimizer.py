"""
求解器模块
CEM / MEM 化为线性规划（修正单纯形 + Bland 规则，大规模转 HiGHS），
LES 为盒约束 + 预算约束的凸二次规划（加速投影梯度）
"""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.optimize import linprog

import config
from modules.exposure import LinearExposureModel, mean_exposure
from modules.hawkes import DomainError

logger = logging.getLogger(__name__)

CEM = "CEM"
MEM = "MEM"
LES = "LES"

OPTIMAL = "optimal"
ITERATION_LIMIT = "iteration_limit"
UNBOUNDED = "unbounded"
INFEASIBLE = "infeasible"
NUMERICAL = "numerical"

_mem_cap_logged = False


def _surrogate(arr, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    if np.any(np.isposinf(arr)):
        logger.warning(f"[求解] {name} 含 +inf，替换为 {config.INF_SURROGATE:.0e}")
        arr[np.isposinf(arr)] = config.INF_SURROGATE
    return arr


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    """目标描述

    CEM: beta (M, n) 为每阶段曝光上限
    MEM: 无额外参数
    LES: gamma (M, r) 为目标曝光，D (r, n) 为整形矩阵（默认单位阵，r = n）
    """
    kind: str
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    D: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (CEM, MEM, LES):
            raise DomainError(f"未知目标: {self.kind}")
        if self.kind == CEM:
            if self.beta is None:
                raise DomainError("CEM 需要 beta")
            beta = np.atleast_2d(_surrogate(self.beta, "beta"))
            if np.any(beta < 0):
                raise DomainError("beta 必须非负")
            object.__setattr__(self, "beta", beta)
        if self.kind == LES:
            if self.gamma is None:
                raise DomainError("LES 需要 gamma")
            gamma = np.atleast_2d(_surrogate(self.gamma, "gamma"))
            if np.any(gamma < 0):
                raise DomainError("gamma 必须非负")
            object.__setattr__(self, "gamma", gamma)
            if self.D is not None:
                D = np.atleast_2d(np.asarray(self.D, dtype=float))
                if D.shape[0] != gamma.shape[1]:
                    raise DomainError(f"gamma 的维度 {gamma.shape[1]} 必须与 D 的行数 {D.shape[0]} 一致")
                object.__setattr__(self, "D", D)

    def shaping(self, n: int) -> np.ndarray:
        return np.eye(n) if self.D is None else self.D

    def beta_hat(self, l: int) -> np.ndarray:
        return self.beta[l:].ravel()

    def gamma_hat(self, l: int) -> np.ndarray:
        return self.gamma[l:].ravel()

    def D_hat(self, n: int, K: int):
        """D̂ = diag(D, …, D)"""
        return scipy.sparse.block_diag([self.shaping(n)] * K, format="csr")


@dataclass
class SolveReport:
    u: np.ndarray                 # 堆叠的 û*
    value: float                  # 模型预测目标值（LES 为最小化的损失）
    status: str
    method: str
    iterations: int = 0
    budget_residual: float = 0.0
    cap_residual: float = 0.0
    nonneg_residual: float = 0.0
    optimality: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL

    def controls(self, n: int) -> np.ndarray:
        return self.u.reshape(-1, n)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "method": self.method,
            "value": self.value,
            "iterations": self.iterations,
            "budget_residual": self.budget_residual,
            "cap_residual": self.cap_residual,
            "nonneg_residual": self.nonneg_residual,
            "optimality": dict(self.optimality),
        }


# ========== 线性规划 ==========

@dataclass
class LPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float
    method: str


def _lp_residuals(c, A, b, x, y) -> tuple[float, float, float]:
    slack = b - A @ x
    reduced = A.T @ y - c
    primal = float(max(0.0, np.max(-slack, initial=0.0), np.max(-x, initial=0.0)))
    dual = float(max(0.0, np.max(-reduced, initial=0.0), np.max(-y, initial=0.0)))
    compl = float(max(abs(y @ slack), abs(x @ reduced)))
    return primal, dual, compl


def _simplex(c, A, b, tol: float, max_iter: int):
    """max c^T x, A x ≤ b, x ≥ 0（b ≥ 0，松弛变量构成初始可行基）

    修正单纯形：每轮对基矩阵做 LU 分解，入基 / 出基都按最小下标（Bland 规则）
    """
    m, N = A.shape
    aug = np.hstack([A, np.eye(m)])
    cost = np.concatenate([c, np.zeros(m)])
    basis = list(range(N, N + m))
    in_basis = np.zeros(N + m, dtype=bool)
    in_basis[basis] = True

    status = ITERATION_LIMIT
    it = 0
    x_B = b.copy()
    y = np.zeros(m)
    while it < max_iter:
        lu = scipy.linalg.lu_factor(aug[:, basis], check_finite=False)
        x_B = scipy.linalg.lu_solve(lu, b, check_finite=False)
        y = scipy.linalg.lu_solve(lu, cost[basis], trans=1, check_finite=False)
        reduced = cost - aug.T @ y
        reduced[in_basis] = 0.0
        candidates = np.flatnonzero(reduced > tol)
        if candidates.size == 0:
            status = OPTIMAL
            break
        j = int(candidates[0])
        d = scipy.linalg.lu_solve(lu, aug[:, j], check_finite=False)
        rows = np.flatnonzero(d > tol)
        if rows.size == 0:
            status = UNBOUNDED
            break
        ratios = np.maximum(x_B[rows], 0.0) / d[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        r = int(min(ties, key=lambda i: basis[i]))
        in_basis[basis[r]] = False
        basis[r] = j
        in_basis[j] = True
        it += 1

    full = np.zeros(N + m)
    full[basis] = np.maximum(x_B, 0.0)
    return full[:N], y, status, it


def _highs(c, A, b, max_iter: int):
    res = linprog(-c, A_ub=A, b_ub=b, bounds=(0, None), method="highs-ds",
                  options={"maxiter": max_iter})
    status = {0: OPTIMAL, 1: ITERATION_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, NUMERICAL)
    if res.x is None:
        return np.zeros(A.shape[1]), np.zeros(A.shape[0]), status, int(getattr(res, "nit", 0))
    y = -np.asarray(res.ineqlin.marginals, dtype=float)
    return np.asarray(res.x, dtype=float), y, status, int(res.nit)


def lp_solve(c, A, b, tol: float | None = None, max_iter: int | None = None,
             method: str | None = None) -> LPResult:
    """max c^T x  s.t.  A x ≤ b, x ≥ 0，要求 b ≥ 0（原点可行）

    method: "simplex" / "highs"，默认按变量数自动选择
    """
    tol = config.LP_TOL if tol is None else tol
    max_iter = config.LP_MAX_ITER if max_iter is None else max_iter
    c = np.asarray(c, dtype=float)
    A = np.asarray(A.toarray() if scipy.sparse.issparse(A) else A, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < -tol):
        raise DomainError("右端项含负值，原点不可行")
    b = np.maximum(b, 0.0)
    if method is None:
        method = "simplex" if c.size <= config.LP_SIMPLEX_MAX_VARS else "highs"

    if method == "simplex":
        x, y, status, it = _simplex(c, A, b, tol, max_iter)
    elif method == "highs":
        x, y, status, it = _highs(c, A, b, max_iter)
    else:
        raise ValueError(f"未知 LP 方法: {method}")

    primal, dual, compl = _lp_residuals(c, A, b, x, y)
    logger.debug(f"[求解] LP {method} {status}，{it} 次迭代，残差 p={primal:.1e} d={dual:.1e} c={compl:.1e}")
    return LPResult(x, y, status, it, primal, dual, compl, method)


def dump_lp(path, c, A, b, title: str = "") -> str:
    """以 LP 文本格式写出 max c^T x, A x ≤ b, x ≥ 0，供离线排查"""
    A = A.toarray() if scipy.sparse.issparse(A) else np.asarray(A)

    def terms(coefs):
        nz = np.flatnonzero(coefs)
        if nz.size == 0:
            return "0 x0"
        return " ".join(f"{'-' if coefs[j] < 0 else '+'} {abs(coefs[j]):.17g} x{j}" for j in nz)

    lines = [f"\\ {title}" if title else "\\ failed instance", "Maximize", f" obj: {terms(np.asarray(c))}", "Subject To"]
    for i in range(A.shape[0]):
        lines.append(f" r{i}: {terms(A[i])} <= {b[i]:.17g}")
    lines.append("Bounds")
    lines.extend(f" x{j} >= 0" for j in range(A.shape[1]))
    lines.append("End")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.warning(f"[求解] 失败实例已写出: {path}")
    return path


# ========== 二次规划（LES） ==========

def project_stage(v, prices, budget: float, caps, tol: float = 1e-12) -> np.ndarray:
    """投影到 {0 ≤ u ≤ α, c^T u ≤ C}

    先做盒投影；预算超出时对乘子 θ 二分，u(θ) = clip(v - θc, 0, α)
    """
    v = np.asarray(v, dtype=float)
    u = np.clip(v, 0.0, caps)
    if prices @ u <= budget:
        return u
    priced = prices > 0
    lo, hi = 0.0, float(np.max(v[priced] / prices[priced]))
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        spend = prices @ np.clip(v - theta * prices, 0.0, caps)
        if spend > budget:
            lo = theta
        else:
            hi = theta
        if hi - lo <= tol * max(1.0, hi):
            break
    return np.clip(v - hi * prices, 0.0, caps)


def project_stacked(u_hat, prices, budgets, caps) -> np.ndarray:
    """逐阶段投影堆叠向量，prices / caps 为 (K, n)"""
    K, n = prices.shape
    u = np.asarray(u_hat, dtype=float).reshape(K, n)
    return np.vstack([project_stage(u[k], prices[k], float(budgets[k]), caps[k]) for k in range(K)]).ravel()


def _lipschitz(apply, apply_T, size: int, dense=None) -> float:
    if dense is not None:
        return float(np.linalg.norm(dense, 2)) ** 2
    v = np.ones(size) / np.sqrt(size)
    est = 0.0
    for _ in range(100):
        w = apply_T(apply(v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - est) <= 1e-6 * norm:
            est = norm
            break
        est = norm
    return 1.05 * est


def qp_solve(apply, apply_T, r0, weight: float, project, size: int,
             dense=None, tol: float | None = None, max_iter: int | None = None):
    """min weight·‖M x + r0‖²  s.t. x ∈ 可行集（project 为欧氏投影）

    FISTA + 函数值自适应重启；停止条件为投影梯度范数 ‖x - P(x - ∇f(x))‖
    返回 (x, status, iterations, pg_norm)
    """
    tol = config.QP_TOL if tol is None else tol
    max_iter = config.QP_MAX_ITER if max_iter is None else max_iter

    def grad(x):
        return 2.0 * weight * apply_T(apply(x) + r0)

    def loss(x):
        r = apply(x) + r0
        return weight * float(r @ r)

    def pg_norm(x, g):
        return float(np.linalg.norm(x - project(x - g)))

    L = 2.0 * weight * _lipschitz(apply, apply_T, size, dense)
    x = project(np.zeros(size))
    g = grad(x)
    res = pg_norm(x, g)
    if L == 0.0 or res <= tol:
        return x, OPTIMAL, 0, res

    step = 1.0 / L
    y, t, f_prev = x.copy(), 1.0, loss(x)
    status, it = ITERATION_LIMIT, 0
    for it in range(1, max_iter + 1):
        x_new = project(y - step * grad(y))
        f_new = loss(x_new)
        if f_new > f_prev:
            # 重启动量
            y, t = x.copy(), 1.0
            x_new = project(x - step * grad(x))
            f_new = loss(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, f_prev = x_new, t_new, f_new
        res = pg_norm(x, grad(x))
        if res <= tol:
            status = OPTIMAL
            break
    return x, status, it, res


# ========== 三个目标 ==========

def _offset(lem: LinearExposureModel, mu, x_l, carry=None) -> np.ndarray:
    o = lem.offset(mu, x_l)
    if carry is not None:
        o = o + np.tile(np.asarray(carry, dtype=float), lem.K)
    return o


def _polish(lem: LinearExposureModel, u_hat) -> np.ndarray:
    """LP 舍入误差清理：裁剪到 [0, α]，超预算的阶段等比缩回"""
    u = np.clip(np.asarray(u_hat, dtype=float).reshape(lem.K, lem.n), 0.0, lem.caps)
    for k in range(lem.K):
        spend = float(lem.prices[k] @ u[k])
        if spend > lem.budgets[k] > 0:
            u[k] *= lem.budgets[k] / spend
        elif lem.budgets[k] == 0:
            u[k][lem.prices[k] > 0] = 0.0
    return u.ravel()


def feasibility(lem: LinearExposureModel, u_hat) -> tuple[float, float, float]:
    """(预算, 上限, 非负) 三项最大违反量"""
    u = np.asarray(u_hat, dtype=float).reshape(lem.K, lem.n)
    budget = float(np.max(np.einsum("kn,kn->k", lem.prices, u) - lem.budgets, initial=0.0))
    cap = float(np.max(u - lem.caps, initial=0.0))
    nonneg = float(np.max(-u, initial=0.0))
    return max(budget, 0.0), max(cap, 0.0), max(nonneg, 0.0)


def stacked_objective(kind: str, E, n: int, beta_hat=None, D_hat=None, gamma_hat=None) -> float:
    """堆叠曝光 Ê 上的目标值

    CEM: (1/n)Σ min(Ê, β̂)；MEM: Σ_m min_i Ê_m^i；LES: (1/n)‖D̂Ê - γ̂‖²（越小越好）
    """
    E = np.asarray(E, dtype=float)
    if kind == CEM:
        return float(np.minimum(E, beta_hat).sum() / n)
    if kind == MEM:
        return float(E.reshape(-1, n).min(axis=1).sum())
    r = D_hat @ E - gamma_hat
    return float(r @ r / n)


def model_objective(spec: ObjectiveSpec, lem: LinearExposureModel, u_hat, mu, x_l, carry=None) -> float:
    """任意堆叠分配 û 的模型预测目标值（基线对比用同一个线性模型）"""
    E = mean_exposure(lem, u_hat, mu, x_l, carry)
    if spec.kind == CEM:
        return stacked_objective(CEM, E, lem.n, beta_hat=spec.beta_hat(lem.l))
    if spec.kind == MEM:
        return stacked_objective(MEM, E, lem.n)
    return stacked_objective(LES, E, lem.n, D_hat=spec.D_hat(lem.n, lem.K), gamma_hat=spec.gamma_hat(lem.l))


def _report(kind, lem, u, value, status, method, it, optimality, lp=None) -> SolveReport:
    budget, cap, nonneg = feasibility(lem, u)
    report = SolveReport(u, value, status, method, it, budget, cap, nonneg, optimality)
    if not report.success:
        logger.error(f"[求解] {kind} 在阶段 {lem.l} 未达最优: {status}（{it} 次迭代）")
        if lp is not None:
            path = os.path.join(config.OUT_DIR, "failed", f"{kind.lower()}_stage{lem.l}_n{lem.n}.lp")
            try:
                dump_lp(path, *lp, title=f"{kind} stage {lem.l} status {status}")
            except OSError as e:
                logger.error(f"[求解] 写出失败实例出错: {e}")
    return report


def _lp_optimality(res: LPResult) -> dict:
    return {"primal": res.primal_residual, "dual": res.dual_residual, "complementarity": res.complementarity}


def solve_cem(lem: LinearExposureModel, mu, x_l, beta_hat, carry=None, method: str | None = None) -> SolveReport:
    """max (1/n) 1^T ĥ  s.t.  Xû + o ≥ ĥ, ĥ ≤ β̂, Zû ≤ z

    变量 [û, ĥ]，o = Yμ + W x_l（+ 已实现曝光 carry），β̂ 为阶段 l..M-1 的堆叠上限
    """
    N, n, K = lem.size, lem.n, lem.K
    beta = _surrogate(beta_hat, "beta")
    if beta.shape != (N,):
        raise DomainError(f"β̂ 维度应为 ({N},)，收到 {beta.shape}")
    X = lem.dense_X()
    o = _offset(lem, mu, x_l, carry)
    I = np.eye(N)
    budget_rows = lem.Z[:K].toarray()
    A = np.vstack([
        np.hstack([-X, I]),                          # ĥ - Xû ≤ o
        np.hstack([np.zeros((N, N)), I]),            # ĥ ≤ β̂
        np.hstack([budget_rows, np.zeros((K, N))]),
        np.hstack([I, np.zeros((N, N))]),            # û ≤ α̂
    ])
    b = np.concatenate([o, beta, lem.budgets, lem.caps.ravel()])
    c = np.concatenate([np.zeros(N), np.full(N, 1.0 / n)])
    res = lp_solve(c, A, b, method=method)
    u = _polish(lem, res.x[:N])
    value = stacked_objective(CEM, mean_exposure(lem, u, mu, x_l, carry), n, beta_hat=beta)
    return _report(CEM, lem, u, value, res.status, res.method, res.iterations, _lp_optimality(res), (c, A, b))


def solve_mem(lem: LinearExposureModel, mu, x_l, carry=None, method: str | None = None) -> SolveReport:
    """max Σ_m h_m  s.t.  h_m ≤ Ê_m^i (∀i), Zû ≤ z

    每阶段一个标量 h_m，对应 n 条不等式
    """
    global _mem_cap_logged
    if not _mem_cap_logged:
        logger.info("[求解] MEM 定义中没有曝光上限，忽略原式中遗留的 β̂ ≥ ĥ 约束")
        _mem_cap_logged = True
    N, n, K = lem.size, lem.n, lem.K
    X = lem.dense_X()
    o = _offset(lem, mu, x_l, carry)
    S = np.kron(np.eye(K), np.ones((n, 1)))          # h_m 复制到第 m 块的 n 行
    budget_rows = lem.Z[:K].toarray()
    A = np.vstack([
        np.hstack([-X, S]),
        np.hstack([budget_rows, np.zeros((K, K))]),
        np.hstack([np.eye(N), np.zeros((N, K))]),
    ])
    b = np.concatenate([o, lem.budgets, lem.caps.ravel()])
    c = np.concatenate([np.zeros(N), np.ones(K)])
    res = lp_solve(c, A, b, method=method)
    u = _polish(lem, res.x[:N])
    value = stacked_objective(MEM, mean_exposure(lem, u, mu, x_l, carry), n)
    return _report(MEM, lem, u, value, res.status, res.method, res.iterations, _lp_optimality(res), (c, A, b))


def solve_les(lem: LinearExposureModel, mu, x_l, D_hat, gamma_hat, carry=None) -> SolveReport:
    """min (1/n)‖D̂(Xû + o) - γ̂‖²  s.t.  Zû ≤ z"""
    n = lem.n
    D_hat = scipy.sparse.csr_matrix(D_hat)
    target = np.asarray(gamma_hat, dtype=float)
    if D_hat.shape[1] != lem.size or target.shape != (D_hat.shape[0],):
        raise DomainError(f"D̂ {D_hat.shape} / γ̂ {target.shape} 与堆叠维度 {lem.size} 不一致")

    r0 = D_hat @ _offset(lem, mu, x_l, carry) - target
    dense = D_hat @ lem.X if lem.materialized else None

    def apply(u):
        return D_hat @ lem.apply_X(u)

    def apply_T(r):
        return lem.apply_XT(D_hat.T @ r)

    def project(u):
        return project_stacked(u, lem.prices, lem.budgets, lem.caps)

    u, status, it, pg = qp_solve(apply, apply_T, r0, 1.0 / n, project, lem.size, dense=dense)
    r = apply(u) + r0
    return _report(LES, lem, u, float(r @ r / n), status, "fista", it, {"projected_gradient": pg})


def solve(spec: ObjectiveSpec, lem: LinearExposureModel, mu, x_l, carry=None) -> SolveReport:
    """按目标类型分派到三个求解器"""
    if spec.kind == CEM:
        return solve_cem(lem, mu, x_l, spec.beta_hat(lem.l), carry=carry)
    if spec.kind == MEM:
        return solve_mem(lem, mu, x_l, carry=carry)
    return solve_les(lem, mu, x_l, spec.D_hat(lem.n, lem.K), spec.gamma_hat(lem.l), carry=carry)
