"""
曝光线性模型模块
把重规划阶段 l 之后的堆叠干预 û 映射到堆叠的平均曝光：
    Ê = X û + Y μ + W x_l,   Z û ≤ z
cumulative 模式：第 m 块为 [τ_l, τ_{m+1}] 的累计曝光（与块矩阵公式逐项一致）
per-stage 模式：第 m 块为阶段 m 内的曝光 B·E[N(τ_{m+1}) - N(τ_m)]
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse
from scipy.sparse.linalg import LinearOperator

from modules.hawkes import NetworkModel, StageSchedule, DomainError
from modules.ratesolver import MatrixBackend, ResponseTable, response_table, DEFAULT_BACKEND

logger = logging.getLogger(__name__)

CUMULATIVE = "cumulative"
PER_STAGE = "per-stage"

_mode_warned = False


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """每阶段的价格 c_m、预算 C_m、上限 α_m

    U_m = {u | c_m^T u ≤ C_m, 0 ≤ u ≤ α_m}，u = 0 永远可行
    """
    prices: np.ndarray   # (M, n)
    budgets: np.ndarray  # (M,)
    caps: np.ndarray     # (M, n)

    def __post_init__(self):
        prices = np.atleast_2d(np.array(self.prices, dtype=float))
        budgets = np.atleast_1d(np.array(self.budgets, dtype=float))
        caps = np.atleast_2d(np.array(self.caps, dtype=float))
        if prices.shape != caps.shape or budgets.shape != (prices.shape[0],):
            raise DomainError(f"约束维度不一致: prices {prices.shape}, budgets {budgets.shape}, caps {caps.shape}")
        if np.any(prices < 0) or np.any(budgets < 0) or np.any(caps < 0):
            raise DomainError("价格、预算、上限必须非负")
        for arr in (prices, budgets, caps):
            arr.setflags(write=False)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "caps", caps)

    @property
    def M(self) -> int:
        return self.prices.shape[0]

    @property
    def n(self) -> int:
        return self.prices.shape[1]

    def stage(self, m: int) -> tuple[np.ndarray, float, np.ndarray]:
        return self.prices[m], float(self.budgets[m]), self.caps[m]

    def violation(self, m: int, u) -> float:
        """u 对阶段 m 约束的最大违反量（0 表示可行）"""
        c, C, alpha = self.stage(m)
        u = np.asarray(u, dtype=float)
        return float(max(0.0, c @ u - C, np.max(u - alpha, initial=0.0), np.max(-u, initial=0.0)))

    def feasible(self, m: int, u, tol: float = 1e-9) -> bool:
        return self.violation(m, u) <= tol


@dataclass(frozen=True, eq=False)
class LinearExposureModel:
    """重规划阶段 l 的曝光线性模型

    X / Y / W 在 matrix-free 模式下为 None，只通过 table 做矩阵-向量乘
    """
    l: int
    n: int
    K: int                    # 剩余阶段数 M - l
    mode: str
    table: ResponseTable
    constraints: ConstraintSet
    Z: scipy.sparse.csr_matrix
    z: np.ndarray
    X: np.ndarray | None = None
    Y: np.ndarray | None = None
    W: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.n * self.K

    @property
    def materialized(self) -> bool:
        return self.X is not None

    def blocks(self, v) -> np.ndarray:
        """堆叠向量 → (K, n)"""
        return np.asarray(v, dtype=float).reshape(self.K, self.n)

    # ---- 累计形式（cumulative）的矩阵-向量乘 ----
    def _cum_X(self, u_hat) -> np.ndarray:
        u = self.blocks(u_hat)
        d = np.diff(u, axis=0, prepend=0.0)
        out = np.zeros((self.K, self.n))
        for j in range(self.K):
            for i in range(j + 1):
                if np.any(d[i]):
                    out[j] += self.table.gamma_mv(j - i + 1, d[i])
        return out

    def _cum_XT(self, y) -> np.ndarray:
        y = self.blocks(y)
        # X = Σ Γ_{j-i+1} d_i，d = D u  ⇒  X^T y = D^T G^T y
        g = np.zeros((self.K, self.n))
        for i in range(self.K):
            for j in range(i, self.K):
                if np.any(y[j]):
                    g[i] += self.table.gamma_mv(j - i + 1, y[j], transpose=True)
        out = g.copy()
        out[:-1] -= g[1:]
        return out

    def _row_diff(self, cum: np.ndarray) -> np.ndarray:
        return np.diff(cum, axis=0, prepend=0.0)

    def _row_diff_T(self, y: np.ndarray) -> np.ndarray:
        out = y.copy()
        out[:-1] -= y[1:]
        return out

    # ---- 对外接口 ----
    def apply_X(self, u_hat) -> np.ndarray:
        if self.materialized:
            return self.X @ np.asarray(u_hat, dtype=float)
        cum = self._cum_X(u_hat)
        if self.mode == PER_STAGE:
            cum = self._row_diff(cum)
        return cum.ravel()

    def apply_XT(self, y) -> np.ndarray:
        if self.materialized:
            return self.X.T @ np.asarray(y, dtype=float)
        y = self.blocks(y)
        if self.mode == PER_STAGE:
            y = self._row_diff_T(y)
        return self._cum_XT(y).ravel()

    def offset(self, mu, x_l) -> np.ndarray:
        """Y μ + W x_l"""
        mu = np.asarray(mu, dtype=float)
        x_l = np.asarray(x_l, dtype=float)
        if self.materialized:
            return self.Y @ mu + self.W @ x_l
        cum = np.vstack([
            self.table.gamma_mv(j + 1, mu) + self.table.upsilon_mv(j + 1, x_l)
            for j in range(self.K)
        ])
        if self.mode == PER_STAGE:
            cum = self._row_diff(cum)
        return cum.ravel()

    def as_operator(self) -> LinearOperator:
        """X 的 LinearOperator 形式（matrix-free 优化器使用）"""
        return LinearOperator((self.size, self.size), matvec=self.apply_X, rmatvec=self.apply_XT, dtype=float)

    def dense_X(self) -> np.ndarray:
        """需要显式矩阵时（如 LP）按列物化 X"""
        if self.materialized:
            return self.X
        logger.warning(f"[曝光] matrix-free 模型按列物化 X（{self.size}×{self.size}）")
        return np.column_stack([self.apply_X(e) for e in np.eye(self.size)])

    @property
    def prices(self) -> np.ndarray:
        """(K, n) 各剩余阶段的价格"""
        return self.constraints.prices[self.l:]

    @property
    def budgets(self) -> np.ndarray:
        return self.constraints.budgets[self.l:]

    @property
    def caps(self) -> np.ndarray:
        return self.constraints.caps[self.l:]


def _constraint_system(constraints: ConstraintSet, l: int) -> tuple[scipy.sparse.csr_matrix, np.ndarray]:
    """Z_l û ≤ z_l：预算行 c_m^T、上限行 I ≤ α_m、非负行 -I ≤ 0"""
    K = constraints.M - l
    n = constraints.n
    budget_rows = scipy.sparse.block_diag([constraints.prices[m][None, :] for m in range(l, constraints.M)])
    eye = scipy.sparse.identity(n * K, format="csr")
    Z = scipy.sparse.vstack([budget_rows, eye, -eye]).tocsr()
    z = np.concatenate([constraints.budgets[l:], constraints.caps[l:].ravel(), np.zeros(n * K)])
    return Z, z


def build_exposure_model(model: NetworkModel, schedule: StageSchedule, l: int,
                         constraints: ConstraintSet, mode: str = CUMULATIVE,
                         backend: MatrixBackend = DEFAULT_BACKEND) -> LinearExposureModel:
    """构建阶段 l 的块系统 (X_l, Y_l, W_l, Z_l, z_l)

    Γ_k / Υ_k 只依赖 kΔ，按 (model, Δ, M) 缓存，在各重规划阶段间复用
    """
    global _mode_warned
    if not 0 <= l < schedule.M:
        raise DomainError(f"重规划阶段 l={l} 超出 [0, {schedule.M})")
    if mode not in (CUMULATIVE, PER_STAGE):
        raise DomainError(f"未知曝光模式: {mode}")
    if constraints.M != schedule.M or constraints.n != model.n:
        raise DomainError("约束集与模型 / 阶段划分维度不一致")
    if not _mode_warned:
        logger.info("[曝光] 块矩阵公式给出的是 [τ_l, τ_{m+1}] 累计曝光，而目标定义为阶段内曝光；"
                    "cumulative 复现块矩阵，per-stage 遵循定义")
        _mode_warned = True

    n, K = model.n, schedule.M - l
    table = response_table(model, schedule.delta, schedule.M, backend)
    Z, z = _constraint_system(constraints, l)

    if not backend.dense:
        return LinearExposureModel(l, n, K, mode, table, constraints, Z, z)

    G, U = table.gammas, table.upsilons
    X = np.zeros((n * K, n * K))
    for j in range(K):
        for i in range(j + 1):
            block = G[1] if i == j else G[j - i + 1] - G[j - i]
            X[j * n:(j + 1) * n, i * n:(i + 1) * n] = block
    Y = np.vstack([G[j + 1] for j in range(K)])
    W = np.vstack([U[j + 1] for j in range(K)])

    if mode == PER_STAGE:
        D = scipy.sparse.identity(n * K, format="csr") - scipy.sparse.eye(n * K, k=-n, format="csr")
        X, Y, W = D @ X, D @ Y, D @ W

    return LinearExposureModel(l, n, K, mode, table, constraints, Z, z, X=X, Y=Y, W=W)


def mean_exposure(lem: LinearExposureModel, u_hat, mu, x_l, carry=None) -> np.ndarray:
    """Ê = X û + Y μ + W x_l（carry 为每块额外叠加的已实现曝光，默认 0）"""
    u_hat = np.asarray(u_hat, dtype=float)
    if u_hat.shape != (lem.size,):
        raise DomainError(f"û 维度应为 ({lem.size},)，收到 {u_hat.shape}")
    out = lem.apply_X(u_hat) + lem.offset(mu, x_l)
    if carry is not None:
        out = out + np.tile(np.asarray(carry, dtype=float), lem.K)
    return out


def dump_blocks(lem: LinearExposureModel, path) -> int:
    """把 X / Y / W 的非零元写成 CSV（block,row,col,value），返回写出行数"""
    frames = []
    X = lem.dense_X()
    blocks = {"X": X}
    if lem.materialized:
        blocks.update(Y=lem.Y, W=lem.W)
    for name, mat in blocks.items():
        rows, cols = np.nonzero(mat)
        frames.append(pd.DataFrame({"block": name, "row": rows, "col": cols, "value": mat[rows, cols]}))
    df = pd.concat(frames, ignore_index=True)
    df.to_csv(path, index=False, float_format="%.17g")
    return len(df)
