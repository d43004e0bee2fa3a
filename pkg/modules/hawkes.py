"""
Hawkes 过程模块 - 指数核多元 Hawkes 过程
功能：网络模型、精确仿真（Ogata thinning）、条件强度、阶段状态 x_m、曝光计数
"""
import logging
from dataclasses import dataclass

import numpy as np

import config

logger = logging.getLogger(__name__)

# 随机流编号（SeedSequence 的 spawn_key 第一位）
GEN_STREAM = 0        # 合成实例生成
SIM_STREAM = 1        # 事件仿真
RND_STREAM = 2        # RND 基线抽样
VALIDATE_STREAM = 3   # 强度校验实验


class ModelError(ValueError):
    """网络模型参数不满足约束"""


class SingularShiftError(ModelError):
    """ω 与 A 的某个特征值过近，A - ωI 奇异"""


class DomainError(ValueError):
    """时间或窗口超出定义域"""


class ExplosionError(RuntimeError):
    """仿真事件数超过上限（过程爆炸）"""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """按 (seed, stream...) 构造计数器型随机数发生器（Philox）

    同一 (seed, stream) 永远得到同一序列，与线程调度无关。
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def check_shift(A: np.ndarray, omega: float, tol: float | None = None):
    """检查 ω ∉ Spectrum(A)，否则抛 SingularShiftError"""
    tol = config.SPECTRUM_TOL if tol is None else tol
    if A.shape[0] == 0:
        return
    eig = np.linalg.eigvals(A)
    gap = float(np.min(np.abs(eig - omega)))
    if gap <= tol:
        raise SingularShiftError(
            f"ω={omega} 与 A 的特征值距离 {gap:.3e} ≤ {tol:.0e}，"
            f"违反谱条件 ω ∉ Spectrum(A)，A - ωI 不可逆"
        )


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """指数核多元 Hawkes 网络模型

    A[i, j]: 用户 j 的一次事件对用户 i 强度的跳变量
    omega: 衰减率
    mu: 基础外生强度
    B: 曝光矩阵，B[i, j] = 1 表示 i 关注 j，对角线为 1
    """
    A: np.ndarray
    omega: float
    mu: np.ndarray
    B: np.ndarray
    allow_unstable: bool = False

    def __post_init__(self):
        A = _readonly(self.A)
        mu = _readonly(self.mu)
        B = _readonly(self.B)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "omega", float(self.omega))

        n = A.shape[0]
        if A.ndim != 2 or A.shape != (n, n):
            raise ModelError(f"A 必须是方阵，收到 {A.shape}")
        if mu.shape != (n,):
            raise ModelError(f"mu 维度应为 ({n},)，收到 {mu.shape}")
        if B.shape != (n, n):
            raise ModelError(f"B 维度应为 ({n}, {n})，收到 {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(B))):
            raise ModelError("A、mu、B 中存在非有限值")
        if np.any(A < 0) or np.any(mu < 0) or np.any(B < 0):
            raise ModelError("A、mu、B 的所有元素必须非负")
        if not np.all(np.diag(B) == 1.0):
            raise ModelError("B 的对角线必须全为 1")
        if not self.omega > 0:
            raise ModelError(f"omega 必须为正，收到 {self.omega}")

        check_shift(A, self.omega)

        ratio = self.stability_ratio
        if ratio >= 1.0:
            if not self.allow_unstable:
                raise ModelError(
                    f"稳定性比 ρ(A)/ω = {ratio:.4f} ≥ 1，过程非平稳；如确需使用请设置 allow_unstable"
                )
            logger.warning(f"[模型] 接受非平稳模型 ρ(A)/ω = {ratio:.4f}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def spectral_radius(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    @property
    def stability_ratio(self) -> float:
        """ρ(A)/ω，即分支矩阵 A/ω 的谱半径"""
        return self.spectral_radius / self.omega

    def with_mu(self, mu) -> "NetworkModel":
        """返回只替换基础强度的新模型"""
        return NetworkModel(self.A, self.omega, mu, self.B, self.allow_unstable)


@dataclass(frozen=True, eq=False)
class EventSequence:
    """[0, T] 上按时间排序的事件列表 (time, user)，user 从 0 开始"""
    T: float
    n: int
    times: np.ndarray
    users: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        users = np.asarray(self.users, dtype=np.int64)
        if times.shape != users.shape or times.ndim != 1:
            raise DomainError("times 与 users 必须是等长一维数组")
        if times.size:
            if np.any(np.diff(times) < 0):
                raise DomainError("事件时间必须非降")
            if times[0] < 0 or times[-1] > self.T:
                raise DomainError(f"事件时间超出 [0, {self.T}]")
            if users.min() < 0 or users.max() >= self.n:
                raise DomainError(f"用户编号超出 [0, {self.n})")
        times = times.copy()
        users = users.copy()
        times.setflags(write=False)
        users.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def from_records(cls, T: float, n: int, records) -> "EventSequence":
        """由 (time, user) 记录构造；同一时刻按用户编号排序"""
        records = list(records)
        if not records:
            return cls.empty(T, n)
        times = np.array([r[0] for r in records], dtype=float)
        users = np.array([r[1] for r in records], dtype=np.int64)
        order = np.lexsort((users, times))
        return cls(T, n, times[order], users[order])

    @classmethod
    def empty(cls, T: float, n: int) -> "EventSequence":
        return cls(T, n, np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.times.size

    def window(self, t_a: float, t_b: float) -> "EventSequence":
        """取 [t_a, t_b) 内的事件"""
        lo = np.searchsorted(self.times, t_a, side="left")
        hi = np.searchsorted(self.times, t_b, side="left")
        return EventSequence(self.T, self.n, self.times[lo:hi], self.users[lo:hi])

    def counts(self, t_a: float = 0.0, t_b: float | None = None) -> np.ndarray:
        """各用户在 [t_a, t_b) 内的事件数"""
        t_b = self.T if t_b is None else t_b
        sub = self.window(t_a, t_b)
        if t_b >= self.T:
            # 右端点为 T 时把恰好落在 T 的事件也算进去
            tail = self.users[(self.times == self.T)]
            extra = np.bincount(tail, minlength=self.n) if tail.size else 0
            return np.bincount(sub.users, minlength=self.n).astype(float) + extra
        return np.bincount(sub.users, minlength=self.n).astype(float)

    def concat(self, other: "EventSequence") -> "EventSequence":
        """拼接两段不重叠的事件序列（other 在后）"""
        if len(self) and len(other) and other.times[0] < self.times[-1]:
            raise DomainError("拼接的事件序列时间重叠")
        return EventSequence(
            self.T, self.n,
            np.concatenate([self.times, other.times]),
            np.concatenate([self.users, other.users]),
        )


@dataclass(frozen=True)
class StageSchedule:
    """[0, T] 的 M 段等分 τ_0 < … < τ_M"""
    M: int
    T: float

    def __post_init__(self):
        if self.M < 1:
            raise DomainError(f"阶段数 M 必须 ≥ 1，收到 {self.M}")
        if not self.T > 0:
            raise DomainError(f"时间范围 T 必须为正，收到 {self.T}")

    @property
    def delta(self) -> float:
        return self.T / self.M

    @property
    def tau(self) -> np.ndarray:
        tau = np.linspace(0.0, self.T, self.M + 1)
        tau[-1] = self.T
        return tau

    def bounds(self, m: int) -> tuple[float, float]:
        if not 0 <= m < self.M:
            raise DomainError(f"阶段编号 {m} 超出 [0, {self.M})")
        tau = self.tau
        return float(tau[m]), float(tau[m + 1])


def zero_state(n: int) -> np.ndarray:
    """活动开始时的阶段状态 x_0 = 0"""
    return np.zeros(n)


def _check_window(T: float, t_a: float, t_b: float):
    if not (0.0 <= t_a <= t_b <= T):
        raise DomainError(f"窗口 [{t_a}, {t_b}] 不在 [0, {T}] 内")


def intensity_at(model: NetworkModel, events: EventSequence, exo, t: float) -> np.ndarray:
    """条件强度 λ(t) = exo(t) + Σ_{t_k < t} A[:, d_k] e^{-ω(t - t_k)}

    exo: 可调用对象 t -> n 维向量（如 PiecewiseExo）
    """
    if not 0.0 <= t <= events.T:
        raise DomainError(f"t={t} 超出 [0, {events.T}]")
    base = np.asarray(exo(t), dtype=float)
    k = np.searchsorted(events.times, t, side="left")  # 严格 t_k < t
    if k == 0:
        return base.copy()
    weights = np.exp(-model.omega * (t - events.times[:k]))
    load = np.bincount(events.users[:k], weights=weights, minlength=model.n)
    return base + model.A @ load


def state_at(model: NetworkModel, events: EventSequence, x_prev, t_prev: float, t: float) -> np.ndarray:
    """阶段状态递推：x(t) = x_prev e^{-ω(t - t_prev)} + Σ_{t_k∈[t_prev, t)} A[:, d_k] e^{-ω(t - t_k)}"""
    if t < t_prev:
        raise DomainError(f"t={t} 早于 t_prev={t_prev}")
    x_prev = np.asarray(x_prev, dtype=float)
    sub = events.window(t_prev, t)
    x = x_prev * np.exp(-model.omega * (t - t_prev))
    if len(sub):
        weights = np.exp(-model.omega * (t - sub.times))
        x = x + model.A @ np.bincount(sub.users, weights=weights, minlength=model.n)
    return np.maximum(x, 0.0)


def exposure_counts(events: EventSequence, B: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    """窗口内曝光 B · N，N 为各用户事件数"""
    t_a, t_b = window
    _check_window(events.T, t_a, t_b)
    return np.asarray(B, dtype=float) @ events.counts(t_a, t_b)


def empirical_intensity(model: NetworkModel, events: EventSequence, exo, probes) -> np.ndarray:
    """单条实现在探测时间网格上的条件强度，返回 (len(probes), n)"""
    probes = np.asarray(probes, dtype=float)
    out = np.empty((probes.size, model.n))
    for p, t in enumerate(probes):
        out[p] = intensity_at(model, events, exo, t)
    return out


def _fire(rng, lam: np.ndarray, total: float) -> int:
    """按强度比例选择触发事件的用户"""
    cum = np.cumsum(lam)
    i = int(np.searchsorted(cum, rng.random() * total, side="right"))
    return min(i, lam.size - 1)


def _ensure_simulable(model: NetworkModel):
    if model.stability_ratio >= 1.0 and not model.allow_unstable:
        raise ModelError("非平稳模型未设置 allow_unstable，拒绝仿真")


def simulate(model: NetworkModel, controls, schedule: StageSchedule, x_init=None,
             window: tuple[float, float] | None = None, seed: int = 0,
             stream: tuple = (), event_cap: int | None = None) -> EventSequence:
    """分段常数干预下的精确仿真（Ogata thinning）

    每段 [τ_m, τ_{m+1}) 的外生强度为 mu + controls[m]；
    x_init 为 t_a 时刻继承的内生强度，按 e^{-ω(t - t_a)} 衰减。
    两事件之间总强度单调不增，当前强度即为上界。
    """
    _ensure_simulable(model)
    controls = np.asarray(controls, dtype=float)
    if controls.shape != (schedule.M, model.n):
        raise DomainError(f"controls 维度应为 ({schedule.M}, {model.n})，收到 {controls.shape}")
    t_a, t_b = window if window is not None else (0.0, schedule.T)
    _check_window(schedule.T, t_a, t_b)
    cap = config.SIM_EVENT_CAP if event_cap is None else event_cap

    rng = make_rng(seed, SIM_STREAM, *stream)
    x = zero_state(model.n) if x_init is None else np.array(x_init, dtype=float)
    A, omega = model.A, model.omega
    tau = schedule.tau
    times, users = [], []

    t = t_a
    for m in range(schedule.M):
        s0, s1 = max(tau[m], t_a), min(tau[m + 1], t_b)
        if s1 <= s0:
            continue
        if t < s0:
            x *= np.exp(-omega * (s0 - t))
            t = s0
        base = model.mu + controls[m]
        while True:
            total = float(base.sum() + x.sum())
            if total <= 0.0:
                break
            s = t + rng.exponential(1.0 / total)
            if s >= s1:
                break
            x *= np.exp(-omega * (s - t))
            t = s
            lam = base + x
            lam_total = float(lam.sum())
            if rng.random() * total <= lam_total:
                i = _fire(rng, lam, lam_total)
                times.append(s)
                users.append(i)
                x += A[:, i]
                if len(times) > cap:
                    raise ExplosionError(
                        f"事件数超过上限 {cap}（t={s:.4f}，ρ(A)/ω={model.stability_ratio:.3f}），过程可能爆炸"
                    )
        x *= np.exp(-omega * (s1 - t))
        t = s1

    return EventSequence(schedule.T, model.n, np.array(times), np.array(users, dtype=np.int64))


def simulate_function(model: NetworkModel, exo, exo_bound, T: float, x_init=None,
                      window: tuple[float, float] | None = None, seed: int = 0,
                      stream: tuple = (), event_cap: int | None = None) -> EventSequence:
    """一般时变外生强度 exo(t) 下的 thinning 仿真

    exo_bound: exo 在窗口上的逐分量上界（n 维向量），model.mu 不参与
    """
    _ensure_simulable(model)
    t_a, t_b = window if window is not None else (0.0, T)
    _check_window(T, t_a, t_b)
    cap = config.SIM_EVENT_CAP if event_cap is None else event_cap
    bound = float(np.sum(exo_bound))

    rng = make_rng(seed, SIM_STREAM, *stream)
    x = zero_state(model.n) if x_init is None else np.array(x_init, dtype=float)
    A, omega = model.A, model.omega
    times, users = [], []

    t = t_a
    while True:
        total = bound + float(x.sum())
        if total <= 0.0:
            break
        s = t + rng.exponential(1.0 / total)
        if s >= t_b:
            break
        x *= np.exp(-omega * (s - t))
        t = s
        lam = np.asarray(exo(s), dtype=float) + x
        lam_total = float(lam.sum())
        if lam_total > total * (1 + 1e-12):
            raise DomainError(f"exo 在 t={s:.4f} 超出给定上界")
        if rng.random() * total <= lam_total:
            i = _fire(rng, lam, lam_total)
            times.append(s)
            users.append(i)
            x += A[:, i]
            if len(times) > cap:
                raise ExplosionError(f"事件数超过上限 {cap}（t={s:.4f}），过程可能爆炸")

    return EventSequence(T, model.n, np.array(times), np.array(users, dtype=np.int64))
