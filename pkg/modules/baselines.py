"""
启发式基线模块
RND / PRK / WEI / WFL / PRP / GRD / REL 七种逐阶段分配策略（OPL 由 control.open_loop_run 执行），
共享同一个预算再分配循环
"""
import heapq
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse

import config
from modules.exposure import ConstraintSet
from modules.hawkes import NetworkModel, DomainError
from modules.optimizer import ObjectiveSpec, CEM, MEM, LES

logger = logging.getLogger(__name__)

RND = "RND"
PRK = "PRK"
WEI = "WEI"
WFL = "WFL"
PRP = "PRP"
GRD = "GRD"
REL = "REL"

# 各启发式适用的目标
COMPATIBLE = {
    RND: (CEM, MEM, LES),
    PRK: (CEM,),
    WEI: (CEM,),
    WFL: (MEM,),
    PRP: (MEM,),
    GRD: (LES,),
    REL: (LES,),
}

_EPS = 1e-9


class ConvergenceError(RuntimeError):
    """PageRank 幂迭代未收敛"""


@dataclass(frozen=True, eq=False)
class HeuristicSpec:
    kind: str
    objective: ObjectiveSpec
    damping: float = config.PAGERANK_DAMPING

    def __post_init__(self):
        if self.kind not in COMPATIBLE:
            raise DomainError(f"未知基线: {self.kind}")
        if self.objective.kind not in COMPATIBLE[self.kind]:
            raise DomainError(f"基线 {self.kind} 不适用于目标 {self.objective.kind}")
        if not 0.0 < self.damping < 1.0:
            raise DomainError(f"damping 必须在 (0, 1) 内，收到 {self.damping}")


def pagerank(B, damping: float = config.PAGERANK_DAMPING, tol: float = config.PAGERANK_TOL,
             max_iter: int = 1000) -> np.ndarray:
    """B 去掉对角线后的无权邻接图上的 PageRank（B[i, j] = 1 即 i → j）

    出度为 0 的节点均匀传送；L1 误差 < tol 停止
    """
    G = scipy.sparse.csr_matrix(np.asarray(B, dtype=float) > 0, dtype=float)
    G.setdiag(0.0)
    G.eliminate_zeros()
    n = G.shape[0]
    out = np.asarray(G.sum(axis=1)).ravel()
    dangling = out == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, out))
    P = scipy.sparse.diags(inv) @ G          # 行归一化转移矩阵
    PT = P.T.tocsr()

    r = np.full(n, 1.0 / n)
    for it in range(max_iter):
        r_new = damping * (PT @ r + r[dangling].sum() / n) + (1.0 - damping) / n
        err = float(np.abs(r_new - r).sum())
        r = r_new
        if err < tol:
            logger.debug(f"[基线] PageRank 在 {it + 1} 次迭代后收敛")
            return r / r.sum()
    raise ConvergenceError(f"PageRank 幂迭代 {max_iter} 次未收敛")


def redistribute(scores, prices, budget: float, caps, tol: float = _EPS) -> np.ndarray:
    """按得分比例分配预算，超过上限的部分截断后在其余用户中继续按比例分配

    每轮至少有一个用户达到上限，或预算用尽，所以最多 n 轮
    """
    scores = np.asarray(scores, dtype=float)
    prices = np.asarray(prices, dtype=float)
    caps = np.asarray(caps, dtype=float)
    if np.any(scores < 0):
        raise DomainError("得分必须非负")
    n = scores.size
    u = np.zeros(n)
    active = (scores > 0) & (caps > 0)
    remaining = float(budget)
    for _ in range(n + 1):
        if remaining <= tol or not active.any():
            break
        idx = np.flatnonzero(active)
        w = scores[idx]
        unit_cost = float(prices[idx] @ w)
        if unit_cost <= 0.0:
            # 剩下的都是零价格用户
            u[idx] = caps[idx]
            break
        proposal = u[idx] + (remaining / unit_cost) * w
        hit = proposal >= caps[idx]
        u[idx] = np.minimum(proposal, caps[idx])
        active[idx[hit]] = False
        remaining = float(budget) - float(prices @ u)
        if not hit.any():
            break
    return u


def water_filling(levels, prices, budget: float, caps, tol: float = 1e-12) -> np.ndarray:
    """注水：u_i = clip(L - e_i, 0, α_i)，二分水位 L 使 c^T u = C

    水位相同的用户同时按相同速率注水
    """
    levels = np.asarray(levels, dtype=float)
    prices = np.asarray(prices, dtype=float)
    caps = np.asarray(caps, dtype=float)

    def spend(L):
        return float(prices @ np.clip(L - levels, 0.0, caps))

    full = caps.copy()
    if prices @ full <= budget:
        return full
    lo = float(levels.min())
    hi = float(np.max(levels + caps))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if spend(mid) > budget:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
    return np.clip(lo - levels, 0.0, caps)


def greedy_quanta(gaps, prices, budget: float, caps, quanta_per_user: int = config.GRD_QUANTA_PER_USER) -> np.ndarray:
    """按剩余差距从大到小，每次分配一个预算量子 C/(quanta·n)，直到预算用尽或全部封顶"""
    gaps = np.asarray(gaps, dtype=float)
    prices = np.asarray(prices, dtype=float)
    caps = np.asarray(caps, dtype=float)
    n = gaps.size
    u = np.zeros(n)
    if budget <= 0:
        u[(prices == 0)] = caps[(prices == 0)]
        return u
    quantum = budget / (quanta_per_user * n)
    remaining = float(budget)
    heap = [(-gaps[i], i) for i in range(n) if caps[i] > 0]
    heapq.heapify(heap)
    while heap and remaining > _EPS * budget:
        neg_gap, i = heapq.heappop(heap)
        if prices[i] == 0:
            u[i] = caps[i]
            continue
        step = min(quantum, remaining) / prices[i]
        step = min(step, caps[i] - u[i])
        u[i] += step
        remaining -= step * prices[i]
        if u[i] < caps[i] - _EPS:
            heapq.heappush(heap, (neg_gap + step, i))
    return u


def random_allocation(rng, prices, budget: float, caps) -> np.ndarray:
    """[0, α] 上逐分量均匀抽样，超预算时等比缩回预算面"""
    caps = np.asarray(caps, dtype=float)
    u = rng.uniform(0.0, 1.0, size=caps.size) * caps
    spend = float(np.asarray(prices, dtype=float) @ u)
    if spend > budget:
        u *= budget / spend if spend > 0 else 0.0
    return u


def allocate(spec: HeuristicSpec, model: NetworkModel, constraints: ConstraintSet, m: int,
             x_m, prior_exposure=None, rng=None) -> np.ndarray:
    """阶段 m 的启发式分配 u_m

    x_m: 阶段开始时的状态；prior_exposure: 上一阶段的已实现曝光（WFL / PRP 使用）
    rng: RND 使用的随机数发生器
    """
    prices, budget, caps = constraints.stage(m)
    x_m = np.asarray(x_m, dtype=float)
    prior = np.zeros(model.n) if prior_exposure is None else np.asarray(prior_exposure, dtype=float)
    kind = spec.kind

    if kind == RND:
        if rng is None:
            raise DomainError("RND 需要随机数发生器")
        return random_allocation(rng, prices, budget, caps)
    if kind == PRK:
        r = pagerank(model.B, spec.damping)
        return redistribute(np.maximum((caps - x_m) * r, 0.0), prices, budget, caps)
    if kind == WEI:
        q = model.A.sum(axis=0)              # q^i = Σ_j a_ji
        return redistribute(np.maximum((caps - x_m) * q, 0.0), prices, budget, caps)
    if kind == WFL:
        return water_filling(prior, prices, budget, caps)
    if kind == PRP:
        return redistribute(1.0 / (prior + config.PRP_FLOOR), prices, budget, caps)

    gap = spec.objective.gamma[m] - x_m
    if kind == GRD:
        return greedy_quanta(gap, prices, budget, caps)
    return redistribute(np.maximum(gap, 0.0), prices, budget, caps)
