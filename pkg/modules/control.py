"""
闭环控制模块
确定性等价（CEC）闭环多阶段规划：每个阶段用观测到的状态重建曝光模型、
求解剩余阶段的开环问题、只执行第一段控制；以及开环 / 启发式的同构执行循环
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from modules import utils
from modules.baselines import HeuristicSpec, allocate
from modules.exposure import (
    ConstraintSet, LinearExposureModel, CUMULATIVE, PER_STAGE, build_exposure_model, mean_exposure,
)
from modules.hawkes import (
    NetworkModel, EventSequence, StageSchedule, DomainError, RND_STREAM,
    make_rng, simulate, state_at, zero_state,
)
from modules.optimizer import ObjectiveSpec, CEM, MEM, solve
from modules.ratesolver import MatrixBackend, DEFAULT_BACKEND, integrated_exp, integrated_psi, psi, shift_matrix

logger = logging.getLogger(__name__)


class PlanningError(RuntimeError):
    """某个阶段的求解没有达到最优"""

    def __init__(self, stage: int, message: str):
        super().__init__(f"阶段 {stage}: {message}")
        self.stage = stage


# ========== 事件来源 ==========

@dataclass
class StageOutcome:
    events: EventSequence   # 本阶段内的事件（均值来源为空）
    counts: np.ndarray      # 各用户在本阶段的事件数
    x_next: np.ndarray      # 下一阶段开始时的状态


class SimulatorSource:
    """在线仿真：阶段 m 用随机流 (replication, m)，不同方法共享同一组随机数"""

    def __init__(self, model: NetworkModel, schedule: StageSchedule, seed: int, replication: int = 0):
        self.model = model
        self.schedule = schedule
        self.seed = seed
        self.replication = replication

    def stage(self, m: int, u_m, x_m) -> StageOutcome:
        t_a, t_b = self.schedule.bounds(m)
        controls = np.zeros((self.schedule.M, self.model.n))
        controls[m] = u_m
        events = simulate(self.model, controls, self.schedule, x_init=x_m, window=(t_a, t_b),
                          seed=self.seed, stream=(self.replication, m))
        x_next = state_at(self.model, events, x_m, t_a, t_b)
        return StageOutcome(events, events.counts(t_a, t_b), x_next)


class RecordedSource:
    """回放已记录的事件日志，控制量不影响事件"""

    def __init__(self, model: NetworkModel, schedule: StageSchedule, events: EventSequence):
        if events.n != model.n:
            raise DomainError(f"事件日志用户数 {events.n} 与模型 {model.n} 不一致")
        self.model = model
        self.schedule = schedule
        self.events = events
        logger.info(f"[闭环] 回放事件日志，共 {len(events)} 条事件")

    def stage(self, m: int, u_m, x_m) -> StageOutcome:
        t_a, t_b = self.schedule.bounds(m)
        # 最后一个阶段包含恰好落在 T 的事件
        sub = self.events.window(t_a, t_b if m < self.schedule.M - 1 else np.inf)
        x_next = state_at(self.model, self.events, x_m, t_a, t_b)
        return StageOutcome(sub, self.events.counts(t_a, t_b), x_next)


class MeanEventSource:
    """无噪声来源：按均值动力学推进，计数取期望值

    x_{m+1} = Ψ(Δ)c + e^{KΔ}x_m - c，E[N] = ∫Ψ c + V(Δ) x_m，c = μ + u_m
    """

    def __init__(self, model: NetworkModel, schedule: StageSchedule):
        self.model = model
        self.schedule = schedule
        delta = schedule.delta
        self._psi = psi(model, delta)
        self._exp = scipy.linalg.expm(shift_matrix(model) * delta)
        self._int_psi = integrated_psi(model, delta)
        self._int_exp = integrated_exp(model, delta)

    def stage(self, m: int, u_m, x_m) -> StageOutcome:
        c = self.model.mu + np.asarray(u_m, dtype=float)
        x_m = np.asarray(x_m, dtype=float)
        x_next = self._psi @ c + self._exp @ x_m - c
        counts = self._int_psi @ c + self._int_exp @ x_m
        return StageOutcome(EventSequence.empty(self.schedule.T, self.model.n), counts, np.maximum(x_next, 0.0))


# ========== 目标 ==========

def stage_objective(spec: ObjectiveSpec, exposure, m: int) -> float:
    """单阶段目标值（越大越好）：CEM (1/n)Σ min(e, β_m)；MEM min_i e；LES -(1/n)‖De - γ_m‖²"""
    e = np.asarray(exposure, dtype=float)
    n = e.size
    if spec.kind == CEM:
        return float(np.minimum(e, spec.beta[m]).sum() / n)
    if spec.kind == MEM:
        return float(e.min())
    r = spec.shaping(n) @ e - spec.gamma[m]
    return float(-(r @ r) / n)


def realized_exposures(events: EventSequence, schedule: StageSchedule, B, mode: str = PER_STAGE) -> np.ndarray:
    """(M, n) 各阶段的已实现曝光；cumulative 模式为 [0, τ_{m+1}] 的累计曝光"""
    B = np.asarray(B, dtype=float)
    rows = []
    for m in range(schedule.M):
        t_a, t_b = schedule.bounds(m)
        start = 0.0 if mode == CUMULATIVE else t_a
        rows.append(B @ events.counts(start, t_b))
    return np.vstack(rows)


def evaluate_realized_objective(events: EventSequence, objective: ObjectiveSpec, schedule: StageSchedule,
                                B, mode: str = PER_STAGE) -> tuple[np.ndarray, float]:
    """由实际发生的事件计算各阶段目标值与总和"""
    exposures = realized_exposures(events, schedule, B, mode)
    values = np.array([stage_objective(objective, exposures[m], m) for m in range(schedule.M)])
    return values, float(values.sum())


# ========== 计划 ==========

@dataclass
class InterventionPlan:
    method: str
    mode: str
    u: np.ndarray                         # (M, n)
    x: np.ndarray                         # (M + 1, n)，x_0 = 0
    predicted_exposure: np.ndarray        # (M, n)
    realized_exposure: np.ndarray         # (M, n)
    objective_stage: np.ndarray           # (M,) 已实现
    predicted_stage: np.ndarray           # (M,) 模型预测
    events: EventSequence
    failed_stage: int | None = None
    message: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.failed_stage is None

    @property
    def objective_total(self) -> float:
        return float(np.sum(self.objective_stage))

    @property
    def predicted_total(self) -> float:
        return float(np.sum(self.predicted_stage))

    def budget_spent(self, constraints: ConstraintSet) -> np.ndarray:
        return np.einsum("mn,mn->m", constraints.prices, self.u)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mode": self.mode,
            "u": self.u,
            "x": self.x,
            "predicted_exposure": self.predicted_exposure,
            "realized_exposure": self.realized_exposure,
            "objective_stage": self.objective_stage,
            "predicted_stage": self.predicted_stage,
            "objective_total": self.objective_total,
            "predicted_total": self.predicted_total,
            "failed_stage": self.failed_stage,
            "message": self.message,
            "events": len(self.events),
            "metadata": self.metadata,
        }

    def save(self, path: str):
        utils.write_json(path, self.to_dict())


def _first_block(lem: LinearExposureModel, u_m) -> np.ndarray:
    u_hat = np.zeros(lem.size)
    u_hat[:lem.n] = u_m
    return u_hat


def _execute(method: str, policy, model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
             schedule: StageSchedule, source, mode: str, backend: MatrixBackend, metadata: dict) -> InterventionPlan:
    """逐阶段执行：建模 → 策略给出 u_m → 来源推进一个阶段 → 观测状态"""
    M, n = schedule.M, model.n
    u = np.zeros((M, n))
    x = np.zeros((M + 1, n))
    predicted = np.zeros((M, n))
    realized = np.zeros((M, n))
    obj_stage = np.zeros(M)
    pred_stage = np.zeros(M)
    events = EventSequence.empty(schedule.T, n)
    cum_counts = np.zeros(n)
    failed, message = None, ""

    x_m = zero_state(n)
    prior = np.zeros(n)
    for m in range(M):
        lem = build_exposure_model(model, schedule, m, constraints, mode, backend)
        carry = model.B @ cum_counts if mode == CUMULATIVE else None
        try:
            u_m = np.asarray(policy(m, lem, x_m, carry, prior), dtype=float)
        except PlanningError as e:
            failed, message = m, str(e)
            logger.error(f"[闭环] {method} 在阶段 {m} 失败: {e}")
            break
        violation = constraints.violation(m, u_m)
        if violation > 1e-9:
            logger.warning(f"[闭环] {method} 阶段 {m} 控制违反约束 {violation:.2e}")

        predicted[m] = mean_exposure(lem, _first_block(lem, u_m), model.mu, x_m, carry)[:n]
        outcome = source.stage(m, u_m, x_m)
        cum_counts = cum_counts + outcome.counts
        stage_exposure = model.B @ outcome.counts
        realized[m] = model.B @ cum_counts if mode == CUMULATIVE else stage_exposure

        u[m] = u_m
        x[m] = x_m
        obj_stage[m] = stage_objective(objective, realized[m], m)
        pred_stage[m] = stage_objective(objective, predicted[m], m)
        events = events.concat(outcome.events)
        logger.debug(f"[闭环] {method} 阶段 {m}: 预测 {pred_stage[m]:.4f} 实现 {obj_stage[m]:.4f}")

        x_m = outcome.x_next
        prior = stage_exposure
    else:
        x[M] = x_m

    meta = {"mode": mode, "M": M, "n": n, "T": schedule.T, "objective": objective.kind}
    meta.update(metadata)
    return InterventionPlan(method, mode, u, x, predicted, realized, obj_stage, pred_stage, events,
                            failed, message, meta)


def _solve_stage(objective, lem, model, x_l, carry):
    report = solve(objective, lem, model.mu, x_l, carry)
    if not report.success:
        raise PlanningError(lem.l, f"求解器状态 {report.status}")
    return report


def open_loop_plan(model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
                   schedule: StageSchedule, l: int = 0, x_l=None, mode: str = PER_STAGE,
                   backend: MatrixBackend = DEFAULT_BACKEND, carry=None) -> np.ndarray:
    """从阶段 l、状态 x_l 出发一次性求出剩余阶段的控制 (M - l, n)"""
    x_l = zero_state(model.n) if x_l is None else np.asarray(x_l, dtype=float)
    lem = build_exposure_model(model, schedule, l, constraints, mode, backend)
    report = _solve_stage(objective, lem, model, x_l, carry)
    return report.controls(model.n)


def closed_loop_run(model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
                    schedule: StageSchedule, source, mode: str = PER_STAGE,
                    backend: MatrixBackend = DEFAULT_BACKEND, seed: int | None = None) -> InterventionPlan:
    """CEC 闭环：每阶段按观测状态重新规划，只执行 v_l"""
    reports = []

    def policy(m, lem, x_m, carry, prior):
        report = _solve_stage(objective, lem, model, x_m, carry)
        reports.append(report.to_dict())
        return report.controls(model.n)[0]

    plan = _execute("CLL", policy, model, objective, constraints, schedule, source, mode, backend,
                    {"seed": seed})
    plan.metadata["solver"] = reports
    logger.info(f"[闭环] CLL 完成: 实现目标 {plan.objective_total:.4f}，预测 {plan.predicted_total:.4f}")
    return plan


def open_loop_run(model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
                  schedule: StageSchedule, source, mode: str = PER_STAGE,
                  backend: MatrixBackend = DEFAULT_BACKEND, seed: int | None = None,
                  controls=None) -> InterventionPlan:
    """OPL：阶段 0 一次性规划，之后不再根据观测调整

    controls: 已求好的 (M, n) 计划，多次重复实验时复用
    """
    if controls is None:
        try:
            controls = open_loop_plan(model, objective, constraints, schedule, 0, None, mode, backend)
        except PlanningError as e:
            logger.error(f"[闭环] OPL 规划失败: {e}")
            raise

    def policy(m, lem, x_m, carry, prior):
        return controls[m]

    plan = _execute("OPL", policy, model, objective, constraints, schedule, source, mode, backend,
                    {"seed": seed})
    logger.info(f"[闭环] OPL 完成: 实现目标 {plan.objective_total:.4f}")
    return plan


def heuristic_run(spec: HeuristicSpec, model: NetworkModel, constraints: ConstraintSet,
                  schedule: StageSchedule, source, mode: str = PER_STAGE,
                  backend: MatrixBackend = DEFAULT_BACKEND, seed: int = 0,
                  replication: int = 0) -> InterventionPlan:
    """启发式基线放进同一个阶段循环执行"""
    def policy(m, lem, x_m, carry, prior):
        rng = make_rng(seed, RND_STREAM, replication, m)
        return allocate(spec, model, constraints, m, x_m, prior_exposure=prior, rng=rng)

    plan = _execute(spec.kind, policy, model, spec.objective, constraints, schedule, source, mode, backend,
                    {"seed": seed, "replication": replication})
    logger.info(f"[闭环] {spec.kind} 完成: 实现目标 {plan.objective_total:.4f}")
    return plan
