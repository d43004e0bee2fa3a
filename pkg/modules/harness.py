"""
实验编排模块
合成实例生成、均值强度校验、活动（campaign）基准实验、级联对预测、闭式解校验与报告输出
"""
import asyncio
import logging
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd
import scipy.linalg
from dotenv import dotenv_values
from scipy.integrate import quad_vec
from scipy.spatial.distance import cosine

import config
from modules import utils
from modules.baselines import HeuristicSpec, random_allocation
from modules.control import (
    SimulatorSource, closed_loop_run, heuristic_run, open_loop_plan, open_loop_run,
    realized_exposures, stage_objective,
)
from modules.exposure import ConstraintSet, CUMULATIVE, PER_STAGE, build_exposure_model, mean_exposure
from modules.hawkes import (
    NetworkModel, StageSchedule, DomainError, GEN_STREAM, VALIDATE_STREAM,
    empirical_intensity, make_rng, simulate, simulate_function,
)
from modules.modelio import ingest_model
from modules.optimizer import ObjectiveSpec, CEM, MEM, LES
from modules.ratesolver import (
    PiecewiseExo, SampledExo, certify_psi, eta_general, eta_piecewise, gamma, psi, shift_matrix, upsilon,
)

logger = logging.getLogger(__name__)

EXO_PROFILES = ["piecewise", "sinusoid", "exponential", "quadratic"]
SWEEP_RUNS = (5, 20, 100)


class SimilarityError(ValueError):
    """零向量的余弦相似度无定义"""


# ========== 合成实例 ==========

@dataclass(eq=False)
class SyntheticInstance:
    model: NetworkModel
    constraints: ConstraintSet
    beta: np.ndarray      # (M, n) CEM 上限
    gamma: np.ndarray     # (M, n) LES 目标
    ratio: float          # 抽到的稳定性比

    def objective(self, kind: str) -> ObjectiveSpec:
        if kind == CEM:
            return ObjectiveSpec(CEM, beta=self.beta)
        if kind == MEM:
            return ObjectiveSpec(MEM)
        return ObjectiveSpec(LES, gamma=self.gamma)


def draw_campaign_parameters(rng, n: int, M: int) -> tuple[ConstraintSet, np.ndarray, np.ndarray]:
    """α ~ U[0, 0.1]，c = 1，C_m ~ (n/10)U[0, 0.1]，β ~ U[0, 1]，γ ~ (n/10)U[0, 1]"""
    caps = rng.uniform(0.0, 0.1, size=(M, n))
    budgets = (n / 10.0) * rng.uniform(0.0, 0.1, size=M)
    beta = rng.uniform(0.0, 1.0, size=(M, n))
    gamma = (n / 10.0) * rng.uniform(0.0, 1.0, size=(M, n))
    return ConstraintSet(np.ones((M, n)), budgets, caps), beta, gamma


def generate_synthetic(n: int, seed: int, M: int = 6, literal_scaling: bool = False,
                       omega: float = config.SYNTH_OMEGA) -> SyntheticInstance:
    """合成网络与活动参数

    μ ~ U[0, 0.1]；a_ij ~ U[0, 0.1] 且随机一半置 0；
    B 由 ρ(A) = r 缩放后的 A 以 1e-4 为阈值得到；
    默认再把 A 缩放到 ρ(A)/ω = r 保证平稳，literal_scaling 时保留 ρ(A) = r
    """
    if n < 2:
        raise DomainError(f"n 必须 ≥ 2，收到 {n}")
    rng = make_rng(seed, GEN_STREAM)
    mu = rng.uniform(0.0, 0.1, size=n)
    A = rng.uniform(0.0, 0.1, size=(n, n))
    A[rng.random((n, n)) < config.SYNTH_SPARSITY] = 0.0
    r = float(rng.uniform(0.0, 1.0))

    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    scaled = A * (r / rho) if rho > 0 else A
    B = (scaled >= config.SYNTH_B_THRESHOLD).astype(float)
    np.fill_diagonal(B, 1.0)

    if literal_scaling:
        model = NetworkModel(scaled, omega, mu, B, allow_unstable=True)
    else:
        model = NetworkModel(scaled * omega, omega, mu, B)

    constraints, beta, gamma_t = draw_campaign_parameters(rng, n, M)
    logger.info(f"[实验] 生成合成实例 n={n} seed={seed} ρ(A)/ω={model.stability_ratio:.4f}")
    return SyntheticInstance(model, constraints, beta, gamma_t, r)


# ========== 外生强度样例 ==========

def make_exo_profile(kind: str, n: int, T: float, seed: int, stages: int = 5, grid: int = 1000):
    """返回 (exo, bound)

    piecewise: 5 段，各段水平 ~ U[0.1, 0.2] 加轻微噪声
    sinusoid / exponential（带噪声衰减）/ quadratic: 均匀网格采样 + 线性插值
    """
    rng = make_rng(seed, VALIDATE_STREAM, EXO_PROFILES.index(kind) if kind in EXO_PROFILES else 99)
    if kind == "piecewise":
        levels = rng.uniform(0.1, 0.2, size=(stages, n)) + rng.normal(0.0, 0.005, size=(stages, n))
        levels = np.maximum(levels, 0.0)
        exo = PiecewiseExo(np.linspace(0.0, T, stages + 1), levels)
        return exo, levels.max(axis=0)

    t = np.linspace(0.0, T, grid + 1)[:, None]
    if kind == "sinusoid":
        phase = rng.uniform(0.0, 2 * np.pi, size=n)
        values = 0.15 + 0.05 * np.sin(4 * np.pi * t / T + phase)
    elif kind == "exponential":
        rate = rng.uniform(1.0, 3.0, size=n)
        values = 0.2 * np.exp(-rate * t / T) + 0.01 * np.abs(rng.normal(size=(grid + 1, n)))
    elif kind == "quadratic":
        values = 0.05 + 0.15 * (t / T - 0.5) ** 2 * 4
        values = np.repeat(values, n, axis=1)
    else:
        raise DomainError(f"未知外生强度类型: {kind}")
    return SampledExo(t.ravel(), values), values.max(axis=0)


def theoretical_rate(model: NetworkModel, exo, probes, quadrature_step: float | None = None) -> np.ndarray:
    """探测点上的理论速率函数 (P, n)"""
    if isinstance(exo, PiecewiseExo):
        return np.vstack([eta_piecewise(model, exo, float(t)) for t in probes])
    step = quadrature_step or (exo.step if isinstance(exo, SampledExo) and exo.step > 0 else 1e-3)
    return np.vstack([eta_general(model, exo, float(t), step) for t in probes])


@dataclass
class RateReport:
    profile: str
    runs: int
    probes: np.ndarray
    theory: np.ndarray       # (P, n)
    mean: np.ndarray         # (P, n)
    std: np.ndarray          # (P, n)
    relative_error: float    # ‖mean - theory‖_F / ‖theory‖_F
    coverage: float          # 网络总强度落在 3 个标准误内的探测点比例

    def to_dict(self) -> dict:
        return asdict(self)


async def _fan_out(fn, items, workers: int | None = None) -> list:
    """在线程池里并发执行 fn(item)，结果按输入顺序返回"""
    sem = asyncio.Semaphore(workers or config.MAX_WORKERS)

    async def one(item):
        async with sem:
            return await asyncio.to_thread(fn, item)

    return await asyncio.gather(*(one(item) for item in items))


def validate_rate(model: NetworkModel, profile: str, runs: int, probes: int = config.DEFAULT_PROBES,
                  T: float = 40.0, seed: int = config.DEFAULT_SEED, exo=None, exo_bound=None) -> RateReport:
    """多次仿真的经验平均强度 vs 理论速率函数"""
    if runs < 1:
        raise DomainError("runs 必须 ≥ 1")
    if exo is None:
        exo, exo_bound = make_exo_profile(profile, model.n, T, seed)
    if isinstance(exo, PiecewiseExo):
        # 仿真按等长阶段切换外生强度
        uniform = np.linspace(0.0, T, exo.levels.shape[0] + 1)
        if not np.allclose(exo.breakpoints, uniform, rtol=0.0, atol=1e-12 * max(T, 1.0)):
            raise DomainError(f"分段外生强度的断点必须等分 [0, {T}]，收到 {exo.breakpoints.tolist()}")
    grid = (np.arange(probes) + 0.5) * T / probes
    base = model.with_mu(np.zeros(model.n))
    theory = theoretical_rate(base, exo, grid)

    def one_run(r):
        stream = (VALIDATE_STREAM, 0, r)
        if isinstance(exo, PiecewiseExo):
            schedule = StageSchedule(exo.levels.shape[0], exo.T)
            events = simulate(base, exo.levels, schedule, seed=seed, stream=stream)
        else:
            events = simulate_function(base, exo, exo_bound, T, seed=seed, stream=stream)
        return empirical_intensity(base, events, exo, grid)

    samples = np.stack(asyncio.run(_fan_out(one_run, range(runs))))
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if runs > 1 else np.zeros_like(mean)

    rel = float(np.linalg.norm(mean - theory) / np.linalg.norm(theory))
    totals = samples.sum(axis=2)
    se = totals.std(axis=0, ddof=1) / np.sqrt(runs) if runs > 1 else np.zeros(probes)
    coverage = float(np.mean(np.abs(totals.mean(axis=0) - theory.sum(axis=1)) <= 3 * se + 1e-12))
    logger.info(f"[校验] {profile} R={runs}: 相对误差 {rel:.4f}，3SE 覆盖率 {coverage:.3f}")
    return RateReport(profile, runs, grid, theory, mean, std, rel, coverage)


def rate_sweep(model: NetworkModel, profile: str, runs_list=SWEEP_RUNS, probes: int = config.DEFAULT_PROBES,
               T: float = 40.0, seed: int = config.DEFAULT_SEED) -> list[RateReport]:
    """不同重复次数下的误差（同一外生强度）"""
    exo, bound = make_exo_profile(profile, model.n, T, seed)
    return [validate_rate(model, profile, R, probes, T, seed, exo, bound) for R in runs_list]


def rate_frame(reports: list[RateReport], users=(0,)) -> pd.DataFrame:
    """绘图数据：profile,runs,t,user,theory,mean,std"""
    frames = []
    for rep in reports:
        for i in users:
            frames.append(pd.DataFrame({
                "profile": rep.profile, "runs": rep.runs, "t": rep.probes, "user": i,
                "theory": rep.theory[:, i], "mean": rep.mean[:, i], "std": rep.std[:, i],
            }))
    return pd.concat(frames, ignore_index=True)


# ========== 活动基准实验 ==========

@dataclass
class ExperimentConfig:
    objective: str = "CEM"
    n: int = 100
    M: int = 6
    T: float = 40.0
    replications: int = config.DEFAULT_REPLICATIONS
    seed: int = config.DEFAULT_SEED
    mode: str = CUMULATIVE
    methods: tuple = ()
    model_path: str | None = None
    literal_scaling: bool = False

    def __post_init__(self):
        if self.objective not in config.OBJECTIVES:
            raise DomainError(f"未知目标: {self.objective}")
        if self.mode not in config.EXPOSURE_MODES:
            raise DomainError(f"未知曝光模式: {self.mode}")
        if not self.methods:
            self.methods = tuple(config.METHODS_BY_OBJECTIVE[self.objective])
        self.methods = tuple(self.methods)
        allowed = config.METHODS_BY_OBJECTIVE[self.objective]
        unknown = [m for m in self.methods if m not in allowed]
        if unknown:
            raise DomainError(f"方法 {unknown} 不适用于 {self.objective}，可选 {allowed}")
        if self.replications < 1:
            raise DomainError("replications 必须 ≥ 1")

    def to_dict(self) -> dict:
        return asdict(self)


_CONFIG_KEYS = {
    "OBJECTIVE": ("objective", str),
    "N": ("n", int),
    "M": ("M", int),
    "T": ("T", float),
    "REPLICATIONS": ("replications", int),
    "SEED": ("seed", int),
    "MODE": ("mode", str),
    "METHODS": ("methods", lambda s: tuple(x.strip() for x in s.split(",") if x.strip())),
    "MODEL_PATH": ("model_path", str),
    "LITERAL_SCALING": ("literal_scaling", lambda s: s.strip().lower() in ("1", "true", "yes")),
}


def load_experiment_config(path: str | None = None, **overrides) -> ExperimentConfig:
    """dotenv 格式的实验配置（KEY=VALUE，键为大写字段名）；命令行参数优先"""
    values = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"配置文件不存在: {path}")
        for key, raw in dotenv_values(path).items():
            if key not in _CONFIG_KEYS:
                logger.warning(f"[实验] 忽略未知配置项 {key}")
                continue
            name, parse = _CONFIG_KEYS[key]
            if raw is not None and raw != "":
                values[name] = parse(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    methods: dict                                  # method -> 统计与原始值
    notes: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)   # 不进入报告主体

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": self.config_hash, "methods": self.methods, "notes": self.notes}

    def mean(self, method: str) -> float:
        return self.methods[method]["mean"]


def _load_instance(cfg: ExperimentConfig):
    if cfg.model_path:
        bundle = ingest_model(cfg.model_path)
        model = bundle.model
        rng = make_rng(cfg.seed, GEN_STREAM, 1)
        constraints, beta, gamma_t = draw_campaign_parameters(rng, model.n, cfg.M)
        return SyntheticInstance(model, constraints, beta, gamma_t, model.stability_ratio)
    return generate_synthetic(cfg.n, cfg.seed, cfg.M, cfg.literal_scaling)


def _run_method(method: str, replication: int, ctx: dict) -> tuple[bool, object]:
    """单个 (方法, 重复) 的执行，失败时返回 (False, 错误信息)"""
    cfg = ctx["cfg"]
    model, constraints, schedule, objective = ctx["model"], ctx["constraints"], ctx["schedule"], ctx["objective"]
    source = SimulatorSource(model, schedule, cfg.seed, replication)
    try:
        if method == "CLL":
            plan = closed_loop_run(model, objective, constraints, schedule, source, cfg.mode, seed=cfg.seed)
        elif method == "OPL":
            if ctx["opl"] is None:
                return False, ctx["opl_error"]
            plan = open_loop_run(model, objective, constraints, schedule, source, cfg.mode,
                                 seed=cfg.seed, controls=ctx["opl"])
        else:
            spec = HeuristicSpec(method, objective)
            plan = heuristic_run(spec, model, constraints, schedule, source, cfg.mode,
                                 seed=cfg.seed, replication=replication)
    except Exception as e:
        logger.error(f"[实验] {method} 第 {replication} 次重复失败: {e}")
        return False, str(e)
    if not plan.success:
        return False, plan.message
    return True, plan


async def _campaign_async(cfg: ExperimentConfig, ctx: dict) -> dict:
    jobs = [(method, r) for r in range(cfg.replications) for method in cfg.methods]
    results = await _fan_out(lambda job: _run_method(job[0], job[1], ctx), jobs)
    return dict(zip(jobs, results))


def run_campaign_experiment(cfg: ExperimentConfig) -> tuple[ExperimentReport, list[dict]]:
    """按方法 × 重复执行活动，同一次重复内各方法共享仿真随机流

    返回 (报告, 整洁 CSV 行)
    """
    started = time.perf_counter()
    instance = _load_instance(cfg)
    schedule = StageSchedule(cfg.M, cfg.T)
    objective = instance.objective(cfg.objective)
    ctx = {"cfg": cfg, "model": instance.model, "constraints": instance.constraints,
           "schedule": schedule, "objective": objective, "opl": None, "opl_error": ""}
    if "OPL" in cfg.methods:
        try:
            ctx["opl"] = open_loop_plan(instance.model, objective, instance.constraints, schedule, 0, None, cfg.mode)
        except Exception as e:
            logger.error(f"[实验] OPL 规划失败: {e}")
            ctx["opl_error"] = str(e)

    logger.info(f"[实验] {cfg.objective} n={instance.model.n} M={cfg.M} T={cfg.T} "
                f"R={cfg.replications} 方法 {','.join(cfg.methods)}")
    results = asyncio.run(_campaign_async(cfg, ctx))

    methods, rows = {}, []
    for method in cfg.methods:
        raw, failures = [], []
        for r in range(cfg.replications):
            ok, payload = results[(method, r)]
            if not ok:
                failures.append({"replication": r, "message": payload})
                continue
            raw.append(payload.objective_total)
            for m in range(cfg.M):
                rows.append({"experiment": cfg.objective, "method": method, "replication": r, "stage": m,
                             "metric": "realized", "value": float(payload.objective_stage[m])})
                rows.append({"experiment": cfg.objective, "method": method, "replication": r, "stage": m,
                             "metric": "predicted", "value": float(payload.predicted_stage[m])})
        mean, std = utils.mean_std(raw)
        methods[method] = {
            "success": not failures,
            "raw": raw,
            "mean": mean,
            "std": std,
            "stderr": std / np.sqrt(len(raw)) if raw else float("nan"),
            "failures": failures,
        }
        logger.info(f"[实验] {method}: {mean:.4f} ± {std:.4f}（{len(raw)}/{cfg.replications} 成功）")

    notes = []
    if cfg.mode == CUMULATIVE:
        notes.append("cumulative 模式：第 m 块为 [τ_0, τ_{m+1}) 内的累计曝光，而非阶段内曝光")
    else:
        notes.append("per-stage 模式：第 m 块为阶段 m 内的曝光 B·E[N(τ_{m+1}) - N(τ_m)]")
    cfg_dict = cfg.to_dict()
    report = ExperimentReport(cfg_dict, utils.config_hash(cfg_dict), methods, notes,
                              timing={"seconds": time.perf_counter() - started})
    return report, rows


def write_experiment_report(report: ExperimentReport, rows: list[dict], out_dir: str = config.OUT_DIR) -> str:
    """报告 JSON、整洁 CSV 与计时（单独文件，不影响报告字节）"""
    stem = os.path.join(out_dir, f"campaign_{report.config['objective']}_{report.config_hash[:12]}")
    utils.write_json(stem + ".json", report.to_dict())
    utils.write_tidy_csv(stem + ".csv", rows)
    utils.write_json(stem + ".timing.json", report.timing)
    return stem + ".json"


# ========== 级联对预测 ==========

@dataclass
class PairDecision:
    stage: int
    choice: str          # "c1" / "c2"
    similarity_c1: float
    similarity_c2: float
    tie: bool = False


def _cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise SimilarityError("向量必须非负")
    if not np.any(a) or not np.any(b):
        raise SimilarityError("零向量的余弦相似度无定义")
    return 1.0 - float(cosine(a, b))


def predict_cascade_pair(u_opt, mu_c1, mu_c2, tol: float = 1e-12) -> list[PairDecision]:
    """逐阶段选择外生强度与最优干预余弦相似度更高的级联；相等时选 c1 并标记"""
    u_opt = np.atleast_2d(np.asarray(u_opt, dtype=float))
    mu_c1 = np.atleast_2d(np.asarray(mu_c1, dtype=float))
    mu_c2 = np.atleast_2d(np.asarray(mu_c2, dtype=float))
    if not (u_opt.shape == mu_c1.shape == mu_c2.shape):
        raise DomainError(f"维度不一致: {u_opt.shape}, {mu_c1.shape}, {mu_c2.shape}")
    decisions = []
    for m in range(u_opt.shape[0]):
        s1 = _cosine_similarity(u_opt[m], mu_c1[m])
        s2 = _cosine_similarity(u_opt[m], mu_c2[m])
        tie = abs(s1 - s2) <= tol
        decisions.append(PairDecision(m, "c1" if tie or s1 > s2 else "c2", s1, s2, tie))
    return decisions


def cascade_stage_values(model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
                         schedule: StageSchedule, mu_stages, mode: str = PER_STAGE) -> np.ndarray:
    """把级联的阶段外生强度当作控制量，求各阶段模型预测目标值"""
    base = model.with_mu(np.zeros(model.n))
    lem = build_exposure_model(base, schedule, 0, constraints, mode)
    E = mean_exposure(lem, np.asarray(mu_stages, dtype=float).ravel(), base.mu, np.zeros(model.n))
    E = E.reshape(schedule.M, model.n)
    return np.array([stage_objective(objective, E[m], m) for m in range(schedule.M)])


def run_cascade_pairs(model: NetworkModel, objective: ObjectiveSpec, constraints: ConstraintSet,
                      schedule: StageSchedule, pairs, mode: str = PER_STAGE) -> dict:
    """μ = 0 下规划最优干预，对每一对级联逐阶段预测哪一个更接近最优

    pairs: [(mu_c1 (M, n), mu_c2 (M, n)), ...]；以模型预测的阶段目标值作为对照
    """
    base = model.with_mu(np.zeros(model.n))
    u_opt = open_loop_plan(base, objective, constraints, schedule, 0, None, mode)
    hits, total, ties, skipped = 0, 0, 0, 0
    rows = []
    for p, (mu_c1, mu_c2) in enumerate(pairs):
        try:
            decisions = predict_cascade_pair(u_opt, mu_c1, mu_c2)
        except SimilarityError as e:
            logger.warning(f"[实验] 第 {p} 对级联跳过: {e}")
            skipped += 1
            continue
        v1 = cascade_stage_values(model, objective, constraints, schedule, mu_c1, mode)
        v2 = cascade_stage_values(model, objective, constraints, schedule, mu_c2, mode)
        for d in decisions:
            truth = "c1" if v1[d.stage] >= v2[d.stage] else "c2"
            hits += int(truth == d.choice)
            ties += int(d.tie)
            total += 1
            rows.append({"pair": p, "stage": d.stage, "choice": d.choice, "truth": truth,
                         "similarity_c1": d.similarity_c1, "similarity_c2": d.similarity_c2, "tie": d.tie})
    accuracy = hits / total if total else float("nan")
    logger.info(f"[实验] 级联对预测准确率 {accuracy:.3f}（{total} 个阶段，{ties} 个平局，跳过 {skipped} 对）")
    return {"accuracy": accuracy, "decisions": rows, "skipped": skipped, "u_opt": u_opt}


def random_cascade_pairs(n: int, M: int, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = make_rng(seed, GEN_STREAM, 2)
    return [(rng.uniform(0.0, 0.1, size=(M, n)), rng.uniform(0.0, 0.1, size=(M, n))) for _ in range(count)]


# ========== 校验套件 ==========

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    threshold: float
    detail: str = ""


def _check_operators(model: NetworkModel, times) -> float:
    """Γ / Υ 与其定义积分的求积结果的最大相对差"""
    worst = 0.0
    K = shift_matrix(model)
    for t in times:
        g_ref, _ = quad_vec(lambda s: model.B @ psi(model, s), 0.0, t, epsabs=1e-13, epsrel=1e-12)
        u_ref, _ = quad_vec(lambda s: model.B @ scipy.linalg.expm(K * s), 0.0, t, epsabs=1e-13, epsrel=1e-12)
        for ref, val in ((g_ref, gamma(model, t)), (u_ref, upsilon(model, t))):
            worst = max(worst, float(np.max(np.abs(ref - val)) / max(1.0, float(np.max(np.abs(ref))))))
    return worst


def _check_exposure(inst: SyntheticInstance, M: int, T: float, runs: int, seed: int, mode: str) -> tuple[float, float]:
    """均值曝光 vs 蒙特卡洛：返回 (最大 |差|/SE, 3SE 内坐标比例)"""
    model, constraints = inst.model, inst.constraints
    schedule = StageSchedule(M, T)
    rng = make_rng(seed, VALIDATE_STREAM, 7)
    controls = np.vstack([random_allocation(rng, *constraints.stage(m)) for m in range(M)])
    lem = build_exposure_model(model, schedule, 0, constraints, mode)
    predicted = mean_exposure(lem, controls.ravel(), model.mu, np.zeros(model.n)).reshape(M, model.n)

    def one_run(r):
        events = simulate(model, controls, schedule, seed=seed, stream=(VALIDATE_STREAM, 1, r))
        return realized_exposures(events, schedule, model.B, mode)

    samples = np.stack(asyncio.run(_fan_out(one_run, range(runs))))
    se = samples.std(axis=0, ddof=1) / np.sqrt(runs)
    z = np.abs(samples.mean(axis=0) - predicted) / np.maximum(se, 1e-12)
    return float(z.max()), float(np.mean(z <= 3.0))


def run_certification(seed: int = config.DEFAULT_SEED, models: int = 20, mc_runs: int = 5000,
                      out_dir: str | None = None) -> list[CheckResult]:
    """闭式解校验：更新方程残差、Γ/Υ 求积、两条速率路径一致性、均值曝光 vs 蒙特卡洛"""
    results = []
    residual_rows = []
    worst_renewal, worst_ops, worst_paths = 0.0, 0.0, 0.0
    for k in range(models):
        n = 2 + k % 9
        inst = generate_synthetic(n, seed + k, M=4)
        T = 40.0
        rows = certify_psi(inst.model, [T / 4, T / 2, T])
        residual_rows.extend({"model": k, "t": t, "residual": r} for t, r in rows)
        worst_renewal = max(worst_renewal, max(r for _, r in rows))
        worst_ops = max(worst_ops, _check_operators(inst.model, [T / 2, T]))
        if k < 10:
            exo, _ = make_exo_profile("piecewise", n, T, seed + k)
            base = inst.model.with_mu(np.zeros(n))
            for t in (T / 3, float(exo.breakpoints[2]), 2 * T / 3, T):
                a = eta_piecewise(base, exo, t)
                b = eta_general(base, exo, t, 1e-3 * T)
                worst_paths = max(worst_paths, float(np.max(np.abs(a - b))))

    results.append(CheckResult("renewal", worst_renewal <= 1e-5, worst_renewal, 1e-5))
    results.append(CheckResult("operators", worst_ops <= 1e-8, worst_ops, 1e-8))
    results.append(CheckResult("rate_paths", worst_paths <= 1e-6, worst_paths, 1e-6))

    inst = generate_synthetic(3, seed, M=3)
    for mode in (PER_STAGE, CUMULATIVE):
        z, frac = _check_exposure(inst, 3, 40.0, mc_runs, seed, mode)
        results.append(CheckResult(f"exposure_{mode}", z <= 3.0, z, 3.0, f"3SE 内比例 {frac:.3f}"))

    for res in results:
        flag = "通过" if res.passed else "未通过"
        logger.info(f"[校验] {res.name}: {flag}，最大值 {res.worst:.3e}（阈值 {res.threshold:.0e}）{res.detail}")
    if out_dir:
        utils.write_frame(os.path.join(out_dir, "certify_residuals.csv"), pd.DataFrame(residual_rows))
        cfg = {"command": "certify", "seed": seed, "models": models, "mc_runs": mc_runs}
        utils.write_json(os.path.join(out_dir, "certify.json"),
                         utils.stamped(cfg, checks=[asdict(r) for r in results]))
    return results
