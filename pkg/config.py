"""
配置管理模块
"""
import os
from dotenv import load_dotenv

load_dotenv()

# 日志
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# 仿真
SIM_EVENT_CAP = int(os.getenv("SIM_EVENT_CAP", str(10**7)))  # 单次仿真事件数上限，超过视为爆炸

# 矩阵后端
DENSE_THRESHOLD = int(os.getenv("DENSE_THRESHOLD", "2000"))  # n 超过此值只允许 matrix-free
KRYLOV_TOL = float(os.getenv("KRYLOV_TOL", "1e-10"))
KRYLOV_MAXITER = int(os.getenv("KRYLOV_MAXITER", "500"))
SPECTRUM_TOL = float(os.getenv("SPECTRUM_TOL", "1e-10"))  # ω 与 A 特征值的最小距离

# 求解器
LP_TOL = float(os.getenv("LP_TOL", "1e-9"))
LP_MAX_ITER = int(os.getenv("LP_MAX_ITER", "50000"))
LP_SIMPLEX_MAX_VARS = int(os.getenv("LP_SIMPLEX_MAX_VARS", "400"))  # 更大的 LP 交给 HiGHS
QP_TOL = float(os.getenv("QP_TOL", "1e-8"))
QP_MAX_ITER = int(os.getenv("QP_MAX_ITER", "20000"))
INF_SURROGATE = float(os.getenv("INF_SURROGATE", "1e12"))  # "无上限" 的替代值

# 启发式基线
PAGERANK_DAMPING = float(os.getenv("PAGERANK_DAMPING", "0.85"))
PAGERANK_TOL = float(os.getenv("PAGERANK_TOL", "1e-10"))
PRP_FLOOR = float(os.getenv("PRP_FLOOR", "1e-6"))
GRD_QUANTA_PER_USER = int(os.getenv("GRD_QUANTA_PER_USER", "100"))  # GRD 每次分配 C_m/(100n)

# 实验
DEFAULT_REPLICATIONS = int(os.getenv("DEFAULT_REPLICATIONS", "10"))
DEFAULT_PROBES = int(os.getenv("DEFAULT_PROBES", "200"))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "2024"))
MAX_WORKERS = int(os.getenv("MAX_WORKERS", "4"))
OUT_DIR = os.getenv("OUT_DIR", "results")

# 合成数据（ω、稀疏度与阈值见合成网络生成规则）
SYNTH_OMEGA = float(os.getenv("SYNTH_OMEGA", "0.01"))
SYNTH_SPARSITY = float(os.getenv("SYNTH_SPARSITY", "0.5"))
SYNTH_B_THRESHOLD = float(os.getenv("SYNTH_B_THRESHOLD", "1e-4"))

# 支持的目标与方法
OBJECTIVES = ["CEM", "MEM", "LES"]
EXPOSURE_MODES = ["cumulative", "per-stage"]

# 每个目标可用的方法（CLL 为闭环求解，其余为基线）
METHODS_BY_OBJECTIVE = {
    "CEM": ["CLL", "OPL", "RND", "PRK", "WEI"],
    "MEM": ["CLL", "OPL", "RND", "WFL", "PRP"],
    "LES": ["CLL", "OPL", "RND", "GRD", "REL"],
}
