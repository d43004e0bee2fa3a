"""
工具函数模块
"""
import dataclasses
import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# 整洁 CSV 的列
TIDY_COLUMNS = ["experiment", "method", "replication", "stage", "metric", "value"]


def to_jsonable(obj):
    """把 numpy 数组 / 标量、dataclass、元组递归转成 JSON 可序列化对象"""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(cfg) -> str:
    """配置的 sha256（规范化 JSON），写进每份报告"""
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def stamped(cfg: dict, **body) -> dict:
    """报告主体加上 config 与 config_hash"""
    return {"config": cfg, "config_hash": config_hash(cfg), **body}


def _ensure_dir(path: str):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)


def write_json(path: str, obj) -> str:
    """写 JSON（键排序，相同内容得到相同字节）"""
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(obj), f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")
    logger.info(f"[输出] 已写出 {path}")
    return path


def read_json(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_tidy_csv(path: str, rows: list[dict]) -> str:
    """写 experiment,method,replication,stage,metric,value 格式的绘图数据"""
    _ensure_dir(path)
    df = pd.DataFrame(rows, columns=TIDY_COLUMNS)
    df.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"[输出] 已写出 {path}（{len(df)} 行）")
    return path


def write_frame(path: str, df: pd.DataFrame) -> str:
    _ensure_dir(path)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def mean_std(values) -> tuple[float, float]:
    """均值与样本标准差（单个值时标准差为 0）"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan"), float("nan")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def format_summary(title: str, rows: list[tuple[str, str]]) -> str:
    """控制台摘要：━━━━ 标题 ━━━━ 加树形条目"""
    lines = [f"━━━━ **{title}** ━━━━"]
    for i, (key, value) in enumerate(rows):
        branch = "└" if i == len(rows) - 1 else "├"
        lines.append(f"{branch} {key}: {value}")
    return "\n".join(lines)
