"""
模型文件模块
网络模型的结构化文本格式读写、事件序列 CSV 读写

模型文件格式（下标从 0 开始，# 开头为注释）：
    [meta]
    n = 3
    omega = 0.01
    T = 40
    M = 6
    allow_unstable = false
    [A]            i j value
    [mu]           i value
    [B]            i j value（对角线默认为 1，可省略）
    [mu_stage k]   i value（第 k 阶段的外生强度，可选）
"""
import logging
import re
from dataclasses import dataclass

import numpy as np
import pandas as pd

from modules.hawkes import NetworkModel, EventSequence, ModelError

logger = logging.getLogger(__name__)

_SECTION = re.compile(r"^\[\s*([A-Za-z_]+)(?:\s+(\d+))?\s*\]$")


class ModelFileError(ValueError):
    """模型文件格式错误，带行号与字段"""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"第 {line} 行")
        if field is not None:
            where.append(f"字段 {field}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


@dataclass(eq=False)
class ModelBundle:
    model: NetworkModel
    T: float | None = None
    M: int | None = None
    stage_mu: np.ndarray | None = None   # (M, n)


def _number(text: str, line: int, field: str, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise ModelFileError(f"无法解析数值 '{text}'", line, field) from None
    if kind is float and not np.isfinite(value):
        raise ModelFileError(f"数值必须有限，收到 '{text}'", line, field)
    return value


def _index(text: str, n: int, line: int, field: str) -> int:
    i = _number(text, line, field, int)
    if not 0 <= i < n:
        raise ModelFileError(f"下标 {i} 超出 [0, {n})", line, field)
    return i


def _parse_bool(text: str, line: int) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ModelFileError(f"无法解析布尔值 '{text}'", line, "allow_unstable")


def _read_sections(path: str) -> list[tuple[str, int | None, int, list[tuple[int, list[str]]]]]:
    sections = []
    current = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            match = _SECTION.match(text)
            if match:
                current = (match.group(1), int(match.group(2)) if match.group(2) else None, lineno, [])
                sections.append(current)
                continue
            if current is None:
                raise ModelFileError("数据出现在任何 [section] 之前", lineno)
            current[3].append((lineno, text.replace("=", " = ").split()))
    return sections


def ingest_model(path: str) -> ModelBundle:
    """读取并校验模型文件"""
    sections = _read_sections(path)
    meta_sections = [s for s in sections if s[0] == "meta"]
    if not meta_sections:
        raise ModelFileError("缺少 [meta] 段")

    meta = {}
    for lineno, tokens in meta_sections[0][3]:
        if len(tokens) != 3 or tokens[1] != "=":
            raise ModelFileError("meta 行应为 key = value", lineno)
        meta[tokens[0]] = (tokens[2], lineno)
    for key in ("n", "omega"):
        if key not in meta:
            raise ModelFileError(f"[meta] 缺少 {key}", meta_sections[0][2], key)

    n = _number(meta["n"][0], meta["n"][1], "n", int)
    if n < 1:
        raise ModelFileError(f"n 必须 ≥ 1，收到 {n}", meta["n"][1], "n")
    omega = _number(meta["omega"][0], meta["omega"][1], "omega")
    T = _number(meta["T"][0], meta["T"][1], "T") if "T" in meta else None
    M = _number(meta["M"][0], meta["M"][1], "M", int) if "M" in meta else None
    allow_unstable = _parse_bool(*meta["allow_unstable"]) if "allow_unstable" in meta else False

    A = np.zeros((n, n))
    B = np.eye(n)
    mu = np.zeros(n)
    stages = {}
    seen = set()
    for name, k, header_line, rows in sections:
        if name == "meta":
            continue
        if name in ("A", "B"):
            target = A if name == "A" else B
            for lineno, tokens in rows:
                if len(tokens) != 3:
                    raise ModelFileError("应为 'i j value' 三元组", lineno, name)
                i = _index(tokens[0], n, lineno, f"{name}.i")
                j = _index(tokens[1], n, lineno, f"{name}.j")
                field = f"{name}[{i},{j}]"
                value = _number(tokens[2], lineno, field)
                if value < 0:
                    raise ModelFileError(f"元素必须非负，收到 {value}", lineno, field)
                if (name, i, j) in seen:
                    raise ModelFileError("重复的元素", lineno, field)
                seen.add((name, i, j))
                target[i, j] = value
        elif name in ("mu", "mu_stage"):
            if name == "mu_stage" and k is None:
                raise ModelFileError("[mu_stage k] 缺少阶段编号", header_line, "mu_stage")
            vec = mu if name == "mu" else stages.setdefault(k, np.zeros(n))
            label = "mu" if name == "mu" else f"mu_stage {k}"
            for lineno, tokens in rows:
                if len(tokens) != 2:
                    raise ModelFileError("应为 'i value'", lineno, label)
                i = _index(tokens[0], n, lineno, f"{label}.i")
                value = _number(tokens[1], lineno, f"{label}[{i}]")
                if value < 0:
                    raise ModelFileError(f"强度必须非负，收到 {value}", lineno, f"{label}[{i}]")
                vec[i] = value
        else:
            raise ModelFileError(f"未知的段 [{name}]", header_line, name)

    stage_mu = None
    if stages:
        count = M if M is not None else max(stages) + 1
        if max(stages) >= count:
            raise ModelFileError(f"阶段编号 {max(stages)} 超出 M = {count}", None, "mu_stage")
        stage_mu = np.vstack([stages.get(k, np.zeros(n)) for k in range(count)])

    try:
        model = NetworkModel(A, omega, mu, B, allow_unstable=allow_unstable)
    except ModelError as e:
        field = "omega" if "Spectrum" in str(e) or "ω" in str(e) else None
        raise ModelFileError(f"模型校验失败: {e}", None, field) from e

    logger.info(f"[模型] 已读取 {path}: n={n}, ω={omega}, ρ(A)/ω={model.stability_ratio:.4f}")
    return ModelBundle(model, T, M, stage_mu)


def emit_model(path: str, model: NetworkModel, T: float | None = None, M: int | None = None,
               stage_mu=None) -> str:
    """写出模型文件（%.17g，读回后逐位一致）"""
    lines = ["# Hawkes 网络模型", "[meta]", f"n = {model.n}", f"omega = {model.omega:.17g}"]
    if T is not None:
        lines.append(f"T = {T:.17g}")
    if M is not None:
        lines.append(f"M = {int(M)}")
    lines.append(f"allow_unstable = {'true' if model.allow_unstable else 'false'}")

    lines.append("[A]")
    for i, j in zip(*np.nonzero(model.A)):
        lines.append(f"{i} {j} {model.A[i, j]:.17g}")
    lines.append("[mu]")
    for i in np.flatnonzero(model.mu):
        lines.append(f"{i} {model.mu[i]:.17g}")
    lines.append("[B]")
    for i, j in zip(*np.nonzero(model.B)):
        lines.append(f"{i} {j} {model.B[i, j]:.17g}")
    if stage_mu is not None:
        for k, row in enumerate(np.atleast_2d(stage_mu)):
            lines.append(f"[mu_stage {k}]")
            for i in np.flatnonzero(row):
                lines.append(f"{i} {row[i]:.17g}")

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"[模型] 已写出 {path}")
    return path


def write_events(path: str, events: EventSequence) -> str:
    """事件序列写成 time,user CSV"""
    df = pd.DataFrame({"time": events.times, "user": events.users})
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def read_events(path: str, T: float, n: int) -> EventSequence:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"time", "user"} - set(df.columns)
    if missing:
        raise ModelFileError(f"事件文件缺少列: {sorted(missing)}", 1)
    return EventSequence.from_records(T, n, zip(df["time"].astype(float), df["user"].astype(int)))
