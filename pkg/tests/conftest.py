"""
测试公共夹具
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config  # noqa: E402
from modules.exposure import ConstraintSet  # noqa: E402
from modules.hawkes import NetworkModel, StageSchedule  # noqa: E402


@pytest.fixture(autouse=True)
def _out_dir(tmp_path, monkeypatch):
    # 失败实例等输出写到临时目录
    monkeypatch.setattr(config, "OUT_DIR", str(tmp_path / "results"))


@pytest.fixture
def small_model():
    """n=3 的平稳模型，ρ(A)/ω ≈ 0.4"""
    A = np.array([
        [0.020, 0.010, 0.000],
        [0.000, 0.030, 0.010],
        [0.010, 0.000, 0.020],
    ])
    B = np.array([
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 1.0],
    ])
    return NetworkModel(A, 0.1, np.array([0.20, 0.10, 0.15]), B)


@pytest.fixture
def schedule3():
    return StageSchedule(3, 6.0)


@pytest.fixture
def constraints3():
    """3 阶段 × 3 用户，单位价格"""
    return ConstraintSet(
        prices=np.ones((3, 3)),
        budgets=np.array([0.3, 0.2, 0.25]),
        caps=np.full((3, 3), 0.2),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
