"""
Pytest 配置和共享 fixtures

提供测试中使用的共享 fixtures 和配置。
"""

import csv
import os
from pathlib import Path
from typing import Dict, Generator

import numpy as np
import pytest

from esrkit.core.tensor_ops import set_num_threads

PROJECT_ROOT = Path(__file__).parent.parent


@pytest.fixture()
def test_data_dir() -> Path:
    """返回测试数据目录路径"""
    return Path(__file__).parent / "fixtures"


@pytest.fixture()
def rng() -> np.random.Generator:
    """固定种子的随机数生成器"""
    return np.random.default_rng(20250)


@pytest.fixture()
def table1_csv() -> Path:
    """仓库自带的排行榜 CSV"""
    return PROJECT_ROOT / "data" / "table1.csv"


@pytest.fixture()
def printed_scores(test_data_dir: Path) -> Dict[str, Dict[str, str]]:
    """排行榜上打印的分数与名次，按队伍名索引"""
    with open(test_data_dir / "table1_printed_scores.csv", encoding="utf-8", newline="") as f:
        return {row["team"]: row for row in csv.DictReader(f)}


@pytest.fixture(autouse=True)
def _reset_env() -> Generator[None, None, None]:
    """在每个测试前后重置环境变量与引擎线程数"""
    # 保存原始环境变量
    original_env = os.environ.copy()

    yield

    # 恢复原始环境变量
    os.environ.clear()
    os.environ.update(original_env)
    set_num_threads(1)
