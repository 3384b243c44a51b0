"""
挑战赛评分模块

子赛道分数 score = exp(2·value/baseline)，越低越好；
总分为运行时间/FLOPs/参数量三项的加权和，默认权重 0.7/0.15/0.15。
只有同时满足验证集与测试集 PSNR 门槛的记录参与排名。
"""

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pydantic
from loguru import logger
from rich.console import Console
from rich.table import Table

from esrkit.exceptions import ScoringError
from esrkit.models.config import ScoringConfig
from esrkit.models.records import Baseline, MetricRecord, ScoreReport

DEFAULT_WEIGHTS: Tuple[float, float, float] = (0.7, 0.15, 0.15)

# CSV 列名 → MetricRecord 字段
CSV_COLUMNS: Dict[str, str] = {
    "team": "team",
    "psnr_val": "psnr_val",
    "psnr_test": "psnr_test",
    "runtime_val_ms": "runtime_val",
    "runtime_test_ms": "runtime_test",
    "params_M": "params",
    "flops_G": "flops",
}
OPTIONAL_COLUMNS: Dict[str, str] = {"runtime_avg_ms": "runtime_avg"}

# 打印的平均运行时间与 val/test 均值的允许差（舍入误差）
AVG_RUNTIME_TOLERANCE = 1e-3


def metric_score(value: float, baseline_value: float) -> float:
    """
    单项指标分数 exp(2·value/baseline)

    Args:
        value: 指标值
        baseline_value: 基线指标值

    Returns:
        分数，value 等于基线时为 e²

    Raises:
        ScoringError: 输入不为正
    """
    if value <= 0 or baseline_value <= 0:
        raise ScoringError(f"指标与基线必须为正: value={value}, baseline={baseline_value}")
    return math.exp(2.0 * value / baseline_value)


def _check_weights(weights: Sequence[float]) -> None:
    if len(weights) != 3:
        raise ScoringError(f"需要 3 个权重，实际 {len(weights)} 个")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ScoringError(f"权重必须非负且和为 1: {tuple(weights)}")


def final_score(
    s_runtime: float,
    s_flops: float,
    s_params: float,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> float:
    """
    加权总分 w1·s_runtime + w2·s_flops + w3·s_params

    Raises:
        ScoringError: 分数不为正或权重不合法
    """
    _check_weights(weights)
    if min(s_runtime, s_flops, s_params) <= 0:
        raise ScoringError("子赛道分数必须为正")
    w_runtime, w_flops, w_params = weights
    return w_runtime * s_runtime + w_flops * s_flops + w_params * s_params


def baseline_from_config(config: ScoringConfig) -> Baseline:
    """从评分配置构造基线"""
    return Baseline(
        runtime=config.baseline_runtime,
        params=config.baseline_params,
        flops=config.baseline_flops,
        psnr_val=config.psnr_val_threshold,
        psnr_test=config.psnr_test_threshold,
    )


def is_eligible(record: MetricRecord, baseline: Baseline) -> bool:
    """是否同时满足验证集与测试集 PSNR 门槛"""
    return record.psnr_val >= baseline.psnr_val and record.psnr_test >= baseline.psnr_test


def competition_rank(values: Dict[str, float]) -> Dict[str, int]:
    """
    竞赛式排名（值越小越靠前，并列取最小名次，后续名次跳过）

    Args:
        values: 名称到取值的映射

    Returns:
        名称到名次（1 起）的映射
    """
    ordered = sorted(values.values())
    first_index: Dict[float, int] = {}
    for idx, value in enumerate(ordered, start=1):
        first_index.setdefault(value, idx)
    return {name: first_index[value] for name, value in values.items()}


def rank(
    records: Iterable[MetricRecord],
    baseline: Optional[Baseline] = None,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> List[ScoreReport]:
    """
    计算全部记录的分数并排名

    主赛道按总分升序，总分相同时依次按运行时间分数、队伍名排序；
    子赛道名次按各自分数做竞赛式排名。不合格记录不分配任何名次。

    Args:
        records: 排行榜记录
        baseline: 评分基线
        weights: (运行时间, FLOPs, 参数量) 权重

    Returns:
        合格记录按名次在前，不合格记录按输入顺序在后

    Raises:
        ScoringError: 队伍名重复或权重不合法
    """
    baseline = baseline or Baseline()
    _check_weights(weights)
    records = list(records)

    seen = set()
    for record in records:
        if record.team in seen:
            raise ScoringError(f"队伍名重复: {record.team}")
        seen.add(record.team)

    rows: List[Dict] = []
    for record in records:
        runtime = record.runtime_avg if record.runtime_avg is not None else record.runtime_mean
        s_runtime = metric_score(runtime, baseline.runtime)
        s_params = metric_score(record.params, baseline.params)
        s_flops = metric_score(record.flops, baseline.flops)
        rows.append(
            {
                "team": record.team,
                "score_runtime": s_runtime,
                "score_params": s_params,
                "score_flops": s_flops,
                "score_final": final_score(s_runtime, s_flops, s_params, weights),
                "eligible": is_eligible(record, baseline),
                "record": record,
            }
        )

    eligible = [r for r in rows if r["eligible"]]
    eligible.sort(key=lambda r: (r["score_final"], r["score_runtime"], r["team"]))
    for position, row in enumerate(eligible, start=1):
        row["rank"] = position
    for metric in ("runtime", "params", "flops"):
        sub = competition_rank({r["team"]: r[f"score_{metric}"] for r in eligible})
        for row in eligible:
            row[f"rank_{metric}"] = sub[row["team"]]

    ineligible = [r for r in rows if not r["eligible"]]
    for row in ineligible:
        logger.debug(f"{row['team']} 未达到 PSNR 门槛，不参与排名")
    logger.info(f"评分完成: {len(eligible)} 条合格记录, {len(ineligible)} 条不合格记录")
    return [ScoreReport(**row) for row in eligible + ineligible]


def load_records(path: Union[str, Path]) -> List[MetricRecord]:
    """
    从 CSV 读取排行榜记录

    必需列见 CSV_COLUMNS，可选列 runtime_avg_ms 为打印的平均运行时间；
    缺省时使用 val/test 均值。

    Args:
        path: CSV 文件路径

    Returns:
        记录列表

    Raises:
        ScoringError: 表头缺列、数值无法解析或取值不合法
        OSError: 文件无法读取
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [col for col in CSV_COLUMNS if col not in header]
        if missing:
            raise ScoringError(f"CSV 表头缺少列: {missing}")

        records = []
        for line_no, row in enumerate(reader, start=2):
            data: Dict[str, object] = {"team": (row["team"] or "").strip()}
            try:
                for column, fld in CSV_COLUMNS.items():
                    if fld != "team":
                        data[fld] = float(row[column])
                for column, fld in OPTIONAL_COLUMNS.items():
                    if column in header and (row.get(column) or "").strip():
                        data[fld] = float(row[column])
            except (TypeError, ValueError) as e:
                raise ScoringError(f"{path.name} 第 {line_no} 行数值无法解析: {e}") from e
            try:
                record = MetricRecord(**data)
            except pydantic.ValidationError as e:
                raise ScoringError(f"{path.name} 第 {line_no} 行取值不合法: {e.errors()[0]['msg']}") from e
            if abs(record.runtime_avg - record.runtime_mean) > AVG_RUNTIME_TOLERANCE:
                logger.warning(
                    f"{record.team}: 平均运行时间 {record.runtime_avg} 与 val/test 均值 "
                    f"{record.runtime_mean:.4f} 不一致，按给定平均值评分"
                )
            records.append(record)

    logger.info(f"从 {path} 读取 {len(records)} 条记录")
    return records


def format_score(value: float) -> str:
    """
    排行榜风格的分数格式

    小于 1000 保留两位小数，否则使用三位有效数字的科学计数法（如 9.02e3）。
    """
    if value < 1000:
        return f"{value:.2f}"
    mantissa, exponent = f"{value:.2e}".split("e")
    return f"{mantissa}e{int(exponent)}"


def reports_to_dicts(reports: Sequence[ScoreReport]) -> List[Dict]:
    """转换为可 JSON 序列化的字典列表（不含原始记录）"""
    return [r.model_dump(exclude={"record"}) for r in reports]


def render_table(reports: Sequence[ScoreReport], console: Optional[Console] = None) -> None:
    """
    以对齐的文本表格输出评分结果

    Args:
        reports: 评分结果
        console: rich 控制台，默认输出到 stdout
    """
    console = console or Console()

    def sub(score: float, idx: Optional[int]) -> str:
        return format_score(score) + (f" ({idx})" if idx is not None else "")

    table = Table(title="ESR 评分", show_lines=False)
    table.add_column("名次", justify="right")
    table.add_column("队伍")
    table.add_column("PSNR val/test", justify="right")
    table.add_column("运行时间 [ms]", justify="right")
    table.add_column("参数量 [M]", justify="right")
    table.add_column("FLOPs [G]", justify="right")
    table.add_column("运行时间分", justify="right")
    table.add_column("参数量分", justify="right")
    table.add_column("FLOPs 分", justify="right")
    table.add_column("总分", justify="right")
    for r in reports:
        rec = r.record
        table.add_row(
            str(r.rank) if r.rank is not None else "-",
            r.team,
            f"{rec.psnr_val:.2f}/{rec.psnr_test:.2f}",
            f"{rec.runtime_avg:.3f}",
            f"{rec.params:.3f}",
            f"{rec.flops:.2f}",
            sub(r.score_runtime, r.rank_runtime),
            sub(r.score_params, r.rank_params),
            sub(r.score_flops, r.rank_flops),
            format_score(r.score_final),
        )
    console.print(table)
