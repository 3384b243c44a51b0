"""
CLI 输出与参数解析辅助函数
"""

import json
import math
import re
from typing import Any, Optional, Tuple

import typer
from rich.console import Console
from rich.table import Table

from esrkit.exceptions import ValidationError
from esrkit.models.profile import ProfileReport

_HW_PATTERN = re.compile(r"^\s*(\d+)\s*[xX×]\s*(\d+)\s*$")


def parse_hw(text: Optional[str]) -> Optional[Tuple[int, int]]:
    """
    解析 HxW 形式的尺寸，例如 256x256

    Raises:
        ValidationError: 格式错误或尺寸不为正
    """
    if text is None:
        return None
    match = _HW_PATTERN.match(text)
    if not match:
        raise ValidationError(f"尺寸格式应为 HxW（例如 256x256）: {text!r}")
    h, w = int(match.group(1)), int(match.group(2))
    if h < 1 or w < 1:
        raise ValidationError(f"尺寸必须为正: {text!r}")
    return h, w


def parse_thresholds(text: Optional[str]) -> Optional[Tuple[float, float]]:
    """解析 "验证集,测试集" 形式的 PSNR 门槛"""
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValidationError(f"--thresholds 需要两个数值，用逗号分隔: {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError as e:
        raise ValidationError(f"--thresholds 数值无法解析: {text!r}") from e


def _json_default(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"无法序列化为 JSON: {type(value).__name__}")


def _replace_inf(value: Any) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _replace_inf(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_replace_inf(v) for v in value]
    return value


def emit_json(data: Any) -> None:
    """向 stdout 输出单个键有序的 JSON 文档（无穷大写作字符串 "inf"）"""
    typer.echo(
        json.dumps(_replace_inf(data), sort_keys=True, ensure_ascii=False, default=_json_default)
    )


def render_profile(report: ProfileReport, console: Optional[Console] = None) -> None:
    """以表格输出逐节点的参数量与 FLOPs，并附汇总"""
    console = console or Console()
    h, w = report.input_size
    table = Table(title=f"{report.model} @ {h}×{w}")
    table.add_column("节点")
    table.add_column("类型")
    table.add_column("输出形状", justify="right")
    table.add_column("参数量", justify="right")
    table.add_column("FLOPs", justify="right")
    for cost in report.nodes:
        table.add_row(
            cost.node,
            cost.kind,
            "×".join(str(d) for d in cost.out_shape),
            f"{cost.params:,}",
            f"{cost.flops:,}",
        )
    table.add_row("合计", "", "", f"{report.params:,}", f"{report.flops:,}", style="bold")
    console.print(table)
    console.print(f"参数量: {report.params_m:.4f} M    FLOPs: {report.flops_g:.4f} G")
    if report.runtime is not None:
        rt = report.runtime
        console.print(
            f"运行时间: 平均 {rt.mean_ms:.3f} ms, 中位数 {rt.median_ms:.3f} ms, "
            f"最小 {rt.min_ms:.3f} ms ({rt.reps} 次, {rt.threads} 线程, {rt.cpu})"
        )
