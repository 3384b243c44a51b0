"""
复杂度分析模块

统计计算图的参数量、指定输入尺寸下的 FLOPs 与 CPU 墙钟运行时间。

FLOPs 约定：默认 1 MAC = 1 FLOP（mac_factor=1），卷积之外的运算默认不计入。
mac_factor=2 时每个 MAC 计 2 次运算，并计入偏置加法。
打开 include_elementwise 后，激活、逐元素运算、像素重排、上采样与池化
按每个输出元素 1 次运算计入；拼接与拆分不计。
"""

import platform
import statistics
import time
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from tqdm import tqdm

from esrkit.core.blocks import EsaWeights, SpabWeights
from esrkit.core.graph import ModelGraph, Node, NodeKind, Shape, forward, infer_shapes
from esrkit.core.reparam import (
    ConvBranch,
    FixedFilterBranch,
    RepBlockSpec,
    ScaledIdentityBranch,
    SeqBranch,
    rep_block_param_count,
)
from esrkit.core.tensor_ops import ConvSpec, get_num_threads, num_threads
from esrkit.exceptions import ValidationError
from esrkit.models.config import ProfileConfig
from esrkit.models.profile import NodeCost, ProfileReport, RuntimeStats

_ELEMENTWISE_KINDS = (
    NodeKind.ACT,
    NodeKind.ADD,
    NodeKind.MUL,
    NodeKind.PIXEL_SHUFFLE,
    NodeKind.UPSAMPLE,
    NodeKind.MAXPOOL,
)


# ---------------------------------------------------------------------------
# 参数量
# ---------------------------------------------------------------------------


def _slot_params(slot, count_frozen: bool) -> int:
    if isinstance(slot, RepBlockSpec):
        return rep_block_param_count(slot, count_frozen)
    return slot.param_count


def node_params(node: Node, count_frozen: bool = True) -> int:
    """
    单个节点的参数量

    SPAB 的注意力偏置 b 不计入；固定滤波器在 count_frozen=False 时不计入。
    """
    if node.kind == NodeKind.CONV:
        return node.attrs["conv"].param_count
    if node.kind in (NodeKind.REP_CONV, NodeKind.EDGE_BLOCK):
        return rep_block_param_count(node.attrs["block"], count_frozen)
    if node.kind == NodeKind.SPAB:
        weights: SpabWeights = node.attrs["block"]
        return sum(_slot_params(s, count_frozen) for s in weights.convs)
    if node.kind == NodeKind.ESA:
        esa: EsaWeights = node.attrs["block"]
        return esa.down.param_count + esa.conv.param_count + esa.expand.param_count
    return 0


def count_params(model: ModelGraph, count_frozen: bool = True) -> int:
    """
    统计模型参数量（权重与偏置元素总数）

    Args:
        model: 计算图
        count_frozen: 是否计入固定滤波器缓冲

    Returns:
        参数元素数
    """
    return sum(node_params(node, count_frozen) for node in model.nodes)


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def conv_flops(conv: ConvSpec, h: int, w: int, mac_factor: int = 1) -> Tuple[int, Tuple[int, int]]:
    """
    单个卷积的 FLOPs

    Args:
        conv: 卷积规格
        h: 输入高度
        w: 输入宽度
        mac_factor: 每个 MAC 折算的 FLOPs 数

    Returns:
        (FLOPs, 输出空间尺寸)
    """
    oh, ow = conv.output_size(h, w)
    kh, kw = conv.kernel_size
    macs = oh * ow * conv.c_out * (conv.c_in // conv.groups) * kh * kw
    flops = macs * mac_factor
    if mac_factor == 2 and conv.bias is not None:
        flops += conv.c_out * oh * ow
    return flops, (oh, ow)


def _rep_block_flops(
    spec: RepBlockSpec, h: int, w: int, mac_factor: int, elementwise: bool
) -> int:
    total = 0
    for branch in spec.branches:
        if isinstance(branch, ConvBranch):
            total += conv_flops(branch.conv, h, w, mac_factor)[0]
            if branch.bn is not None and elementwise:
                total += branch.conv.c_out * h * w
        elif isinstance(branch, SeqBranch):
            total += sum(conv_flops(c, h, w, mac_factor)[0] for c in branch.convs)
        elif isinstance(branch, FixedFilterBranch):
            if branch.pre is not None:
                total += conv_flops(branch.pre, h, w, mac_factor)[0]
            total += conv_flops(branch.depthwise(), h, w, mac_factor)[0]
        elif isinstance(branch, ScaledIdentityBranch) and elementwise:
            total += spec.c_out * h * w
    if elementwise:
        total += (len(spec.branches) - 1) * spec.c_out * h * w
    return total


def _slot_flops(slot, h: int, w: int, mac_factor: int, elementwise: bool) -> int:
    if isinstance(slot, RepBlockSpec):
        return _rep_block_flops(slot, h, w, mac_factor, elementwise)
    return conv_flops(slot, h, w, mac_factor)[0]


def node_flops(
    node: Node,
    in_shapes: Sequence[Shape],
    out_shape: Shape,
    mac_factor: int = 1,
    include_elementwise: bool = False,
) -> int:
    """
    单个节点的 FLOPs

    Args:
        node: 节点
        in_shapes: 输入形状
        out_shape: 输出形状
        mac_factor: 每个 MAC 折算的 FLOPs 数
        include_elementwise: 是否计入逐元素运算

    Returns:
        FLOPs
    """
    out_elems = int(np.prod(out_shape))
    if node.kind == NodeKind.CONV:
        _, h, w = in_shapes[0]
        return conv_flops(node.attrs["conv"], h, w, mac_factor)[0]
    if node.kind in (NodeKind.REP_CONV, NodeKind.EDGE_BLOCK):
        _, h, w = in_shapes[0]
        return _rep_block_flops(node.attrs["block"], h, w, mac_factor, include_elementwise)
    if node.kind == NodeKind.SPAB:
        weights: SpabWeights = node.attrs["block"]
        _, h, w = in_shapes[0]
        total = sum(_slot_flops(s, h, w, mac_factor, include_elementwise) for s in weights.convs)
        # 两次激活、注意力、残差加与乘
        return total + (5 * out_elems if include_elementwise else 0)
    if node.kind == NodeKind.ESA:
        esa: EsaWeights = node.attrs["block"]
        c, h, w = in_shapes[0]
        total, (dh, dw) = conv_flops(esa.down, h, w, mac_factor)
        ph, pw = (dh - esa.pool_kernel) // esa.pool_stride + 1, (dw - esa.pool_kernel) // esa.pool_stride + 1
        conv, _ = conv_flops(esa.conv, ph, pw, mac_factor)
        expand, _ = conv_flops(esa.expand, h, w, mac_factor)
        total += conv + expand
        if include_elementwise:
            # 池化、双线性插值、门控与相乘
            total += esa.down.c_out * ph * pw + esa.conv.c_out * h * w + 2 * c * h * w
        return total
    if node.kind in _ELEMENTWISE_KINDS and include_elementwise:
        return out_elems
    return 0


def profile_nodes(
    model: ModelGraph,
    input_hw: Tuple[int, int] = (256, 256),
    mac_factor: int = 1,
    include_elementwise: bool = False,
    count_frozen: bool = True,
) -> List[NodeCost]:
    """
    逐节点统计参数量与 FLOPs

    Raises:
        ShapeError: 图在该输入尺寸下形状检查失败
    """
    if mac_factor not in (1, 2):
        raise ValidationError(f"mac_factor 必须是 1 或 2: {mac_factor}")
    shapes = infer_shapes(model, input_hw)
    costs = []
    for node in model.nodes:
        in_shapes = [shapes[src] for src in node.inputs]
        costs.append(
            NodeCost(
                node=node.id,
                kind=node.kind.value,
                out_shape=shapes[node.id],
                params=node_params(node, count_frozen),
                flops=node_flops(node, in_shapes, shapes[node.id], mac_factor, include_elementwise),
            )
        )
    return costs


def count_flops(
    model: ModelGraph,
    input_hw: Tuple[int, int] = (256, 256),
    mac_factor: int = 1,
    include_elementwise: bool = False,
) -> int:
    """
    统计指定输入尺寸下的 FLOPs

    与权重取值无关，只依赖形状。

    Args:
        model: 计算图
        input_hw: 输入尺寸
        mac_factor: 每个 MAC 折算的 FLOPs 数 (1/2)
        include_elementwise: 是否计入逐元素运算

    Returns:
        FLOPs

    Raises:
        ShapeError: 形状检查失败
    """
    costs = profile_nodes(model, input_hw, mac_factor, include_elementwise)
    return sum(c.flops for c in costs)


# ---------------------------------------------------------------------------
# 运行时间
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def cpu_model() -> str:
    """读取 CPU 型号"""
    cpuinfo = Path("/proc/cpuinfo")
    if cpuinfo.exists():
        for line in cpuinfo.read_text(errors="ignore").splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    return platform.processor() or platform.machine() or "unknown"


def _random_input(model: ModelGraph, input_hw: Tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((1, model.in_channels, *input_hw), dtype=np.float32)


def _time_once(model: ModelGraph, x: np.ndarray) -> float:
    start = time.perf_counter()
    forward(model, x)
    return (time.perf_counter() - start) * 1e3


def _stats(samples: List[float], warmup: int) -> RuntimeStats:
    return RuntimeStats(
        mean_ms=statistics.mean(samples),
        median_ms=statistics.median(samples),
        min_ms=min(samples),
        reps=len(samples),
        warmup=warmup,
        threads=get_num_threads(),
        cpu=cpu_model(),
        samples_ms=samples,
    )


def measure_runtime(
    model: ModelGraph,
    input_hw: Tuple[int, int] = (256, 256),
    warmup: int = 5,
    reps: int = 50,
    threads: Optional[int] = None,
    seed: int = 0,
) -> RuntimeStats:
    """
    测量前向墙钟时间

    在固定随机输入上预热后重复计时，报告均值与中位数。
    同一进程中不应与其他计时并发运行。

    Args:
        model: 计算图
        input_hw: 输入尺寸
        warmup: 预热次数
        reps: 计时次数，>= 1
        threads: 计时期间使用的引擎线程数（为None时沿用当前设置）
        seed: 输入随机种子

    Returns:
        运行时间统计
    """
    if reps < 1:
        raise ValidationError(f"reps 必须 >= 1: {reps}")
    if warmup < 0:
        raise ValidationError(f"warmup 不能为负: {warmup}")
    x = _random_input(model, input_hw, seed)
    with num_threads(threads):
        for _ in range(warmup):
            forward(model, x)
        samples = [_time_once(model, x) for _ in range(reps)]
        stats = _stats(samples, warmup)
    logger.info(
        f"{model.name} @ {input_hw[0]}×{input_hw[1]}: 平均 {stats.mean_ms:.3f} ms, "
        f"中位数 {stats.median_ms:.3f} ms ({reps} 次, {stats.threads} 线程)"
    )
    return stats


def compare_runtime(
    model_a: ModelGraph,
    model_b: ModelGraph,
    input_hw: Tuple[int, int] = (256, 256),
    warmup: int = 5,
    reps: int = 50,
    threads: Optional[int] = None,
    seed: int = 0,
    progress: bool = False,
) -> Tuple[RuntimeStats, RuntimeStats]:
    """
    交替配对计时两个模型

    每一轮依次运行 a、b，使两者受到相同的系统负载波动。

    Args:
        model_a: 模型 A
        model_b: 模型 B
        input_hw: 输入尺寸
        warmup: 预热轮数
        reps: 计时轮数
        threads: 引擎线程数
        seed: 输入随机种子
        progress: 是否显示进度条

    Returns:
        (A 的统计, B 的统计)
    """
    if reps < 1:
        raise ValidationError(f"reps 必须 >= 1: {reps}")
    if model_a.in_channels != model_b.in_channels:
        raise ValidationError("配对计时的两个模型输入通道数必须一致")
    x = _random_input(model_a, input_hw, seed)
    samples: Dict[str, List[float]] = {"a": [], "b": []}
    with num_threads(threads):
        for _ in range(warmup):
            forward(model_a, x)
            forward(model_b, x)
        for _ in tqdm(range(reps), desc="配对计时", disable=not progress, leave=False):
            samples["a"].append(_time_once(model_a, x))
            samples["b"].append(_time_once(model_b, x))
        stats_a, stats_b = _stats(samples["a"], warmup), _stats(samples["b"], warmup)
    logger.info(
        f"配对计时 {model_a.name} vs {model_b.name}: "
        f"中位数 {stats_a.median_ms:.3f} ms vs {stats_b.median_ms:.3f} ms"
    )
    return stats_a, stats_b


def profile_model(
    model: ModelGraph,
    config: Optional[ProfileConfig] = None,
    with_runtime: bool = False,
    threads: Optional[int] = None,
) -> ProfileReport:
    """
    生成完整的复杂度分析报告

    Args:
        model: 计算图
        config: 复杂度分析配置
        with_runtime: 是否测量运行时间
        threads: 计时使用的引擎线程数

    Returns:
        复杂度分析报告
    """
    config = config or ProfileConfig()
    nodes = profile_nodes(
        model, config.input_hw, config.mac_factor, config.include_elementwise, config.count_frozen
    )
    runtime = None
    if with_runtime:
        runtime = measure_runtime(model, config.input_hw, config.warmup, config.reps, threads)
    report = ProfileReport(
        model=model.name,
        params=sum(n.params for n in nodes),
        flops=sum(n.flops for n in nodes),
        input_size=config.input_hw,
        mac_factor=config.mac_factor,
        include_elementwise=config.include_elementwise,
        runtime=runtime,
        nodes=nodes,
    )
    logger.info(f"{model.name}: {report.params_m:.4f} M 参数, {report.flops_g:.4f} G FLOPs")
    return report
