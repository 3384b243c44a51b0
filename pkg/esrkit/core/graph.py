"""
计算图模块

ModelGraph 是按拓扑序排列的节点列表，每个节点通过输入 ID 引用前驱。
执行器按节点类型分派，依据引用计数尽早释放中间缓冲；
融合 pass 把重参数化节点逐个改写为普通卷积。
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from loguru import logger

from esrkit.core.blocks import EsaWeights, SpabWeights, esa_simplified_forward, spab_forward
from esrkit.core.reparam import RepBlockSpec, fuse_block, rep_block_forward
from esrkit.core.tensor_ops import (
    ConvSpec,
    activation,
    add,
    as_tensor,
    channel_concat,
    channel_split,
    conv2d,
    maxpool,
    mul,
    pixel_shuffle,
    upsample,
)
from esrkit.exceptions import FusionError, GraphError, ShapeError

Shape = Tuple[int, int, int]


class NodeKind(str, Enum):
    """节点类型枚举"""

    INPUT = "input"
    CONV = "conv"
    ACT = "act"
    PIXEL_SHUFFLE = "pixel_shuffle"
    UPSAMPLE = "upsample"
    ADD = "add"
    MUL = "mul"
    CONCAT = "concat"
    SPLIT = "split"
    MAXPOOL = "maxpool"
    SPAB = "spab"
    ESA = "esa"
    REP_CONV = "rep_conv"
    EDGE_BLOCK = "edge_block"


# 每种节点的输入个数；None 表示至少一个
_ARITY: Dict[NodeKind, Any] = {
    NodeKind.INPUT: 0,
    NodeKind.CONV: 1,
    NodeKind.ACT: 1,
    NodeKind.PIXEL_SHUFFLE: 1,
    NodeKind.UPSAMPLE: 1,
    NodeKind.ADD: 2,
    NodeKind.MUL: 2,
    NodeKind.CONCAT: None,
    NodeKind.SPLIT: 1,
    NodeKind.MAXPOOL: 1,
    NodeKind.SPAB: 1,
    NodeKind.ESA: 1,
    NodeKind.REP_CONV: 1,
    NodeKind.EDGE_BLOCK: 1,
}

_PAYLOAD_TYPES: Dict[NodeKind, Tuple[str, type]] = {
    NodeKind.CONV: ("conv", ConvSpec),
    NodeKind.SPAB: ("block", SpabWeights),
    NodeKind.ESA: ("block", EsaWeights),
    NodeKind.REP_CONV: ("block", RepBlockSpec),
    NodeKind.EDGE_BLOCK: ("block", RepBlockSpec),
}

REP_KINDS = (NodeKind.REP_CONV, NodeKind.EDGE_BLOCK)


@dataclass(frozen=True, eq=False)
class Node:
    """
    计算图节点

    Attributes:
        id: 唯一节点 ID
        kind: 节点类型
        inputs: 输入节点 ID
        attrs: 节点属性（权重载荷或超参数）
    """

    id: str
    kind: NodeKind
    inputs: Tuple[str, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", dict(self.attrs))

    @property
    def payload(self) -> Any:
        """权重载荷（conv 节点为 ConvSpec，模块节点为对应权重对象）"""
        key, _ = _PAYLOAD_TYPES.get(self.kind, ("", object))
        return self.attrs.get(key)


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """
    模型计算图

    Attributes:
        nodes: 拓扑有序的节点列表，首节点为唯一输入，末节点为唯一输出
        scale: 放大倍数 r
        channels: 主干通道数
        in_channels: 输入图像通道数
        name: 模型名称
    """

    nodes: Tuple[Node, ...]
    scale: int
    channels: int
    in_channels: int = 3
    name: str = "model"

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        validate_graph(self)

    @property
    def input_node(self) -> Node:
        """输入节点"""
        return self.nodes[0]

    @property
    def output_node(self) -> Node:
        """输出节点"""
        return self.nodes[-1]

    def node(self, node_id: str) -> Node:
        """按 ID 查找节点"""
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise GraphError(f"节点不存在: {node_id}")

    def consumers(self) -> Dict[str, int]:
        """每个节点被引用的次数"""
        counts = {node.id: 0 for node in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                counts[src] += 1
        return counts

    def has_rep_nodes(self) -> bool:
        """是否含有未融合的重参数化结构"""
        for node in self.nodes:
            if node.kind in REP_KINDS:
                return True
            if node.kind == NodeKind.SPAB and any(
                isinstance(slot, RepBlockSpec) for slot in node.attrs["block"].convs
            ):
                return True
        return False


def validate_graph(model: ModelGraph) -> None:
    """
    校验计算图结构

    Raises:
        GraphError: 节点 ID 重复、输入悬空或非拓扑序、输入/输出不唯一、
            属性缺失或元数据非法
    """
    if model.scale not in (1, 2, 3, 4):
        raise GraphError(f"放大倍数必须是 1/2/3/4 之一: {model.scale}")
    if model.channels < 1 or model.in_channels < 1:
        raise GraphError("通道数元数据必须 >= 1")
    if not model.nodes:
        raise GraphError("计算图不能为空")
    if model.nodes[0].kind != NodeKind.INPUT:
        raise GraphError(f"首节点必须是 input，实际 {model.nodes[0].kind.value}")

    seen = set()
    for node in model.nodes:
        if node.id in seen:
            raise GraphError(f"节点 ID 重复: {node.id}")
        if node.kind == NodeKind.INPUT and seen:
            raise GraphError(f"计算图只能有一个输入节点: {node.id}")
        arity = _ARITY[node.kind]
        if arity is None and not node.inputs:
            raise GraphError(f"节点 '{node.id}' ({node.kind.value}) 至少需要一个输入")
        if arity is not None and len(node.inputs) != arity:
            raise GraphError(
                f"节点 '{node.id}' ({node.kind.value}) 需要 {arity} 个输入，实际 {len(node.inputs)}"
            )
        for src in node.inputs:
            if src not in seen:
                raise GraphError(f"节点 '{node.id}' 的输入 '{src}' 不存在或不在其之前")
        if node.kind in _PAYLOAD_TYPES:
            key, expected = _PAYLOAD_TYPES[node.kind]
            if not isinstance(node.attrs.get(key), expected):
                raise GraphError(f"节点 '{node.id}' 缺少 {expected.__name__} 类型的属性 '{key}'")
        seen.add(node.id)

    counts = model.consumers()
    dangling = [nid for nid, count in counts.items() if count == 0 and nid != model.nodes[-1].id]
    if dangling:
        raise GraphError(f"计算图只能有一个输出，以下节点未被使用: {dangling}")


# ---------------------------------------------------------------------------
# 形状推断
# ---------------------------------------------------------------------------


def _node_shape(node: Node, shapes: Sequence[Shape]) -> Shape:
    kind, attrs = node.kind, node.attrs
    if kind == NodeKind.CONV:
        conv: ConvSpec = attrs["conv"]
        c, h, w = shapes[0]
        return (conv.c_out, *conv.check_input(c, h, w))
    if kind in REP_KINDS:
        block: RepBlockSpec = attrs["block"]
        c, h, w = shapes[0]
        if c != block.c_in:
            raise ShapeError(f"输入通道数 c={c} 与模块 C_in={block.c_in} 不一致", dim="c")
        return block.c_out, h, w
    if kind in (NodeKind.SPAB, NodeKind.ESA):
        weights = attrs["block"]
        c, h, w = shapes[0]
        if c != weights.channels:
            raise ShapeError(f"输入通道数 c={c} 与模块通道 {weights.channels} 不一致", dim="c")
        if kind == NodeKind.ESA:
            weights.check_spatial(h, w)
        return c, h, w
    if kind == NodeKind.ACT:
        return shapes[0]
    if kind == NodeKind.PIXEL_SHUFFLE:
        r = int(attrs["scale"])
        c, h, w = shapes[0]
        if c % (r * r) != 0:
            raise ShapeError(f"通道数 c={c} 不能被 r²={r * r} 整除", dim="c")
        return c // (r * r), h * r, w * r
    if kind == NodeKind.UPSAMPLE:
        r = int(attrs["scale"])
        c, h, w = shapes[0]
        return c, h * r, w * r
    if kind in (NodeKind.ADD, NodeKind.MUL):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"{kind.value} 要求形状一致: {shapes[0]} vs {shapes[1]}")
        return shapes[0]
    if kind == NodeKind.CONCAT:
        h, w = shapes[0][1:]
        for s in shapes[1:]:
            if s[1:] != (h, w):
                raise ShapeError(f"拼接要求空间尺寸一致: {shapes}")
        return sum(s[0] for s in shapes), h, w
    if kind == NodeKind.SPLIT:
        sizes, index = list(attrs["sizes"]), int(attrs["index"])
        c, h, w = shapes[0]
        if sum(sizes) != c:
            raise ShapeError(f"拆分尺寸 {sizes} 之和须等于通道数 {c}", dim="c")
        if not 0 <= index < len(sizes):
            raise ShapeError(f"拆分索引 {index} 越界")
        return sizes[index], h, w
    if kind == NodeKind.MAXPOOL:
        k = int(attrs["kernel"])
        s = int(attrs.get("stride", k))
        c, h, w = shapes[0]
        if h < k or w < k:
            raise ShapeError(f"空间尺寸 {h}×{w} 小于池化窗口 {k}")
        return c, (h - k) // s + 1, (w - k) // s + 1
    raise GraphError(f"未知节点类型: {kind}")


def infer_shapes(model: ModelGraph, input_hw: Tuple[int, int]) -> Dict[str, Shape]:
    """
    静态推断每个节点的输出形状 (c, h, w)

    Args:
        model: 计算图
        input_hw: 输入空间尺寸

    Returns:
        节点 ID 到形状的映射

    Raises:
        ShapeError: 形状检查失败，错误信息包含节点 ID
    """
    shapes: Dict[str, Shape] = {model.input_node.id: (model.in_channels, *input_hw)}
    for node in model.nodes[1:]:
        try:
            shapes[node.id] = _node_shape(node, [shapes[src] for src in node.inputs])
        except ShapeError as e:
            raise ShapeError(
                f"节点 '{node.id}' ({node.kind.value}) 形状检查失败: {e}", node=node.id, dim=e.dim
            ) from e
    return shapes


def check_shapes(model: ModelGraph, input_hw: Tuple[int, int]) -> Shape:
    """
    形状检查并返回输出形状

    Raises:
        ShapeError: 任一节点形状不合法
    """
    return infer_shapes(model, input_hw)[model.output_node.id]


# ---------------------------------------------------------------------------
# 执行器
# ---------------------------------------------------------------------------


def _run_conv(node: Node, xs: List[np.ndarray]) -> np.ndarray:
    return conv2d(xs[0], node.attrs["conv"])


def _run_act(node: Node, xs: List[np.ndarray]) -> np.ndarray:
    attrs = node.attrs
    return activation(
        xs[0], attrs["kind"], alpha=attrs.get("alpha", 0.01), bias=attrs.get("bias", -0.5)
    )


def _run_split(node: Node, xs: List[np.ndarray]) -> np.ndarray:
    return channel_split(xs[0], node.attrs["sizes"])[int(node.attrs["index"])]


def _run_maxpool(node: Node, xs: List[np.ndarray]) -> np.ndarray:
    k = int(node.attrs["kernel"])
    return maxpool(xs[0], k, int(node.attrs.get("stride", k)))


_EXECUTORS: Dict[NodeKind, Callable[[Node, List[np.ndarray]], np.ndarray]] = {
    NodeKind.CONV: _run_conv,
    NodeKind.ACT: _run_act,
    NodeKind.PIXEL_SHUFFLE: lambda node, xs: pixel_shuffle(xs[0], int(node.attrs["scale"])),
    NodeKind.UPSAMPLE: lambda node, xs: upsample(
        xs[0], int(node.attrs["scale"]), node.attrs.get("mode", "nearest")
    ),
    NodeKind.ADD: lambda node, xs: add(xs[0], xs[1]),
    NodeKind.MUL: lambda node, xs: mul(xs[0], xs[1]),
    NodeKind.CONCAT: lambda node, xs: channel_concat(xs),
    NodeKind.SPLIT: _run_split,
    NodeKind.MAXPOOL: _run_maxpool,
    NodeKind.SPAB: lambda node, xs: spab_forward(xs[0], node.attrs["block"])[0],
    NodeKind.ESA: lambda node, xs: esa_simplified_forward(xs[0], node.attrs["block"]),
    NodeKind.REP_CONV: lambda node, xs: rep_block_forward(xs[0], node.attrs["block"]),
    NodeKind.EDGE_BLOCK: lambda node, xs: rep_block_forward(xs[0], node.attrs["block"]),
}


def run_node(node: Node, inputs: List[np.ndarray]) -> np.ndarray:
    """
    执行单个节点

    Raises:
        ShapeError: 形状错误，错误信息包含节点 ID
    """
    try:
        return _EXECUTORS[node.kind](node, inputs)
    except ShapeError as e:
        raise ShapeError(
            f"节点 '{node.id}' ({node.kind.value}) 形状检查失败: {e}", node=node.id, dim=e.dim
        ) from e


def forward(model: ModelGraph, img: np.ndarray) -> np.ndarray:
    """
    按拓扑序执行计算图

    中间缓冲在最后一个消费者执行完后立即释放。

    Args:
        model: 计算图
        img: 输入张量 (n, in_channels, h, w)

    Returns:
        输出张量

    Raises:
        ShapeError: 输入或任一节点形状不合法
    """
    img = as_tensor(img, "img")
    if img.shape[1] != model.in_channels:
        raise ShapeError(
            f"节点 '{model.input_node.id}' (input) 期望 {model.in_channels} 通道，实际 {img.shape[1]}",
            node=model.input_node.id,
            dim="c",
        )

    remaining = model.consumers()
    buffers: Dict[str, np.ndarray] = {model.input_node.id: img}
    for node in model.nodes[1:]:
        inputs = [buffers[src] for src in node.inputs]
        buffers[node.id] = run_node(node, inputs)
        logger.trace(f"执行节点 {node.id} ({node.kind.value}) -> {buffers[node.id].shape}")
        for src in node.inputs:
            remaining[src] -= 1
            if remaining[src] == 0:
                del buffers[src]
    return buffers[model.output_node.id]


# ---------------------------------------------------------------------------
# 融合 pass
# ---------------------------------------------------------------------------


def fuse_node(node: Node) -> Node:
    """
    融合单个节点中的重参数化结构

    rep_conv / edge_block 改写为 conv 节点；SPAB 中的重参数化槽替换为融合卷积。
    """
    if node.kind in REP_KINDS:
        return Node(node.id, NodeKind.CONV, node.inputs, {"conv": fuse_block(node.attrs["block"])})
    if node.kind == NodeKind.SPAB:
        weights: SpabWeights = node.attrs["block"]
        slots = tuple(fuse_block(s) if isinstance(s, RepBlockSpec) else s for s in weights.convs)
        return Node(node.id, node.kind, node.inputs, {"block": replace(weights, convs=slots)})
    return node


def fuse_graph(model: ModelGraph) -> ModelGraph:
    """
    融合整张计算图中的重参数化节点

    Args:
        model: 计算图

    Returns:
        新的部署形式计算图（原图不变）
    """
    nodes = tuple(fuse_node(node) for node in model.nodes)
    fused = replace(model, nodes=nodes)
    logger.info(f"计算图 {model.name} 已融合: {sum(a is not b for a, b in zip(model.nodes, nodes))} 个节点被改写")
    return fused


def verify_fusion(
    model: ModelGraph, fused: ModelGraph, x: np.ndarray, tolerance: float
) -> float:
    """
    检查融合前后在同一输入上的输出差异

    Args:
        model: 未融合计算图
        fused: 融合后计算图
        x: 输入张量 (N, C, H, W)
        tolerance: 最大绝对差容差

    Returns:
        最大绝对差

    Raises:
        FusionError: 差异超过容差
    """
    max_abs_diff = float(np.max(np.abs(forward(model, x) - forward(fused, x))))
    if not max_abs_diff <= tolerance:
        raise FusionError(f"融合前后输出最大差异 {max_abs_diff:.3e} 超过容差 {tolerance:.1e}")
    logger.debug(f"融合等价校验通过: 最大差异 {max_abs_diff:.3e} <= {tolerance:.1e}")
    return max_abs_diff
