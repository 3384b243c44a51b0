"""
参考 SPAN 模型组装

拓扑：
    head → spab1 … spabN → conv_2 → concat[head, conv_2, 选定 SPAB 输出] → 1×1 融合
    → 3×3 tail (C → 3·r²) → pixel_shuffle(r) [→ + nearest 上采样残差]
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from esrkit.core.blocks import BlockConfig, BlockKind, build_block
from esrkit.core.graph import ModelGraph, Node, NodeKind
from esrkit.core.rep_blocks import conv3xc_block, random_conv
from esrkit.exceptions import ValidationError


def _default_taps(depth: int) -> Tuple[int, ...]:
    return (1, max(1, depth - 1))


def build_reference_span(
    channels: int = 32,
    depth: int = 6,
    scale: int = 4,
    rep: bool = True,
    seed: Optional[int] = 0,
    rng: Optional[np.random.Generator] = None,
    attention_bias: float = -0.5,
    gains: Sequence[int] = (2,),
    head_kernel: int = 3,
    feature_taps: Optional[Sequence[int]] = None,
    residual_upsample: bool = False,
    rep_kind: str = "conv3xc",
    dtype=np.float32,
) -> ModelGraph:
    """
    构造参考 SPAN 类模型

    Args:
        channels: 主干通道数 C，>= 8
        depth: SPAB 个数，>= 1
        scale: 放大倍数 r ∈ {2, 3, 4}
        rep: True 时 head/conv_2 与 SPAB 的 3×3 卷积使用多分支重参数化结构
        seed: 随机种子（rng 为None时使用）
        rng: 随机数生成器
        attention_bias: SPAB 注意力偏置 b
        gains: head 与 conv_2 的 Conv3XC 扩张倍数
        head_kernel: head 卷积核尺寸（非 3 时 head 为普通卷积）
        feature_taps: 参与层级拼接的 SPAB 序号（1 起），默认 (1, depth−1)
        residual_upsample: 是否附加输入图像的 nearest 上采样残差
        rep_kind: SPAB 内使用的重参数化构造器
        dtype: 权重 dtype

    Returns:
        通过形状检查的 ModelGraph

    Raises:
        ValidationError: 参数超出范围
    """
    if channels < 8:
        raise ValidationError(f"通道数必须 >= 8: {channels}")
    if depth < 1:
        raise ValidationError(f"SPAB 个数必须 >= 1: {depth}")
    if scale not in (2, 3, 4):
        raise ValidationError(f"放大倍数必须是 2/3/4 之一: {scale}")
    if head_kernel < 1 or head_kernel % 2 == 0:
        raise ValidationError(f"head 卷积核必须为正奇数: {head_kernel}")
    taps = tuple(feature_taps) if feature_taps is not None else _default_taps(depth)
    for tap in taps:
        if not 1 <= tap <= depth:
            raise ValidationError(f"层级拼接序号 {tap} 超出 1..{depth}")

    rng = rng if rng is not None else np.random.default_rng(seed)
    c = channels
    nodes: List[Node] = [Node("input", NodeKind.INPUT)]

    if rep and head_kernel == 3:
        head = conv3xc_block(rng, 3, c, gains=gains, dtype=dtype)
        nodes.append(Node("head", NodeKind.REP_CONV, ("input",), {"block": head}))
    else:
        conv = random_conv(rng, 3, c, head_kernel, dtype=dtype)
        nodes.append(Node("head", NodeKind.CONV, ("input",), {"conv": conv}))

    spab_config = BlockConfig(
        kind=BlockKind.SPAB,
        channels=c,
        attention_bias=attention_bias,
        rep=rep_kind if rep else "",
    )
    prev = "head"
    for idx in range(1, depth + 1):
        node_id = f"spab{idx}"
        block = build_block(spab_config, rng, dtype=dtype)
        nodes.append(Node(node_id, NodeKind.SPAB, (prev,), {"block": block}))
        prev = node_id

    if rep:
        conv_2 = conv3xc_block(rng, c, c, gains=gains, dtype=dtype)
        nodes.append(Node("conv_2", NodeKind.REP_CONV, (prev,), {"block": conv_2}))
    else:
        nodes.append(Node("conv_2", NodeKind.CONV, (prev,), {"conv": random_conv(rng, c, c, 3, dtype=dtype)}))

    cat_inputs = ("head", "conv_2", *(f"spab{t}" for t in taps))
    nodes.append(Node("cat", NodeKind.CONCAT, cat_inputs))
    nodes.append(
        Node("fuse", NodeKind.CONV, ("cat",), {"conv": random_conv(rng, c * len(cat_inputs), c, 1, dtype=dtype)})
    )
    nodes.append(
        Node("tail", NodeKind.CONV, ("fuse",), {"conv": random_conv(rng, c, 3 * scale * scale, 3, dtype=dtype)})
    )
    nodes.append(Node("shuffle", NodeKind.PIXEL_SHUFFLE, ("tail",), {"scale": scale}))
    if residual_upsample:
        nodes.append(Node("up", NodeKind.UPSAMPLE, ("input",), {"scale": scale, "mode": "nearest"}))
        nodes.append(Node("out", NodeKind.ADD, ("shuffle", "up")))

    model = ModelGraph(
        nodes=tuple(nodes),
        scale=scale,
        channels=c,
        name=f"span_c{c}_d{depth}_x{scale}" + ("_rep" if rep else ""),
    )
    logger.debug(f"构造参考 SPAN: {model.name}, {len(model.nodes)} 个节点")
    return model
