"""
共享模块库

包含无参数注意力块 SPAB、简化 ESA 注意力以及按 BlockConfig 生成模块权重的工厂。

SPAB 采用如下连线：
    v = c3(act(c2(act(c1(x)))))
    a = σ(v) + b            （b 默认 −0.5，此时 a 是 v 的奇函数）
    out = (x + v) ⊙ a
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from esrkit.core.rep_blocks import build_rep_block, edge_block, random_conv
from esrkit.core.reparam import RepBlockSpec, rep_block_forward
from esrkit.core.tensor_ops import (
    ConvSpec,
    activation,
    as_tensor,
    conv2d,
    maxpool,
    resize_bilinear,
    shifted_sigmoid,
    sigmoid,
)
from esrkit.exceptions import ShapeError

ConvSlot = Union[ConvSpec, RepBlockSpec]


def apply_slot(x: np.ndarray, slot: ConvSlot) -> np.ndarray:
    """
    执行一个卷积槽（普通卷积或未融合的重参数化模块）

    Args:
        x: 输入张量
        slot: 卷积槽

    Returns:
        输出张量
    """
    if isinstance(slot, RepBlockSpec):
        return rep_block_forward(x, slot)
    return conv2d(x, slot)


@dataclass(frozen=True, eq=False)
class SpabWeights:
    """
    SPAB 权重

    Attributes:
        convs: 三个卷积槽 (c1, c2, c3)，c1 输入与 c3 输出通道等于块通道数
        bias: 平移 Sigmoid 的偏置 b
        act: c1、c2 之后的激活函数
    """

    convs: Tuple[ConvSlot, ConvSlot, ConvSlot]
    bias: float = -0.5
    act: str = "silu"

    def __post_init__(self) -> None:
        convs = tuple(self.convs)
        if len(convs) != 3:
            raise ShapeError(f"SPAB 需要 3 个卷积槽，实际 {len(convs)} 个")
        for idx, (prev, nxt) in enumerate(zip(convs, convs[1:]), start=1):
            if prev.c_out != nxt.c_in:
                raise ShapeError(f"SPAB 第 {idx} 与第 {idx + 1} 个卷积通道不衔接", dim="c")
        if convs[0].c_in != convs[2].c_out:
            raise ShapeError(
                f"SPAB 残差要求 C_in={convs[0].c_in} 与 C_out={convs[2].c_out} 相同", dim="c"
            )
        for slot in convs:
            if isinstance(slot, ConvSpec) and slot.output_size(16, 16) != (16, 16):
                raise ShapeError("SPAB 卷积必须保持空间尺寸（步长 1、same 填充）")
        object.__setattr__(self, "convs", convs)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def channels(self) -> int:
        """块通道数"""
        return self.convs[0].c_in


def spab_forward(
    x: np.ndarray, weights: SpabWeights, b: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    SPAB 前向

    Args:
        x: 输入张量 (n, C, h, w)
        weights: SPAB 权重
        b: 覆盖权重中的注意力偏置

    Returns:
        (out, attention_map)

    Raises:
        ShapeError: 输入通道数与卷积不一致
    """
    x = as_tensor(x)
    if x.shape[1] != weights.channels:
        raise ShapeError(f"输入通道数 c={x.shape[1]} 与 SPAB 通道 {weights.channels} 不一致", dim="c")
    bias = weights.bias if b is None else b

    v = x
    for idx, slot in enumerate(weights.convs):
        v = apply_slot(v, slot)
        if idx < 2:
            v = activation(v, weights.act)
    attn = shifted_sigmoid(v, bias)
    out = ((x.astype(np.float64) + v) * attn).astype(x.dtype)
    return out, attn


@dataclass(frozen=True, eq=False)
class EsaWeights:
    """
    简化 ESA 权重

    Attributes:
        down: 3×3 步长 2、无填充的降采样卷积 C→f
        conv: 3×3 same 卷积 f→f
        expand: 1×1 卷积 f→C
        pool_kernel: 最大池化窗口
        pool_stride: 最大池化步长
    """

    down: ConvSpec
    conv: ConvSpec
    expand: ConvSpec
    pool_kernel: int = 7
    pool_stride: int = 3

    def __post_init__(self) -> None:
        if self.down.c_out != self.conv.c_in or self.conv.c_out != self.expand.c_in:
            raise ShapeError("ESA 卷积通道不衔接", dim="c")
        if self.expand.c_out != self.down.c_in:
            raise ShapeError("ESA 门控输出通道必须等于输入通道", dim="c")
        if self.expand.kernel_size != (1, 1):
            raise ShapeError("ESA 扩张卷积必须是 1×1")

    @property
    def channels(self) -> int:
        """块通道数"""
        return self.down.c_in

    def min_spatial(self) -> int:
        """前向所需的最小空间边长"""
        size = 1
        while True:
            h, _ = self.down.output_size(size, size)
            if h >= self.pool_kernel:
                return size
            size += 1

    def check_spatial(self, h: int, w: int) -> None:
        """
        校验空间尺寸足够大

        Raises:
            ShapeError: 降采样后小于池化窗口
        """
        dh, dw = self.down.output_size(h, w)
        if dh < self.pool_kernel or dw < self.pool_kernel:
            raise ShapeError(
                f"ESA 输入空间尺寸 {h}×{w} 过小，至少需要 {self.min_spatial()}×{self.min_spatial()}",
                dim="h" if dh < self.pool_kernel else "w",
            )


def esa_simplified_forward(x: np.ndarray, weights: EsaWeights) -> np.ndarray:
    """
    简化 ESA 前向

    步长卷积 → 最大池化 → 3×3 卷积 → 双线性上采样回输入尺寸 → 1×1 扩张
    → Sigmoid 门控 → x ⊙ gate

    Args:
        x: 输入张量 (n, C, h, w)
        weights: ESA 权重

    Returns:
        门控后的张量

    Raises:
        ShapeError: 空间尺寸过小或通道不一致
    """
    x = as_tensor(x)
    if x.shape[1] != weights.channels:
        raise ShapeError(f"输入通道数 c={x.shape[1]} 与 ESA 通道 {weights.channels} 不一致", dim="c")
    h, w = x.shape[2:]
    weights.check_spatial(h, w)

    y = conv2d(x, weights.down)
    y = maxpool(y, weights.pool_kernel, weights.pool_stride)
    y = conv2d(y, weights.conv)
    y = resize_bilinear(y, (h, w))
    gate = sigmoid(conv2d(y, weights.expand))
    return (x.astype(np.float64) * gate).astype(x.dtype)


class BlockKind(str, Enum):
    """模块类型枚举"""

    SPAB = "spab"
    REP_CONV = "rep_conv"
    EDGE_BLOCK = "edge_block"
    ESA_SIMPLIFIED = "esa_simplified"


@dataclass(frozen=True)
class BlockConfig:
    """
    模块配置

    Attributes:
        kind: 模块类型
        channels: 通道数
        attention_bias: SPAB 注意力偏置 b
        activation: SPAB 内部激活函数
        rep: 重参数化构造器名称；为空字符串时 SPAB 使用普通卷积
        spab_kernels: SPAB 三个卷积的核尺寸
        esa_features: ESA 内部通道数 f
    """

    kind: BlockKind
    channels: int
    attention_bias: float = -0.5
    activation: str = "silu"
    rep: str = "conv3xc"
    spab_kernels: Tuple[int, int, int] = (3, 3, 1)
    esa_features: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.channels < 1:
            raise ShapeError(f"通道数必须 >= 1: {self.channels}", dim="c")
        if len(self.spab_kernels) != 3 or any(k % 2 == 0 for k in self.spab_kernels):
            raise ShapeError(f"SPAB 核尺寸必须是三个奇数: {self.spab_kernels}")


def build_block(
    config: BlockConfig, rng: np.random.Generator, dtype=np.float32
) -> Union[SpabWeights, RepBlockSpec, EsaWeights]:
    """
    按配置随机初始化模块权重

    SPAB 中 3×3 的卷积槽在 rep 非空时使用对应的重参数化模块。

    Args:
        config: 模块配置
        rng: 随机数生成器
        dtype: 权重 dtype

    Returns:
        SpabWeights / RepBlockSpec / EsaWeights
    """
    c = config.channels
    if config.kind == BlockKind.SPAB:
        slots = []
        for k in config.spab_kernels:
            if config.rep and k == 3:
                slots.append(build_rep_block(config.rep, rng, c, dtype=dtype))
            else:
                slots.append(random_conv(rng, c, c, k, dtype=dtype))
        return SpabWeights(tuple(slots), bias=config.attention_bias, act=config.activation)
    if config.kind == BlockKind.REP_CONV:
        return build_rep_block(config.rep or "conv3xc", rng, c, dtype=dtype)
    if config.kind == BlockKind.EDGE_BLOCK:
        return edge_block(rng, c, dtype=dtype)

    f = config.esa_features
    down = random_conv(rng, c, f, 3, dtype=dtype)
    return EsaWeights(
        down=ConvSpec(down.weight, down.bias, stride=2, padding=0),
        conv=random_conv(rng, f, f, 3, dtype=dtype),
        expand=random_conv(rng, f, c, 1, dtype=dtype),
    )
