"""
重参数化模块构造器

按常见高效超分辨率方案的分支组合随机初始化 RepBlockSpec，
供融合验证、参考模型组装与复杂度分析使用。
"""

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from esrkit.core.reparam import (
    BatchNormStats,
    ConvBranch,
    FixedFilterBranch,
    IdentityBranch,
    RepBlockSpec,
    SeqBranch,
    embed_fixed_filter,
    fixed_filter_bank,
)
from esrkit.core.tensor_ops import ConvSpec
from esrkit.exceptions import FusionError


def random_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    kernel=3,
    bias: bool = True,
    dtype=np.float32,
    zero: bool = False,
) -> ConvSpec:
    """
    随机初始化一个 same 填充卷积

    权重服从 N(0, 1/fan_in)，偏置服从 N(0, 0.1²)。

    Args:
        rng: 随机数生成器
        c_in: 输入通道数
        c_out: 输出通道数
        kernel: 奇数核尺寸（整数或 (kH, kW)）
        bias: 是否带偏置
        dtype: 权重 dtype
        zero: 权重置零

    Returns:
        卷积规格
    """
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    fan_in = c_in * kh * kw
    if zero:
        weight = np.zeros((c_out, c_in, kh, kw))
    else:
        weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, kh, kw))
    b = rng.normal(0.0, 0.1, size=c_out).astype(dtype) if bias else None
    return ConvSpec.same(weight.astype(dtype), bias=b)


def random_batchnorm(rng: np.random.Generator, channels: int) -> BatchNormStats:
    """随机 BN 推理统计量，方差落在 [0.5, 1.5]"""
    return BatchNormStats(
        gamma=rng.uniform(0.5, 1.5, channels),
        beta=rng.normal(0.0, 0.1, channels),
        mean=rng.normal(0.0, 0.1, channels),
        var=rng.uniform(0.5, 1.5, channels),
    )


def conv3xc_block(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    gains: Sequence[int] = (2,),
    skip: bool = True,
    dtype=np.float32,
) -> RepBlockSpec:
    """
    Conv3XC：每个增益 g 一条 1×1 扩张 → 3×3 → 1×1 收缩分支，外加 1×1 跳连卷积

    Args:
        rng: 随机数生成器
        c_in: 输入通道数
        c_out: 输出通道数
        gains: 通道扩张倍数
        skip: 是否带 1×1 跳连分支
        dtype: 权重 dtype
    """
    branches = []
    for gain in gains:
        if gain < 1:
            raise FusionError(f"增益必须 >= 1: {gain}")
        branches.append(
            SeqBranch(
                (
                    random_conv(rng, c_in, c_in * gain, 1, dtype=dtype),
                    random_conv(rng, c_in * gain, c_out * gain, 3, dtype=dtype),
                    random_conv(rng, c_out * gain, c_out, 1, dtype=dtype),
                )
            )
        )
    if skip:
        branches.append(ConvBranch(random_conv(rng, c_in, c_out, 1, dtype=dtype)))
    return RepBlockSpec(tuple(branches), name="conv3xc")


def ten_in_one_block(
    rng: np.random.Generator, channels: int, gains: Sequence[int] = (1, 2, 3), dtype=np.float32
) -> RepBlockSpec:
    """TenInOneConv：增益 1、2、3 三条扩张分支、1×1 跳连卷积与恒等分支"""
    base = conv3xc_block(rng, channels, channels, gains=gains, skip=True, dtype=dtype)
    return RepBlockSpec((*base.branches, IdentityBranch(channels)), name="ten_in_one")


def mbga_block(rng: np.random.Generator, channels: int, dtype=np.float32) -> RepBlockSpec:
    """通用重参数化块：四条 1×1-3×3 分支、一条 1×1 分支与一条 3×3 分支"""
    branches = [
        SeqBranch(
            (
                random_conv(rng, channels, channels, 1, dtype=dtype),
                random_conv(rng, channels, channels, 3, dtype=dtype),
            )
        )
        for _ in range(4)
    ]
    branches.append(ConvBranch(random_conv(rng, channels, channels, 1, dtype=dtype)))
    branches.append(ConvBranch(random_conv(rng, channels, channels, 3, dtype=dtype)))
    return RepBlockSpec(tuple(branches), name="mbga")


def _edge_branches(rng, channels, dtype, names=("sobel_x", "sobel_y", "laplacian")):
    bank = fixed_filter_bank(dtype)
    return [
        FixedFilterBranch(
            filter=bank[name],
            scale=rng.normal(0.0, 0.5, channels).astype(dtype),
            pre=random_conv(rng, channels, channels, 1, dtype=dtype),
            bias=rng.normal(0.0, 0.1, channels).astype(dtype),
            name=name,
        )
        for name in names
    ]


def ecb_block(
    rng: np.random.Generator,
    channels: int,
    depth_multiplier: int = 2,
    with_identity: bool = False,
    dtype=np.float32,
) -> RepBlockSpec:
    """
    边缘导向卷积块：3×3、1×1 扩张-3×3、1×1-Sobel_x、1×1-Sobel_y、1×1-Laplacian

    Args:
        rng: 随机数生成器
        channels: 通道数
        depth_multiplier: 1×1-3×3 分支的扩张倍数
        with_identity: 是否附加恒等分支
        dtype: 权重 dtype
    """
    mid = channels * depth_multiplier
    branches = [
        ConvBranch(random_conv(rng, channels, channels, 3, dtype=dtype)),
        SeqBranch(
            (
                random_conv(rng, channels, mid, 1, dtype=dtype),
                random_conv(rng, mid, channels, 3, dtype=dtype),
            )
        ),
        *_edge_branches(rng, channels, dtype),
    ]
    if with_identity:
        branches.append(IdentityBranch(channels))
    return RepBlockSpec(tuple(branches), name="ecb")


def edge_block(rng: np.random.Generator, channels: int, dtype=np.float32) -> RepBlockSpec:
    """
    边缘增强块：3×3、1×1、1×1-3×3、三种 1×1-边缘滤波、固定高通滤波 HPF 与恒等分支
    """
    bank = fixed_filter_bank(dtype)
    branches = [
        ConvBranch(random_conv(rng, channels, channels, 3, dtype=dtype)),
        ConvBranch(random_conv(rng, channels, channels, 1, dtype=dtype)),
        SeqBranch(
            (
                random_conv(rng, channels, channels, 1, dtype=dtype),
                random_conv(rng, channels, channels, 3, dtype=dtype),
            )
        ),
        *_edge_branches(rng, channels, dtype),
        FixedFilterBranch(
            filter=bank["hpf"],
            scale=rng.normal(0.0, 0.5, channels).astype(dtype),
            name="hpf",
        ),
        IdentityBranch(channels),
    ]
    return RepBlockSpec(tuple(branches), name="edge")


def expanded_ecb_block(
    rng: np.random.Generator, channels: int, expand: int = 2, dtype=np.float32
) -> RepBlockSpec:
    """
    扩张式 ECB：1×1 扩张 → ECB 各分支 → 1×1 收缩，外加残差

    扩张与收缩卷积分配到每条分支上，因此每条分支仍是至多一个 3×3 的串联链。
    边缘分支先把前置 1×1 与固定滤波器合成为稠密 3×3，再置于扩张/收缩之间。
    """
    wide = channels * expand

    def wrap(*inner: ConvSpec) -> SeqBranch:
        return SeqBranch(
            (
                random_conv(rng, channels, wide, 1, dtype=dtype),
                *inner,
                random_conv(rng, wide, channels, 1, dtype=dtype),
            )
        )

    bank = fixed_filter_bank(dtype)
    branches = [
        wrap(random_conv(rng, wide, wide, 3, dtype=dtype)),
        wrap(
            random_conv(rng, wide, wide * 2, 1, dtype=dtype),
            random_conv(rng, wide * 2, wide, 3, dtype=dtype),
        ),
    ]
    for name in ("sobel_x", "sobel_y", "laplacian"):
        edge = embed_fixed_filter(
            bank[name],
            wide,
            rng.normal(0.0, 0.5, wide).astype(dtype),
            pre=random_conv(rng, wide, wide, 1, dtype=dtype),
            bias=rng.normal(0.0, 0.1, wide).astype(dtype),
        )
        branches.append(wrap(edge))
    branches.append(IdentityBranch(channels))
    return RepBlockSpec(tuple(branches), name="expanded_ecb")


def repvgg_block(rng: np.random.Generator, channels: int, dtype=np.float32) -> RepBlockSpec:
    """RepVGG 块：3×3-BN、1×1-BN 与 BN 恒等分支（卷积不带偏置）"""
    identity = np.zeros((channels, channels, 1, 1))
    identity[np.arange(channels), np.arange(channels), 0, 0] = 1.0
    return RepBlockSpec(
        (
            ConvBranch(
                random_conv(rng, channels, channels, 3, bias=False, dtype=dtype),
                random_batchnorm(rng, channels),
            ),
            ConvBranch(
                random_conv(rng, channels, channels, 1, bias=False, dtype=dtype),
                random_batchnorm(rng, channels),
            ),
            ConvBranch(ConvSpec(identity.astype(dtype)), random_batchnorm(rng, channels)),
        ),
        name="repvgg",
    )


def acnet_block(rng: np.random.Generator, channels: int, dtype=np.float32) -> RepBlockSpec:
    """非对称卷积块：3×3、1×3、3×1 三条带 BN 的分支"""
    return RepBlockSpec(
        tuple(
            ConvBranch(
                random_conv(rng, channels, channels, kernel, bias=False, dtype=dtype),
                random_batchnorm(rng, channels),
            )
            for kernel in ((3, 3), (1, 3), (3, 1))
        ),
        name="acnet",
    )


def conv_lora_block(
    rng: np.random.Generator,
    channels: int,
    rank: int = 2,
    base: Optional[ConvSpec] = None,
    zero_y: bool = True,
    dtype=np.float32,
) -> RepBlockSpec:
    """
    ConvLoRA 块：冻结的预训练卷积加低秩支路 (k×k 降维 Y → 1×1 升维 X)

    X 高斯初始化，Y 默认零初始化。

    Args:
        rng: 随机数生成器
        channels: 通道数
        rank: 低秩 r
        base: 预训练卷积，为None时随机生成 3×3 卷积
        zero_y: Y 是否零初始化
        dtype: 权重 dtype
    """
    base = base if base is not None else random_conv(rng, channels, channels, 3, dtype=dtype)
    y_down = random_conv(rng, base.c_in, rank, base.kernel_size, bias=False, dtype=dtype, zero=zero_y)
    x_up = ConvSpec(rng.normal(0.0, 1.0, size=(base.c_out, rank, 1, 1)).astype(dtype))
    return RepBlockSpec((ConvBranch(base), SeqBranch((y_down, x_up))), name="conv_lora")


REP_CONSTRUCTORS: Dict[str, Callable[..., RepBlockSpec]] = {
    "conv3xc": lambda rng, c, dtype=np.float32: conv3xc_block(rng, c, c, dtype=dtype),
    "ten_in_one": ten_in_one_block,
    "mbga": mbga_block,
    "ecb": ecb_block,
    "edge": edge_block,
    "expanded_ecb": expanded_ecb_block,
    "repvgg": repvgg_block,
    "acnet": acnet_block,
    "conv_lora": conv_lora_block,
}


def build_rep_block(
    name: str, rng: np.random.Generator, channels: int, dtype=np.float32
) -> RepBlockSpec:
    """
    按名称构造同通道数的重参数化模块

    Raises:
        FusionError: 未知构造器名称
    """
    if name not in REP_CONSTRUCTORS:
        raise FusionError(f"未知的重参数化模块: {name}，可选 {sorted(REP_CONSTRUCTORS)}")
    return REP_CONSTRUCTORS[name](rng, channels, dtype=dtype)
