"""
结构重参数化模块

把训练期的多分支卷积结构无损折叠为一个可部署的 ConvSpec：
- fuse_sequential: 1×1 与 k×k 卷积的串联收缩（两种方向）
- fuse_parallel: 同尺寸奇偶性的并联分支居中补零后求和
- identity_to_kernel / fold_batchnorm / merge_lora / embed_fixed_filter
- fuse_block: 按分支类型逐一降阶后并联融合

串联分支的参照前向采用偏置填充：k×k 卷积之前的 1×1 前缀在零输入上的
输出（即复合偏置）作为边界填充值，因此融合结果在边界处也与参照前向一致。
融合只支持步长 1、分组 1、膨胀 1 的卷积；深度可分离的固定滤波器在并联
融合前先展开为分组 1 的对角卷积核。
"""

from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from esrkit.core.tensor_ops import ConvSpec, conv2d, pad_constant_per_channel
from esrkit.exceptions import FusionError, ShapeError

KernelSize = Union[int, Tuple[int, int]]


def _kernel_pair(k: KernelSize) -> Tuple[int, int]:
    if isinstance(k, (int, np.integer)):
        return int(k), int(k)
    kh, kw = k
    return int(kh), int(kw)


def _same_padding(kernel: Tuple[int, int]) -> Tuple[int, int]:
    return (kernel[0] - 1) // 2, (kernel[1] - 1) // 2


def _is_pointwise(conv: ConvSpec) -> bool:
    return conv.kernel_size == (1, 1)


def _require_plain(conv: ConvSpec, role: str) -> None:
    if conv.stride != (1, 1):
        raise FusionError(f"{role} 的步长必须为 1，实际 {conv.stride}")
    if conv.groups != 1:
        raise FusionError(f"{role} 的分组数必须为 1，实际 {conv.groups}")
    if conv.dilation != (1, 1):
        raise FusionError(f"{role} 的膨胀必须为 1，实际 {conv.dilation}")


def _bias_or_zeros(conv: ConvSpec) -> np.ndarray:
    if conv.bias is None:
        return np.zeros(conv.c_out, dtype=np.float64)
    return conv.bias.astype(np.float64)


# ---------------------------------------------------------------------------
# 分支类型
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BatchNormStats:
    """
    BatchNorm 推理统计量

    Attributes:
        gamma: 缩放 γ
        beta: 平移 β
        mean: 滑动均值 μ
        var: 滑动方差 σ²
        eps: 数值稳定项 ε
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self) -> None:
        arrays = {}
        for name in ("gamma", "beta", "mean", "var"):
            arrays[name] = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise ShapeError(f"BN 统计量长度不一致: { {k: v.shape[0] for k, v in arrays.items()} }")
        for name, value in arrays.items():
            object.__setattr__(self, name, value)

    @property
    def channels(self) -> int:
        """通道数"""
        return int(self.gamma.shape[0])

    def apply(self, y: np.ndarray) -> np.ndarray:
        """按推理公式 γ·(y−μ)/√(σ²+ε)+β 作用于 NCHW 张量"""
        scale = self.gamma / np.sqrt(self.var + self.eps)
        out = (y.astype(np.float64) - self.mean[None, :, None, None]) * scale[
            None, :, None, None
        ] + self.beta[None, :, None, None]
        return out.astype(y.dtype)


@dataclass(frozen=True, eq=False)
class ConvBranch:
    """单卷积分支，可选紧随其后的 BatchNorm"""

    conv: ConvSpec
    bn: Optional[BatchNormStats] = None

    def __post_init__(self) -> None:
        if self.bn is not None and self.bn.channels != self.conv.c_out:
            raise ShapeError(f"BN 通道数 {self.bn.channels} 与 C_out={self.conv.c_out} 不一致")


@dataclass(frozen=True, eq=False)
class SeqBranch:
    """
    串联卷积分支

    至多包含一个大于 1×1 的卷积，1×1 卷积不得带填充。
    """

    convs: Tuple[ConvSpec, ...]

    def __post_init__(self) -> None:
        convs = tuple(self.convs)
        if not convs:
            raise FusionError("串联分支不能为空")
        for prev, nxt in zip(convs, convs[1:]):
            if prev.c_out != nxt.c_in:
                raise ShapeError(f"串联分支通道不衔接: {prev.c_out} -> {nxt.c_in}", dim="c")
        spatial = [c for c in convs if not _is_pointwise(c)]
        if len(spatial) > 1:
            raise FusionError(f"串联分支至多一个非 1×1 卷积，实际 {len(spatial)} 个")
        for conv in convs:
            if _is_pointwise(conv) and conv.padding != (0, 0):
                raise FusionError("串联分支中的 1×1 卷积不能带填充")
        object.__setattr__(self, "convs", convs)


@dataclass(frozen=True)
class IdentityBranch:
    """恒等（跳连）分支"""

    channels: int


@dataclass(frozen=True, eq=False)
class ScaledIdentityBranch:
    """逐通道缩放的恒等分支 γ⊙x"""

    scale: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale", np.asarray(self.scale).reshape(-1))


@dataclass(frozen=True, eq=False)
class FixedFilterBranch:
    """
    固定滤波器分支

    输出为 scale_c·(filter ⋆ y_c) + bias_c，其中 y = pre(x)（若有前置 1×1）
    否则 y = x；filter 为冻结的 3×3 常数核，按深度可分离方式作用。

    Attributes:
        filter: 冻结的滤波核 (kH, kW)
        scale: 逐通道可学习缩放，长度 C
        pre: 可选前置 1×1 卷积
        bias: 可选逐通道偏置
        name: 滤波器名称（sobel_x / sobel_y / laplacian / hpf / custom）
    """

    filter: np.ndarray
    scale: np.ndarray
    pre: Optional[ConvSpec] = None
    bias: Optional[np.ndarray] = None
    name: str = "custom"

    def __post_init__(self) -> None:
        filt = np.asarray(self.filter)
        if filt.ndim != 2 or filt.shape[0] % 2 == 0 or filt.shape[1] % 2 == 0:
            raise ShapeError(f"固定滤波器必须是奇数尺寸二维核，实际 {filt.shape}")
        scale = np.asarray(self.scale).reshape(-1)
        object.__setattr__(self, "filter", filt)
        object.__setattr__(self, "scale", scale)
        if self.pre is not None:
            if not _is_pointwise(self.pre):
                raise FusionError("固定滤波器的前置卷积必须是 1×1")
            if self.pre.c_out != scale.shape[0]:
                raise ShapeError(f"前置卷积输出 {self.pre.c_out} 与缩放长度 {scale.shape[0]} 不一致")
        if self.bias is not None:
            bias = np.asarray(self.bias).reshape(-1)
            if bias.shape[0] != scale.shape[0]:
                raise ShapeError(f"偏置长度 {bias.shape[0]} 与缩放长度 {scale.shape[0]} 不一致")
            object.__setattr__(self, "bias", bias)

    @property
    def channels(self) -> int:
        """输出通道数"""
        return int(self.scale.shape[0])

    def depthwise(self) -> ConvSpec:
        """该分支的深度可分离卷积形式（参照前向使用）"""
        dtype = self.pre.dtype if self.pre is not None else self.scale.dtype
        if dtype not in (np.float32, np.float64):
            dtype = np.dtype(np.float32)
        weight = self.scale.astype(np.float64)[:, None, None, None] * self.filter.astype(
            np.float64
        )[None, None]
        return ConvSpec.same(
            weight.astype(dtype),
            bias=None if self.bias is None else self.bias.astype(dtype),
            groups=self.channels,
        )


BranchSpec = Union[ConvBranch, SeqBranch, IdentityBranch, ScaledIdentityBranch, FixedFilterBranch]


def branch_channels(branch: BranchSpec) -> Tuple[int, int]:
    """
    返回分支的 (C_in, C_out)

    Args:
        branch: 分支规格

    Returns:
        输入与输出通道数
    """
    if isinstance(branch, ConvBranch):
        return branch.conv.c_in, branch.conv.c_out
    if isinstance(branch, SeqBranch):
        return branch.convs[0].c_in, branch.convs[-1].c_out
    if isinstance(branch, IdentityBranch):
        return branch.channels, branch.channels
    if isinstance(branch, ScaledIdentityBranch):
        c = int(branch.scale.shape[0])
        return c, c
    if isinstance(branch, FixedFilterBranch):
        c_in = branch.pre.c_in if branch.pre is not None else branch.channels
        return c_in, branch.channels
    raise FusionError(f"未知分支类型: {type(branch).__name__}")


def branch_extent(branch: BranchSpec) -> Tuple[int, int]:
    """分支等价卷积核的空间尺寸（恒等分支为 1×1）"""
    if isinstance(branch, ConvBranch):
        return branch.conv.kernel_size
    if isinstance(branch, SeqBranch):
        kh = 1 + sum(c.kernel_size[0] - 1 for c in branch.convs)
        kw = 1 + sum(c.kernel_size[1] - 1 for c in branch.convs)
        return kh, kw
    if isinstance(branch, FixedFilterBranch):
        return int(branch.filter.shape[0]), int(branch.filter.shape[1])
    return 1, 1


def _branch_has_bias(branch: BranchSpec) -> bool:
    if isinstance(branch, ConvBranch):
        return branch.conv.bias is not None or branch.bn is not None
    if isinstance(branch, SeqBranch):
        return any(c.bias is not None for c in branch.convs)
    if isinstance(branch, FixedFilterBranch):
        return branch.bias is not None or (branch.pre is not None and branch.pre.bias is not None)
    return False


@dataclass(frozen=True, eq=False)
class RepBlockSpec:
    """
    多分支重参数化模块规格

    Attributes:
        branches: 分支列表，所有分支输入/输出通道一致
        target: 融合核尺寸上限，默认 3×3；实际融合核取覆盖全部分支的最小奇数尺寸
        name: 构造器名称，仅用于日志与序列化
    """

    branches: Tuple[BranchSpec, ...]
    target: KernelSize = (3, 3)
    name: str = "custom"
    _channels: Tuple[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        branches = tuple(self.branches)
        if not branches:
            raise FusionError("重参数化模块至少需要一个分支")
        target = _kernel_pair(self.target)
        if target[0] % 2 == 0 or target[1] % 2 == 0:
            raise FusionError(f"目标核尺寸必须为奇数: {target}")
        channels = {branch_channels(b) for b in branches}
        if len(channels) != 1:
            raise ShapeError(f"各分支通道数不一致: {sorted(channels)}", dim="c")
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "_channels", channels.pop())

        fused = self.fused_param_count
        unfused = rep_block_param_count(self, count_frozen=False)
        if fused > unfused:
            raise FusionError(
                f"模块 {self.name} 融合后参数量 {fused} 超过未融合的 {unfused}，"
                f"需要一条覆盖 {self.fused_kernel[0]}×{self.fused_kernel[1]} 的稠密卷积分支"
            )

    @property
    def c_in(self) -> int:
        """输入通道数"""
        return self._channels[0]

    @property
    def c_out(self) -> int:
        """输出通道数"""
        return self._channels[1]

    @property
    def fused_kernel(self) -> Tuple[int, int]:
        """融合核尺寸：覆盖全部分支的最小奇数尺寸，超出 target 或奇偶性不符时取 target"""
        target = _kernel_pair(self.target)
        extents = [branch_extent(b) for b in self.branches]
        kernel = []
        for axis, limit in enumerate(target):
            size = max(e[axis] for e in extents)
            kernel.append(size if size <= limit and size % 2 == limit % 2 else limit)
        return kernel[0], kernel[1]

    @property
    def fused_param_count(self) -> int:
        """融合后单个卷积的参数量"""
        kh, kw = self.fused_kernel
        has_bias = any(_branch_has_bias(b) for b in self.branches)
        return self.c_out * self.c_in * kh * kw + (self.c_out if has_bias else 0)

    @property
    def dtype(self) -> np.dtype:
        """模块权重 dtype（取第一个带权重的分支）"""
        for conv in iter_branch_convs(self):
            return conv.dtype
        for branch in self.branches:
            if isinstance(branch, (ScaledIdentityBranch, FixedFilterBranch)):
                if branch.scale.dtype in (np.float32, np.float64):
                    return branch.scale.dtype
        return np.dtype(np.float32)


def iter_branch_convs(spec: RepBlockSpec) -> List[ConvSpec]:
    """列出模块中所有显式卷积（不含固定滤波核本身）"""
    convs: List[ConvSpec] = []
    for branch in spec.branches:
        if isinstance(branch, ConvBranch):
            convs.append(branch.conv)
        elif isinstance(branch, SeqBranch):
            convs.extend(branch.convs)
        elif isinstance(branch, FixedFilterBranch) and branch.pre is not None:
            convs.append(branch.pre)
    return convs


# ---------------------------------------------------------------------------
# 融合代数
# ---------------------------------------------------------------------------


def fuse_sequential(a: ConvSpec, b: ConvSpec) -> ConvSpec:
    """
    融合两个串联卷积 conv(conv(x, a), b)

    支持 1×1 → k×k 与 k×k → 1×1 两种方向。

    Args:
        a: 先执行的卷积
        b: 后执行的卷积

    Returns:
        等价的单个卷积，填充取自非 1×1 的那一个

    Raises:
        FusionError: 通道不衔接、两个核都大于 1×1、或步长/分组/膨胀不为 1
    """
    _require_plain(a, "前一卷积")
    _require_plain(b, "后一卷积")
    if a.c_out != b.c_in:
        raise FusionError(f"串联通道不衔接: a.C_out={a.c_out}, b.C_in={b.c_in}")
    if not _is_pointwise(a) and not _is_pointwise(b):
        raise FusionError(f"两个卷积核都大于 1×1: {a.kernel_size} 与 {b.kernel_size}")

    dtype = np.result_type(a.dtype, b.dtype)
    wa, wb = a.weight.astype(np.float64), b.weight.astype(np.float64)
    bias_a, bias_b = _bias_or_zeros(a), _bias_or_zeros(b)

    if _is_pointwise(a):
        if a.padding != (0, 0):
            raise FusionError("1×1 卷积不能带填充")
        weight = np.einsum("omkl,mi->oikl", wb, wa[:, :, 0, 0])
        bias = np.einsum("omkl,m->o", wb, bias_a) + bias_b
        padding = b.padding
    else:
        if b.padding != (0, 0):
            raise FusionError("1×1 卷积不能带填充")
        weight = np.einsum("om,mikl->oikl", wb[:, :, 0, 0], wa)
        bias = wb[:, :, 0, 0] @ bias_a + bias_b
        padding = a.padding

    has_bias = a.bias is not None or b.bias is not None
    return ConvSpec(
        weight=weight.astype(dtype),
        bias=bias.astype(dtype) if has_bias else None,
        padding=padding,
    )


def pad_kernel(conv: ConvSpec, target: KernelSize) -> ConvSpec:
    """
    把 same 填充的卷积核居中补零到目标尺寸

    Raises:
        FusionError: 核尺寸超过目标、奇偶性不同或填充不是 same
    """
    th, tw = _kernel_pair(target)
    kh, kw = conv.kernel_size
    if kh > th or kw > tw:
        raise FusionError(f"卷积核 {kh}×{kw} 大于目标 {th}×{tw}")
    if kh % 2 != th % 2 or kw % 2 != tw % 2:
        raise FusionError(f"卷积核 {kh}×{kw} 与目标 {th}×{tw} 奇偶性不同")
    if conv.padding != _same_padding((kh, kw)):
        raise FusionError(f"并联分支必须为 same 填充，{kh}×{kw} 核的填充为 {conv.padding}")
    dh, dw = (th - kh) // 2, (tw - kw) // 2
    weight = np.pad(conv.weight, ((0, 0), (0, 0), (dh, dh), (dw, dw)))
    return replace(conv, weight=weight, padding=_same_padding((th, tw)))


def fuse_parallel(branches: Sequence[ConvSpec], target: KernelSize = (3, 3)) -> ConvSpec:
    """
    融合并联卷积分支：居中补零到目标尺寸后求和

    Args:
        branches: 并联卷积列表
        target: 目标核尺寸

    Returns:
        等价的单个卷积

    Raises:
        FusionError: 列表为空、通道不一致、奇偶性/尺寸不匹配或步长/分组不为 1
    """
    if not branches:
        raise FusionError("并联分支列表不能为空")
    c_in, c_out = branches[0].c_in, branches[0].c_out
    target = _kernel_pair(target)

    weight = np.zeros((c_out, c_in, *target), dtype=np.float64)
    bias = np.zeros(c_out, dtype=np.float64)
    has_bias = False
    dtype = branches[0].dtype
    for idx, conv in enumerate(branches):
        _require_plain(conv, f"第 {idx} 个分支")
        if (conv.c_in, conv.c_out) != (c_in, c_out):
            raise FusionError(
                f"第 {idx} 个分支通道 ({conv.c_in}, {conv.c_out}) 与 ({c_in}, {c_out}) 不一致"
            )
        padded = pad_kernel(conv, target)
        weight += padded.weight.astype(np.float64)
        if conv.bias is not None:
            bias += conv.bias.astype(np.float64)
            has_bias = True
        dtype = np.result_type(dtype, conv.dtype)

    return ConvSpec(
        weight=weight.astype(dtype),
        bias=bias.astype(dtype) if has_bias else None,
        padding=_same_padding(target),
    )


def identity_to_kernel(
    channels: int, kernel: KernelSize = (3, 3), dtype: np.dtype = np.float32
) -> ConvSpec:
    """
    构造 Dirac 恒等卷积核（中心为 1）

    Args:
        channels: 通道数 C
        kernel: 奇数核尺寸
        dtype: 权重 dtype

    Returns:
        conv(x, result) == x 的卷积规格

    Raises:
        FusionError: 核尺寸为偶数
    """
    kh, kw = _kernel_pair(kernel)
    if kh % 2 == 0 or kw % 2 == 0:
        raise FusionError(f"恒等卷积核尺寸必须为奇数: {kh}×{kw}")
    weight = np.zeros((channels, channels, kh, kw), dtype=dtype)
    idx = np.arange(channels)
    weight[idx, idx, kh // 2, kw // 2] = 1
    return ConvSpec(weight=weight, padding=_same_padding((kh, kw)))


def fold_batchnorm(
    conv: ConvSpec,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> ConvSpec:
    """
    把卷积后的 BatchNorm 折叠进卷积

    weight_j ← weight_j·γ_j/√(σ²_j+ε)，bias_j ← β_j + (bias_j−μ_j)·γ_j/√(σ²_j+ε)

    Raises:
        ShapeError: 统计量长度与 C_out 不一致
        FusionError: 方差为负
    """
    stats = BatchNormStats(gamma, beta, mean, var, eps)
    if stats.channels != conv.c_out:
        raise ShapeError(f"BN 统计量长度 {stats.channels} 与 C_out={conv.c_out} 不一致")
    if np.any(stats.var < 0):
        raise FusionError("BN 方差不能为负")

    t = stats.gamma / np.sqrt(stats.var + stats.eps)
    weight = conv.weight.astype(np.float64) * t[:, None, None, None]
    bias = stats.beta + (_bias_or_zeros(conv) - stats.mean) * t
    return replace(conv, weight=weight.astype(conv.dtype), bias=bias.astype(conv.dtype))


def merge_lora(w_pt: np.ndarray, x_up: np.ndarray, y_down: np.ndarray) -> np.ndarray:
    """
    合并 ConvLoRA 低秩增量：W = W_PT + X∘Y

    Y 为 k×k 降维卷积 (r, C_in, kH, kW)，X 为 1×1 升维卷积 (C_out, r, 1, 1)，
    二者按串联融合的收缩方式合成后加到预训练权重上。

    Args:
        w_pt: 预训练卷积核 (C_out, C_in, kH, kW)
        x_up: 升维核 (C_out, r, 1, 1)
        y_down: 降维核 (r, C_in, kH, kW)

    Returns:
        合并后的卷积核，dtype 与 w_pt 一致

    Raises:
        FusionError: 秩或形状不匹配
    """
    w_pt, x_up, y_down = np.asarray(w_pt), np.asarray(x_up), np.asarray(y_down)
    if x_up.ndim != 4 or x_up.shape[2:] != (1, 1):
        raise FusionError(f"X 必须是 (C_out, r, 1, 1) 的 1×1 核，实际 {x_up.shape}")
    if y_down.ndim != 4:
        raise FusionError(f"Y 必须是 (r, C_in, kH, kW) 的四维核，实际 {y_down.shape}")
    if x_up.shape[1] != y_down.shape[0]:
        raise FusionError(f"秩不一致: X 的 r={x_up.shape[1]}, Y 的 r={y_down.shape[0]}")
    if (x_up.shape[0], *y_down.shape[1:]) != w_pt.shape:
        raise FusionError(
            f"X∘Y 形状 {(x_up.shape[0], *y_down.shape[1:])} 与 W_PT {w_pt.shape} 不一致"
        )
    delta = np.einsum("or,rikl->oikl", x_up[:, :, 0, 0].astype(np.float64), y_down.astype(np.float64))
    return (w_pt.astype(np.float64) + delta).astype(w_pt.dtype)


def fixed_filter_bank(dtype: np.dtype = np.float32) -> Dict[str, np.ndarray]:
    """
    返回冻结的 3×3 边缘滤波器组

    Returns:
        {sobel_x, sobel_y, laplacian, hpf}，hpf = (1/16)[[−1,−2,−1],[−2,12,−2],[−1,−2,−1]]
    """
    sobel_x = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    laplacian = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
    hpf = np.array([[-1, -2, -1], [-2, 12, -2], [-1, -2, -1]], dtype=np.float64) / 16.0
    return {
        "sobel_x": sobel_x.astype(dtype),
        "sobel_y": sobel_x.T.copy().astype(dtype),
        "laplacian": laplacian.astype(dtype),
        "hpf": hpf.astype(dtype),
    }


def embed_fixed_filter(
    filter: np.ndarray,
    channels: int,
    scale: np.ndarray,
    pre: Optional[ConvSpec] = None,
    bias: Optional[np.ndarray] = None,
) -> ConvSpec:
    """
    把逐通道缩放的深度可分离固定滤波器展开为分组 1 的对角卷积

    Args:
        filter: 固定滤波核 (kH, kW)
        channels: 通道数 C
        scale: 逐通道缩放，长度 C
        pre: 可选前置 1×1 卷积，通过 fuse_sequential 合入
        bias: 可选逐通道偏置

    Returns:
        same 填充的稠密卷积规格
    """
    scale = np.asarray(scale).reshape(-1)
    if scale.shape[0] != channels:
        raise ShapeError(f"缩放长度 {scale.shape[0]} 与通道数 {channels} 不一致", dim="c")
    filt = np.asarray(filter, dtype=np.float64)
    dtype = pre.dtype if pre is not None else np.result_type(scale.dtype, np.float32)

    kh, kw = filt.shape
    weight = np.zeros((channels, channels, kh, kw), dtype=np.float64)
    idx = np.arange(channels)
    weight[idx, idx] = scale.astype(np.float64)[:, None, None] * filt[None]
    dense = ConvSpec(
        weight=weight.astype(dtype),
        bias=None if bias is None else np.asarray(bias).astype(dtype),
        padding=_same_padding((kh, kw)),
    )
    return dense if pre is None else fuse_sequential(pre, dense)


def lower_branch(branch: BranchSpec, target: KernelSize = (3, 3), dtype=np.float32) -> ConvSpec:
    """
    把单个分支降阶为一个卷积

    Args:
        branch: 分支规格
        target: 恒等分支使用的核尺寸
        dtype: 无权重分支（恒等）使用的 dtype

    Returns:
        等价卷积
    """
    if isinstance(branch, ConvBranch):
        if branch.bn is None:
            return branch.conv
        bn = branch.bn
        return fold_batchnorm(branch.conv, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
    if isinstance(branch, SeqBranch):
        return reduce(fuse_sequential, branch.convs)
    if isinstance(branch, IdentityBranch):
        return identity_to_kernel(branch.channels, target, dtype)
    if isinstance(branch, ScaledIdentityBranch):
        ident = identity_to_kernel(int(branch.scale.shape[0]), target, np.float64)
        weight = ident.weight * branch.scale.astype(np.float64)[:, None, None, None]
        return replace(ident, weight=weight.astype(np.result_type(branch.scale.dtype, np.float32)))
    if isinstance(branch, FixedFilterBranch):
        return embed_fixed_filter(
            branch.filter, branch.channels, branch.scale, pre=branch.pre, bias=branch.bias
        )
    raise FusionError(f"未知分支类型: {type(branch).__name__}")


def fuse_block(spec: RepBlockSpec) -> ConvSpec:
    """
    融合整个重参数化模块

    串联分支 → fuse_sequential，恒等 → identity_to_kernel，
    固定滤波器 → embed_fixed_filter，BN → fold_batchnorm，最后 fuse_parallel。

    Args:
        spec: 模块规格

    Returns:
        单个 fused_kernel 尺寸的卷积，参数量不超过未融合模块
    """
    dtype = spec.dtype
    kernel = spec.fused_kernel
    lowered = [lower_branch(b, kernel, dtype) for b in spec.branches]
    fused = fuse_parallel(lowered, kernel)
    fused = replace(
        fused,
        weight=fused.weight.astype(dtype),
        bias=None if fused.bias is None else fused.bias.astype(dtype),
    )
    logger.debug(
        f"融合模块 {spec.name}: {len(spec.branches)} 个分支 -> "
        f"{fused.kernel_size[0]}×{fused.kernel_size[1]} 卷积 ({fused.c_in}->{fused.c_out})"
    )
    return fused


# ---------------------------------------------------------------------------
# 未融合的参照前向
# ---------------------------------------------------------------------------


def _zero_response(convs: Sequence[ConvSpec], channels: int, dtype: np.dtype) -> np.ndarray:
    """1×1 前缀在零输入上的逐通道输出（复合偏置）"""
    y = np.zeros((1, channels, 1, 1), dtype=dtype)
    for conv in convs:
        y = conv2d(y, replace(conv, padding=(0, 0)))
    return y[0, :, 0, 0]


def seq_forward(x: np.ndarray, convs: Sequence[ConvSpec]) -> np.ndarray:
    """
    串联卷积的参照前向（偏置填充）

    带填充的卷积之前若有 1×1 前缀，则边界用前缀的复合偏置填充，
    而不是零。

    Args:
        x: 输入张量
        convs: 串联卷积

    Returns:
        输出张量
    """
    y = x
    for idx, conv in enumerate(convs):
        if conv.padding != (0, 0) and idx > 0:
            fill = _zero_response(convs[:idx], convs[0].c_in, y.dtype)
            y = pad_constant_per_channel(y, conv.padding, fill)
            y = conv2d(y, replace(conv, padding=(0, 0)))
        else:
            y = conv2d(y, conv)
    return y


def branch_forward(x: np.ndarray, branch: BranchSpec) -> np.ndarray:
    """
    单个分支的未融合前向

    Args:
        x: 输入张量
        branch: 分支规格

    Returns:
        分支输出
    """
    if isinstance(branch, ConvBranch):
        y = conv2d(x, branch.conv)
        return y if branch.bn is None else branch.bn.apply(y)
    if isinstance(branch, SeqBranch):
        return seq_forward(x, branch.convs)
    if isinstance(branch, IdentityBranch):
        if x.shape[1] != branch.channels:
            raise ShapeError(f"恒等分支通道 {branch.channels} 与输入 {x.shape[1]} 不一致", dim="c")
        return x.copy()
    if isinstance(branch, ScaledIdentityBranch):
        scale = branch.scale.astype(np.float64)[None, :, None, None]
        return (x.astype(np.float64) * scale).astype(x.dtype)
    if isinstance(branch, FixedFilterBranch):
        convs = [branch.pre, branch.depthwise()] if branch.pre is not None else [branch.depthwise()]
        return seq_forward(x, convs)
    raise FusionError(f"未知分支类型: {type(branch).__name__}")


def rep_block_forward(x: np.ndarray, spec: RepBlockSpec) -> np.ndarray:
    """
    多分支模块的未融合前向：各分支输出逐元素求和

    Args:
        x: 输入张量
        spec: 模块规格

    Returns:
        输出张量
    """
    if x.shape[1] != spec.c_in:
        raise ShapeError(f"输入通道数 c={x.shape[1]} 与模块 C_in={spec.c_in} 不一致", dim="c")
    total = np.zeros((x.shape[0], spec.c_out, x.shape[2], x.shape[3]), dtype=np.float64)
    for branch in spec.branches:
        out = branch_forward(x, branch)
        if out.shape != total.shape:
            raise ShapeError(f"分支输出形状 {out.shape} 与 {total.shape} 不一致")
        total += out
    return total.astype(x.dtype)


def rep_block_param_count(spec: RepBlockSpec, count_frozen: bool = True) -> int:
    """
    未融合模块的参数量

    BN 计 γ、β 两组；固定滤波器按深度可分离缓冲 C·kH·kW 计入（count_frozen=False 时不计）。

    Args:
        spec: 模块规格
        count_frozen: 是否计入固定滤波核

    Returns:
        参数元素数
    """
    total = 0
    for branch in spec.branches:
        if isinstance(branch, ConvBranch):
            total += branch.conv.param_count
            if branch.bn is not None:
                total += 2 * branch.bn.channels
        elif isinstance(branch, SeqBranch):
            total += sum(c.param_count for c in branch.convs)
        elif isinstance(branch, ScaledIdentityBranch):
            total += int(branch.scale.size)
        elif isinstance(branch, FixedFilterBranch):
            total += int(branch.scale.size)
            total += 0 if branch.bias is None else int(branch.bias.size)
            total += 0 if branch.pre is None else branch.pre.param_count
            if count_frozen:
                total += branch.channels * int(branch.filter.size)
    return total
