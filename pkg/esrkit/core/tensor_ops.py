"""
张量运算模块

NCHW 布局下的确定性张量运算：卷积、激活、像素重排、上采样、
通道拆分/拼接、逐元素运算与最大池化，并提供一个独立的朴素
七重循环卷积作为测试参照。

约定：
- 卷积为互相关（不翻转卷积核），只支持零填充；
- 每个输出元素在 float64 中累加，写回时转换为输入张量的 dtype
  （float32 为常规模式，float64 为验证模式）；
- 多线程时按输出通道分块，每个输出元素的累加顺序与线程划分无关。
"""

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from esrkit.exceptions import ShapeError

IntPair = Union[int, Tuple[int, int]]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_thread_lock = threading.Lock()
_num_threads = 1
_executor: Optional[ThreadPoolExecutor] = None


def set_num_threads(n: int) -> None:
    """
    设置引擎线程数

    Args:
        n: 线程数，必须 >= 1
    """
    global _num_threads, _executor
    if n < 1:
        raise ValueError(f"线程数必须 >= 1: {n}")
    with _thread_lock:
        if n != _num_threads and _executor is not None:
            _executor.shutdown(wait=True)
            _executor = None
        _num_threads = n


def get_num_threads() -> int:
    """返回当前引擎线程数"""
    return _num_threads


@contextmanager
def num_threads(n: Optional[int]) -> Iterator[int]:
    """
    临时固定引擎线程数的上下文管理器

    Args:
        n: 线程数，为None时保持当前设置

    Yields:
        生效的线程数
    """
    previous = get_num_threads()
    if n is not None:
        set_num_threads(n)
    try:
        yield get_num_threads()
    finally:
        set_num_threads(previous)


def _get_executor() -> ThreadPoolExecutor:
    global _executor
    with _thread_lock:
        if _executor is None:
            _executor = ThreadPoolExecutor(
                max_workers=_num_threads, thread_name_prefix="esrkit-conv"
            )
        return _executor


def _pair(value: IntPair, name: str) -> Tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ShapeError(f"{name} 必须是整数或二元组: {value}", dim=name)
    return pair[0], pair[1]


def as_tensor(x: np.ndarray, name: str = "x") -> np.ndarray:
    """
    将输入规范化为 NCHW 浮点张量

    float32/float64 保持原 dtype，其余类型转换为 float32。

    Args:
        x: 输入数组
        name: 用于错误信息的张量名

    Returns:
        4 维浮点数组

    Raises:
        ShapeError: 维度不是 4
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name} 必须是 NCHW 四维张量，实际维度 {arr.ndim}", dim="ndim")
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """
    卷积规格

    Attributes:
        weight: 卷积核，形状 (C_out, C_in/groups, kH, kW)
        bias: 可选偏置，长度 C_out
        stride: 步长 (sH, sW)
        padding: 零填充 (pH, pW)
        dilation: 膨胀 (dH, dW)
        groups: 分组数，须同时整除 C_in 与 C_out
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: IntPair = (1, 1)
    padding: IntPair = (0, 0)
    dilation: IntPair = (1, 1)
    groups: int = 1

    def __post_init__(self) -> None:
        weight = np.asarray(self.weight)
        if weight.dtype not in _FLOAT_DTYPES:
            weight = weight.astype(np.float32)
        if weight.ndim != 4:
            raise ShapeError(f"卷积核必须是四维 (C_out, C_in/g, kH, kW)，实际 {weight.shape}")
        if min(weight.shape) < 1:
            raise ShapeError(f"卷积核各维度必须 >= 1，实际 {weight.shape}")
        object.__setattr__(self, "weight", weight)

        stride = _pair(self.stride, "stride")
        padding = _pair(self.padding, "padding")
        dilation = _pair(self.dilation, "dilation")
        if min(stride) < 1:
            raise ShapeError(f"stride 必须 >= 1: {stride}", dim="stride")
        if min(padding) < 0:
            raise ShapeError(f"padding 必须 >= 0: {padding}", dim="padding")
        if min(dilation) < 1:
            raise ShapeError(f"dilation 必须 >= 1: {dilation}", dim="dilation")
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)
        object.__setattr__(self, "dilation", dilation)

        groups = int(self.groups)
        if groups < 1 or weight.shape[0] % groups != 0:
            raise ShapeError(
                f"groups={groups} 必须整除 C_out={weight.shape[0]}", dim="groups"
            )
        object.__setattr__(self, "groups", groups)

        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=weight.dtype).reshape(-1)
            if bias.shape[0] != weight.shape[0]:
                raise ShapeError(
                    f"偏置长度 {bias.shape[0]} 与 C_out={weight.shape[0]} 不一致", dim="bias"
                )
            object.__setattr__(self, "bias", bias)

    @classmethod
    def same(
        cls,
        weight: np.ndarray,
        bias: Optional[np.ndarray] = None,
        dilation: IntPair = 1,
        groups: int = 1,
    ) -> "ConvSpec":
        """
        按 "same" 尺寸创建步长为 1 的卷积规格

        奇数核的填充为 (k-1)/2·dilation。

        Args:
            weight: 卷积核
            bias: 可选偏置
            dilation: 膨胀
            groups: 分组数

        Returns:
            卷积规格
        """
        kh, kw = np.shape(weight)[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same 填充只支持奇数核，实际 {kh}×{kw}", dim="kernel")
        dh, dw = _pair(dilation, "dilation")
        return cls(
            weight=weight,
            bias=bias,
            padding=((kh - 1) // 2 * dh, (kw - 1) // 2 * dw),
            dilation=(dh, dw),
            groups=groups,
        )

    @property
    def c_out(self) -> int:
        """输出通道数"""
        return int(self.weight.shape[0])

    @property
    def c_in(self) -> int:
        """输入通道数"""
        return int(self.weight.shape[1]) * self.groups

    @property
    def kernel_size(self) -> Tuple[int, int]:
        """卷积核尺寸 (kH, kW)"""
        return int(self.weight.shape[2]), int(self.weight.shape[3])

    @property
    def dtype(self) -> np.dtype:
        """权重 dtype"""
        return self.weight.dtype

    @property
    def param_count(self) -> int:
        """权重与偏置的元素总数"""
        return int(self.weight.size) + (0 if self.bias is None else int(self.bias.size))

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        """
        计算输出空间尺寸

        Args:
            h: 输入高度
            w: 输入宽度

        Returns:
            (out_h, out_w)
        """
        (kh, kw), (sh, sw) = self.kernel_size, self.stride
        (ph, pw), (dh, dw) = self.padding, self.dilation
        out_h = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        out_w = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        return out_h, out_w

    def check_input(self, c: int, h: int, w: int) -> Tuple[int, int]:
        """
        校验输入形状并返回输出空间尺寸

        Raises:
            ShapeError: 通道数不匹配或输出尺寸小于 1
        """
        if c != self.c_in:
            raise ShapeError(f"输入通道数 c={c} 与卷积 C_in={self.c_in} 不一致", dim="c")
        out_h, out_w = self.output_size(h, w)
        if out_h < 1:
            raise ShapeError(f"输入高度 h={h} 过小，卷积输出高度为 {out_h}", dim="h")
        if out_w < 1:
            raise ShapeError(f"输入宽度 w={w} 过小，卷积输出宽度为 {out_w}", dim="w")
        return out_h, out_w


def _conv_matmul(cols: np.ndarray, wt: np.ndarray) -> np.ndarray:
    """cols (n, g, P, K) @ wt (g, K, cog) -> (n, g, P, cog)，按输出通道分块并行"""
    threads = get_num_threads()
    cog = wt.shape[2]
    if threads <= 1 or cog < 2:
        return np.matmul(cols, wt)

    blocks = [b for b in np.array_split(np.arange(cog), min(threads, cog)) if b.size]
    pool = _get_executor()
    parts = list(pool.map(lambda idx: np.matmul(cols, wt[:, :, idx[0] : idx[-1] + 1]), blocks))
    return np.concatenate(parts, axis=-1)


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """
    二维卷积（互相关，零填充）

    Args:
        x: 输入张量 (n, C_in, h, w)
        spec: 卷积规格

    Returns:
        输出张量 (n, C_out, out_h, out_w)，dtype 与输入一致

    Raises:
        ShapeError: 通道数不匹配或输出尺寸小于 1
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    out_h, out_w = spec.check_input(c, h, w)

    (kh, kw), (sh, sw) = spec.kernel_size, spec.stride
    (ph, pw), (dh, dw) = spec.padding, spec.dilation
    g = spec.groups
    cig, cog = c // g, spec.c_out // g

    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (dh * (kh - 1) + 1, dw * (kw - 1) + 1), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw, ::dh, ::dw][:, :, :out_h, :out_w]

    # (n, g, cig, oh, ow, kh, kw) -> (n, g, oh·ow, cig·kh·kw)
    cols = windows.reshape(n, g, cig, out_h, out_w, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    cols = np.ascontiguousarray(cols).reshape(n, g, out_h * out_w, cig * kh * kw)
    wt = spec.weight.astype(np.float64).reshape(g, cog, cig * kh * kw).transpose(0, 2, 1)

    out = _conv_matmul(cols, wt)
    out = out.transpose(0, 1, 3, 2).reshape(n, spec.c_out, out_h, out_w)
    if spec.bias is not None:
        out = out + spec.bias.astype(np.float64)[None, :, None, None]
    return out.astype(x.dtype)


def conv2d_oracle(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """
    朴素七重循环卷积参照实现

    与 conv2d 数学含义相同，仅用于测试比对。

    Args:
        x: 输入张量
        spec: 卷积规格

    Returns:
        输出张量
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    out_h, out_w = spec.check_input(c, h, w)

    (kh, kw), (sh, sw) = spec.kernel_size, spec.stride
    (ph, pw), (dh, dw) = spec.padding, spec.dilation
    cig, cog = c // spec.groups, spec.c_out // spec.groups
    xv = x.astype(np.float64)
    wv = spec.weight.astype(np.float64)

    out = np.zeros((n, spec.c_out, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for o in range(spec.c_out):
            group = o // cog
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0 if spec.bias is None else float(spec.bias[o])
                    for ci in range(cig):
                        src_c = group * cig + ci
                        for u in range(kh):
                            row = i * sh - ph + u * dh
                            if row < 0 or row >= h:
                                continue
                            for v in range(kw):
                                col = j * sw - pw + v * dw
                                if 0 <= col < w:
                                    acc += xv[b, src_c, row, col] * wv[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out.astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    """ReLU"""
    return np.maximum(x, 0).astype(x.dtype)


def leaky_relu(x: np.ndarray, alpha: float = 0.01) -> np.ndarray:
    """LeakyReLU"""
    return np.where(x >= 0, x, alpha * x).astype(x.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """数值稳定的 Sigmoid"""
    return expit(x.astype(np.float64)).astype(x.dtype)


def silu(x: np.ndarray) -> np.ndarray:
    """SiLU: x·σ(x)"""
    xd = x.astype(np.float64)
    return (xd * expit(xd)).astype(x.dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU 精确 erf 形式: 0.5·x·(1 + erf(x/√2))"""
    xd = x.astype(np.float64)
    return (0.5 * xd * (1.0 + erf(xd / math.sqrt(2.0)))).astype(x.dtype)


def shifted_sigmoid(x: np.ndarray, bias: float = -0.5) -> np.ndarray:
    """平移 Sigmoid: σ(x) + b，b=-0.5 时为奇函数"""
    return (expit(x.astype(np.float64)) + bias).astype(x.dtype)


ACTIVATIONS = ("relu", "leaky_relu", "silu", "gelu", "sigmoid", "shifted_sigmoid")


def activation(
    x: np.ndarray, kind: str, alpha: float = 0.01, bias: float = -0.5
) -> np.ndarray:
    """
    按名称应用逐元素激活函数

    Args:
        x: 输入数组
        kind: relu / leaky_relu / silu / gelu / sigmoid / shifted_sigmoid
        alpha: leaky_relu 负半轴斜率
        bias: shifted_sigmoid 的平移量

    Returns:
        激活后的数组，dtype 不变
    """
    x = np.asarray(x)
    if x.dtype not in _FLOAT_DTYPES:
        x = x.astype(np.float32)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "silu":
        return silu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "shifted_sigmoid":
        return shifted_sigmoid(x, bias)
    raise ValueError(f"未知激活函数: {kind}，可选 {ACTIVATIONS}")


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """
    像素重排（亚像素卷积）

    输入通道 c·r²+i·r+j 映射到输出 out[c, h·r+i, w·r+j]。

    Args:
        x: 输入张量 (n, c, h, w)
        r: 放大倍数

    Returns:
        输出张量 (n, c/r², h·r, w·r)

    Raises:
        ShapeError: c 不能被 r² 整除
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if r < 1:
        raise ShapeError(f"放大倍数 r 必须 >= 1: {r}", dim="r")
    if c % (r * r) != 0:
        raise ShapeError(f"通道数 c={c} 不能被 r²={r * r} 整除", dim="c")
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """
    像素重排的逆运算

    Args:
        x: 输入张量 (n, c, h, w)，h 与 w 须被 r 整除
        r: 缩小倍数

    Returns:
        输出张量 (n, c·r², h/r, w/r)
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if r < 1:
        raise ShapeError(f"缩小倍数 r 必须 >= 1: {r}", dim="r")
    if h % r != 0:
        raise ShapeError(f"高度 h={h} 不能被 r={r} 整除", dim="h")
    if w % r != 0:
        raise ShapeError(f"宽度 w={w} 不能被 r={r} 整除", dim="w")
    return (
        x.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )


def _bilinear_axis(in_size: int, out_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """align_corners=False 的一维插值索引与权重"""
    dst = np.arange(out_size, dtype=np.float64)
    src = np.maximum((dst + 0.5) * in_size / out_size - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    return i0, i1, src - i0


def resize_bilinear(x: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """
    双线性缩放到指定尺寸（align_corners=False）

    源坐标 src = (dst + 0.5)·in/out − 0.5，小于 0 时截断为 0，
    越过末端时取边界像素。

    Args:
        x: 输入张量
        size: 目标尺寸 (H, W)

    Returns:
        缩放后的张量
    """
    x = as_tensor(x)
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"目标尺寸必须为正: {size}", dim="size")
    xd = x.astype(np.float64)
    r0, r1, ry = _bilinear_axis(x.shape[2], out_h)
    c0, c1, rx = _bilinear_axis(x.shape[3], out_w)

    rows = xd[:, :, r0, :] * (1.0 - ry)[:, None] + xd[:, :, r1, :] * ry[:, None]
    out = rows[:, :, :, c0] * (1.0 - rx) + rows[:, :, :, c1] * rx
    return out.astype(x.dtype)


def upsample(x: np.ndarray, r: int, mode: str = "nearest") -> np.ndarray:
    """
    整数倍上采样

    Args:
        x: 输入张量 (n, c, h, w)
        r: 放大倍数，>= 1
        mode: nearest 或 bilinear（align_corners=False）

    Returns:
        输出张量 (n, c, h·r, w·r)
    """
    x = as_tensor(x)
    if r < 1:
        raise ShapeError(f"放大倍数 r 必须 >= 1: {r}", dim="r")
    if mode == "nearest":
        return np.repeat(np.repeat(x, r, axis=2), r, axis=3)
    if mode == "bilinear":
        return resize_bilinear(x, (x.shape[2] * r, x.shape[3] * r))
    raise ValueError(f"未知上采样模式: {mode}")


def channel_split(x: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    """
    沿通道维拆分

    Args:
        x: 输入张量
        sizes: 各部分通道数，和须等于 x.c

    Returns:
        张量列表
    """
    x = as_tensor(x)
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"拆分尺寸 {list(sizes)} 之和须等于通道数 {x.shape[1]}", dim="c")
    bounds = np.cumsum(sizes)[:-1]
    return [part.copy() for part in np.split(x, bounds, axis=1)]


def channel_concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    """
    沿通道维拼接

    Args:
        xs: 张量列表，除通道维外形状一致

    Returns:
        拼接后的张量
    """
    if not xs:
        raise ShapeError("拼接列表不能为空")
    tensors = [as_tensor(t) for t in xs]
    n, _, h, w = tensors[0].shape
    for idx, t in enumerate(tensors[1:], start=1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"第 {idx} 个张量形状 {t.shape} 无法与 {tensors[0].shape} 拼接")
    return np.concatenate(tensors, axis=1)


def _check_same(x: np.ndarray, y: np.ndarray, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op} 要求形状一致: {x.shape} vs {y.shape}")


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """逐元素加法"""
    x, y = as_tensor(x), as_tensor(y, "y")
    _check_same(x, y, "add")
    return (x + y).astype(x.dtype)


def mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """逐元素乘法"""
    x, y = as_tensor(x), as_tensor(y, "y")
    _check_same(x, y, "mul")
    return (x * y).astype(x.dtype)


def maxpool(x: np.ndarray, k: int, s: Optional[int] = None) -> np.ndarray:
    """
    最大池化（无填充）

    Args:
        x: 输入张量
        k: 池化窗口
        s: 步长，默认等于 k

    Returns:
        输出张量 (n, c, ⌊(h−k)/s⌋+1, ⌊(w−k)/s⌋+1)
    """
    x = as_tensor(x)
    s = k if s is None else s
    if k < 1 or s < 1:
        raise ShapeError(f"池化窗口与步长必须 >= 1: k={k}, s={s}")
    h, w = x.shape[2:]
    if h < k:
        raise ShapeError(f"高度 h={h} 小于池化窗口 {k}", dim="h")
    if w < k:
        raise ShapeError(f"宽度 w={w} 小于池化窗口 {k}", dim="w")
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return windows.max(axis=(4, 5))


def pad_constant_per_channel(
    x: np.ndarray, padding: IntPair, values: Optional[np.ndarray]
) -> np.ndarray:
    """
    用逐通道常数填充边界

    Args:
        x: 输入张量 (n, c, h, w)
        padding: (pH, pW)
        values: 长度为 c 的填充值，为None时等价于零填充

    Returns:
        填充后的张量
    """
    x = as_tensor(x)
    ph, pw = _pair(padding, "padding")
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    if values is not None:
        values = np.asarray(values, dtype=x.dtype).reshape(-1)
        if values.shape[0] != c:
            raise ShapeError(f"填充值长度 {values.shape[0]} 与通道数 {c} 不一致", dim="c")
        out[...] = values[None, :, None, None]
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out
