"""
图像质量指标

挑战赛协议的 PSNR：裁掉 shave 像素边框后在剩余样本上计算 MSE。
默认先量化到 8 位（四舍五入、远离零）再在 RGB 三通道上联合计算。
"""

import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np

from esrkit.exceptions import MetricError

PsnrMode = Literal["uint8", "float"]
PsnrChannel = Literal["rgb", "y"]

# ITU-R BT.601 亮度系数（输入为 [0,1] 时乘以 255 后的值）
_Y_COEFFS = np.array([65.481, 128.553, 24.966], dtype=np.float64)


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """
    截断到 [0, 255] 并四舍五入（远离零）

    Args:
        x: 任意浮点数组，取值约定为 [0, 255]

    Returns:
        float64 整数值数组
    """
    clipped = np.clip(np.asarray(x, dtype=np.float64), 0.0, 255.0)
    return np.floor(clipped + 0.5)


@dataclass(frozen=True, eq=False)
class ImagePair:
    """
    SR/HR 图像对

    Attributes:
        sr: 超分结果 (1, 3, H, W) 或 (3, H, W)
        hr: 真值，形状与 sr 一致
        mode: uint8 表示取值域 [0,255]，float 表示 [0,1]
    """

    sr: np.ndarray
    hr: np.ndarray
    mode: PsnrMode = "uint8"

    def __post_init__(self) -> None:
        sr, hr = np.asarray(self.sr), np.asarray(self.hr)
        if sr.shape != hr.shape:
            raise MetricError(f"图像形状不一致: sr {sr.shape} vs hr {hr.shape}")
        if sr.ndim not in (3, 4):
            raise MetricError(f"图像必须是 CHW 或 NCHW，实际维度 {sr.ndim}")
        if self.mode not in ("uint8", "float"):
            raise MetricError(f"未知 PSNR 模式: {self.mode}")
        object.__setattr__(self, "sr", sr)
        object.__setattr__(self, "hr", hr)

    @property
    def max_value(self) -> float:
        """峰值信号 MAX"""
        return 255.0 if self.mode == "uint8" else 1.0


def _to_y(img: np.ndarray, mode: PsnrMode) -> np.ndarray:
    """RGB → BT.601 亮度，通道维为倒数第三维"""
    if img.shape[-3] != 3:
        raise MetricError(f"Y 通道 PSNR 需要 3 通道 RGB，实际 {img.shape[-3]} 通道")
    rgb = np.moveaxis(img, -3, -1)
    if mode == "uint8":
        y = 16.0 + rgb @ _Y_COEFFS / 255.0
    else:
        y = (16.0 + rgb @ _Y_COEFFS) / 255.0
    return np.expand_dims(y, -3)


def psnr(
    sr: Union[ImagePair, np.ndarray],
    hr: Optional[np.ndarray] = None,
    shave: int = 4,
    mode: Optional[PsnrMode] = None,
    channel: PsnrChannel = "rgb",
) -> float:
    """
    计算裁边 PSNR

    可以直接传入 ImagePair，也可以分别传入 sr 与 hr 数组。

    Args:
        sr: 图像对，或超分结果数组
        hr: 真值数组；sr 为 ImagePair 时必须省略
        shave: 每侧裁掉的像素数
        mode: uint8 先量化到 8 位且 MAX=255；float 不量化且 MAX=1.0。
            数组输入默认 uint8，ImagePair 输入取图像对自身的模式
        channel: rgb 三通道联合；y 仅 BT.601 亮度

    Returns:
        PSNR (dB)；两图裁边后完全一致时返回 math.inf

    Raises:
        MetricError: 形状不一致、裁边后为空或参数与图像对冲突
    """
    if isinstance(sr, ImagePair):
        if hr is not None:
            raise MetricError("传入 ImagePair 时不能再传 hr")
        if mode is not None and mode != sr.mode:
            raise MetricError(f"mode {mode} 与图像对的模式 {sr.mode} 不一致")
        pair = sr
    else:
        if hr is None:
            raise MetricError("缺少真值图像 hr")
        pair = ImagePair(sr, hr, mode or "uint8")
    mode = pair.mode
    if shave < 0:
        raise MetricError(f"shave 必须 >= 0: {shave}")
    h, w = pair.sr.shape[-2:]
    if h <= 2 * shave or w <= 2 * shave:
        raise MetricError(f"图像 {h}×{w} 在裁掉 {shave} 像素边框后为空")

    a = pair.sr.astype(np.float64)
    b = pair.hr.astype(np.float64)
    if mode == "uint8":
        a, b = quantize_8bit(a), quantize_8bit(b)
    if channel == "y":
        a, b = _to_y(a, mode), _to_y(b, mode)
    elif channel != "rgb":
        raise MetricError(f"未知通道约定: {channel}")

    if shave:
        a = a[..., shave:-shave, shave:-shave]
        b = b[..., shave:-shave, shave:-shave]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(pair.max_value**2 / mse)


def format_psnr(value: float) -> str:
    """展示用格式：无穷大输出 inf，其余保留 4 位小数"""
    return "inf" if math.isinf(value) else f"{value:.4f}"
