"""
图像文件读写

支持 8 位 RGB 的 PNG（pypng）与二进制 PPM (P6)。内存中的图像为
(H, W, 3) 的 uint8 数组；引擎张量为 (1, 3, H, W)、取值 [0, 1] 的 float32。
"""

import io
from pathlib import Path
from typing import Union

import numpy as np
import png
from loguru import logger

from esrkit.core.metrics import quantize_8bit
from esrkit.exceptions import ImageFormatError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PPM_MAGIC = b"P6"


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"图像必须是 (H, W, 3) 的 RGB 数组，实际 {img.shape}")
    if img.dtype != np.uint8:
        raise ImageFormatError(f"图像必须是 uint8，实际 {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageFormatError(f"图像尺寸必须为正: {img.shape}")
    return img


def decode_png(data: bytes) -> np.ndarray:
    """解码 PNG，任何颜色类型与位深都转换为 8 位 RGB（丢弃 alpha）"""
    try:
        width, height, rows, _ = png.Reader(bytes=data).asRGBA8()
        pixels = np.vstack([np.asarray(row, dtype=np.uint8) for row in rows])
    except png.Error as e:
        raise ImageFormatError(f"PNG 解码失败: {e}") from e
    return pixels.reshape(height, width, 4)[:, :, :3].copy()


def encode_png(img: np.ndarray) -> bytes:
    """编码 8 位 RGB PNG"""
    img = _check_image(img)
    height, width, _ = img.shape
    writer = png.Writer(width=width, height=height, greyscale=False, alpha=False, bitdepth=8)
    buffer = io.BytesIO()
    writer.write(buffer, img.reshape(height, width * 3))
    return buffer.getvalue()


def _ppm_tokens(data: bytes, count: int):
    """读取 PPM 头部的前 count 个记号，跳过注释，返回 (记号, 数据起始偏移)"""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ImageFormatError("PPM 文件头不完整")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # 头部与像素数据之间恰好一个空白字符
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """解码二进制 PPM (P6, maxval <= 255)"""
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != PPM_MAGIC:
        raise ImageFormatError(f"不是 P6 PPM 文件: {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as e:
        raise ImageFormatError(f"PPM 文件头数值错误: {e}") from e
    if width < 1 or height < 1:
        raise ImageFormatError(f"PPM 尺寸必须为正: {width}×{height}")
    if not 1 <= maxval <= 255:
        raise ImageFormatError(f"只支持 maxval <= 255 的 PPM: {maxval}")
    size = width * height * 3
    payload = data[offset : offset + size]
    if len(payload) != size:
        raise ImageFormatError(f"PPM 像素数据被截断: 期望 {size} 字节，实际 {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    if maxval != 255:
        if int(img.max()) > maxval:
            raise ImageFormatError(f"PPM 像素值 {int(img.max())} 超过 maxval {maxval}")
        img = np.floor(img.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    """编码二进制 PPM (P6, maxval 255)"""
    img = _check_image(img)
    height, width, _ = img.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + img.tobytes()


def read_image(path: Union[str, Path]) -> np.ndarray:
    """
    读取图像，按文件内容识别 PNG 或 PPM

    Args:
        path: 图像路径

    Returns:
        (H, W, 3) uint8 数组

    Raises:
        ImageFormatError: 不支持的格式或解码失败
        OSError: 文件无法读取
    """
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        img = decode_png(data)
    elif data.startswith(PPM_MAGIC):
        img = decode_ppm(data)
    else:
        raise ImageFormatError(f"无法识别的图像格式（只支持 PNG 与 P6 PPM）: {path}")
    logger.debug(f"读取图像 {path}: {img.shape[1]}×{img.shape[0]}")
    return img


def write_image(path: Union[str, Path], img: np.ndarray) -> Path:
    """
    写入图像，按后缀选择 PNG 或 PPM

    Raises:
        ImageFormatError: 不支持的后缀或数组不合法
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        data = encode_png(img)
    elif suffix in (".ppm", ".pnm"):
        data = encode_ppm(img)
    else:
        raise ImageFormatError(f"不支持的图像后缀: {suffix}（可选 .png / .ppm）")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.debug(f"写入图像 {path}")
    return path


def to_tensor(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 → (1, 3, H, W)，取值 [0, 1]"""
    img = _check_image(img)
    return (img.astype(np.float64).transpose(2, 0, 1)[None] / 255.0).astype(dtype)


def from_tensor(x: np.ndarray) -> np.ndarray:
    """
    (1, 3, H, W) 取值 [0, 1] → (H, W, 3) uint8

    先乘 255，截断到 [0, 255] 后四舍五入（远离零）。
    """
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ImageFormatError(f"只能转换单张图像，实际批大小 {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ImageFormatError(f"张量必须是 (1, 3, H, W) 或 (3, H, W)，实际 {x.shape}")
    return quantize_8bit(x.astype(np.float64) * 255.0).transpose(1, 2, 0).astype(np.uint8)
