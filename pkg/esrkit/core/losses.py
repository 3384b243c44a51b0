"""
损失函数

像素损失、频域损失、边缘损失与蒸馏损失，全部为纯函数，
输入为同形状的 numpy 数组，返回 Python float（均值归约）。
"""

from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft

from esrkit.exceptions import MetricError


def _pair(a: np.ndarray, b: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"{name}: 输入形状不一致 {a.shape} vs {b.shape}")
    if a.size == 0:
        raise MetricError(f"{name}: 输入为空")
    return a, b


def l1(a: np.ndarray, b: np.ndarray) -> float:
    """平均绝对误差"""
    a, b = _pair(a, b, "l1")
    return float(np.mean(np.abs(a - b)))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """均方误差"""
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def charbonnier(a: np.ndarray, b: np.ndarray, eps: float = 1e-3) -> float:
    """Charbonnier 损失 mean √(Δ² + ε²)，相等时取最小值 ε"""
    a, b = _pair(a, b, "charbonnier")
    return float(np.mean(np.sqrt((a - b) ** 2 + eps * eps)))


def dft2(x: np.ndarray, norm: str = "backward") -> np.ndarray:
    """
    对最后两维做二维 DFT

    Args:
        x: 实数数组
        norm: numpy.fft 归一化约定，backward 为不归一化的正变换

    Returns:
        复数频谱
    """
    return np.fft.fft2(np.asarray(x, dtype=np.float64), axes=(-2, -1), norm=norm)


def dct2(x: np.ndarray) -> np.ndarray:
    """对最后两维做正交归一化的二维 DCT-II"""
    return sp_fft.dctn(np.asarray(x, dtype=np.float64), type=2, axes=(-2, -1), norm="ortho")


def fft_freq_loss(sr: np.ndarray, hr: np.ndarray, lam: float = 0.1) -> float:
    """
    像素 L1 加频域 L1：L = L1 + λ·mean(|ΔRe| ∪ |ΔIm|)

    频域项对每个通道做不归一化的二维 DFT，把实部与虚部差的绝对值拼在一起取均值。

    Args:
        sr: 超分结果
        hr: 真值
        lam: 频域项权重 λ

    Returns:
        损失值
    """
    a, b = _pair(sr, hr, "fft_freq_loss")
    diff = dft2(a) - dft2(b)
    freq = np.concatenate([np.abs(diff.real).ravel(), np.abs(diff.imag).ravel()]).mean()
    return l1(a, b) + lam * float(freq)


def dct_loss(sr: np.ndarray, hr: np.ndarray) -> float:
    """DCT-II 系数上的 L1 损失"""
    a, b = _pair(sr, hr, "dct_loss")
    return float(np.mean(np.abs(dct2(a) - dct2(b))))


def box_blur(img: np.ndarray, k: int = 3) -> np.ndarray:
    """
    k×k 均值模糊（边缘复制填充，输出尺寸不变）

    Args:
        img: 最后两维为空间维的数组
        k: 正奇数窗口

    Returns:
        模糊后的 float64 数组
    """
    if k < 1 or k % 2 == 0:
        raise MetricError(f"模糊核尺寸必须为正奇数: {k}")
    img = np.asarray(img, dtype=np.float64)
    r = k // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(img, pad, mode="edge")
    return sliding_window_view(padded, (k, k), axis=(-2, -1)).mean(axis=(-2, -1))


def edge_loss(sr: np.ndarray, hr: np.ndarray, blur_k: int = 3) -> float:
    """边缘损失：(img − boxblur(img)) 高频分量上的 L1"""
    a, b = _pair(sr, hr, "edge_loss")
    return float(np.mean(np.abs((a - box_blur(a, blur_k)) - (b - box_blur(b, blur_k)))))


def affinity(feat: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """
    空间亲和矩阵

    把 (n, C, H, W) 展平为每个样本 H·W 个 C 维向量，逐位置 L2 归一化后
    计算 (H·W)×(H·W) 的 Gram 矩阵，即位置两两之间的余弦相似度。

    Args:
        feat: 特征张量 (n, C, H, W)
        eps: 零向量保护

    Returns:
        (n, H·W, H·W) 亲和矩阵
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 4:
        raise MetricError(f"特征必须是 NCHW 四维张量，实际维度 {feat.ndim}")
    n, c, h, w = feat.shape
    vectors = feat.reshape(n, c, h * w).transpose(0, 2, 1)
    norms = np.linalg.norm(vectors, axis=2, keepdims=True)
    vectors = vectors / np.maximum(norms, eps)
    return vectors @ vectors.transpose(0, 2, 1)


def affinity_distill_loss(
    student_feats: Sequence[np.ndarray], teacher_feats: Sequence[np.ndarray]
) -> float:
    """
    亲和蒸馏损失 L_AD：各层亲和矩阵差的平均 L1，再在层间取平均

    学生与教师的通道数可以不同，但每层空间尺寸必须一致。

    Raises:
        MetricError: 层数不一致、列表为空或空间尺寸不一致
    """
    if len(student_feats) != len(teacher_feats):
        raise MetricError(f"特征层数不一致: 学生 {len(student_feats)} vs 教师 {len(teacher_feats)}")
    if not student_feats:
        raise MetricError("特征列表不能为空")
    total = 0.0
    for idx, (fs, ft) in enumerate(zip(student_feats, teacher_feats)):
        fs, ft = np.asarray(fs), np.asarray(ft)
        if fs.ndim != 4 or ft.ndim != 4:
            raise MetricError(f"第 {idx} 层特征必须是 NCHW 四维张量")
        if (fs.shape[0], *fs.shape[2:]) != (ft.shape[0], *ft.shape[2:]):
            raise MetricError(f"第 {idx} 层空间尺寸不一致: {fs.shape} vs {ft.shape}")
        total += float(np.mean(np.abs(affinity(fs) - affinity(ft))))
    return total / len(student_feats)


def pixel_distill_loss(teacher_out: np.ndarray, student_out: np.ndarray) -> float:
    """教师-学生输出蒸馏损失 L_TS（L1）"""
    return l1(teacher_out, student_out)


def total_distill_loss(
    sr: np.ndarray,
    hr: np.ndarray,
    teacher_out: np.ndarray,
    student_feats: Sequence[np.ndarray],
    teacher_feats: Sequence[np.ndarray],
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float:
    """
    总蒸馏损失 λ1·L_rec + λ2·L_TS + λ3·L_AD

    L_rec 为学生输出与真值的 MSE。

    Args:
        sr: 学生输出
        hr: 真值
        teacher_out: 教师输出
        student_feats: 学生中间特征
        teacher_feats: 教师中间特征
        lambdas: (λ1, λ2, λ3)

    Returns:
        损失值
    """
    l1_w, l2_w, l3_w = lambdas
    return (
        l1_w * mse(sr, hr)
        + l2_w * pixel_distill_loss(teacher_out, sr)
        + l3_w * affinity_distill_loss(student_feats, teacher_feats)
    )


def psnr_loss(sr: np.ndarray, hr: np.ndarray, eps: float = 1e-8) -> float:
    """
    PSNR 损失（连续取值域 MAX=1 下的 −PSNR）：10·log10(MSE + eps)

    唯一可以为负的损失。
    """
    return 10.0 * float(np.log10(mse(sr, hr) + eps))
