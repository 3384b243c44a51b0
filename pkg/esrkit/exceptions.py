"""
ESRKit 自定义异常类模块

定义项目专用的异常类层次结构，提供结构化的错误处理。
"""

from typing import Optional


class EsrKitError(Exception):
    """ESRKit 基础异常类

    所有 ESRKit 特定异常的基类。
    """


class ConfigurationError(EsrKitError):
    """配置错误异常

    当配置加载、验证或处理失败时抛出。
    """


class ValidationError(EsrKitError):
    """验证错误异常

    当数据验证失败时抛出。
    """


class ShapeError(ValidationError):
    """形状错误异常

    当张量、卷积规格或计算图的形状不一致时抛出。

    Attributes:
        node: 出错的计算图节点 ID（如果有）
        dim: 出错的维度名称（如果有）
    """

    def __init__(self, message: str, node: Optional[str] = None, dim: Optional[str] = None):
        super().__init__(message)
        self.node = node
        self.dim = dim


class MetricError(ValidationError):
    """指标错误异常

    当 PSNR 或损失函数的前置条件不满足时抛出。
    """


class ScoringError(ValidationError):
    """评分错误异常

    当评分输入非法（非正指标、重复队名、CSV 表头错误等）时抛出。
    """


class FusionError(EsrKitError):
    """重参数化错误异常

    当分支无法融合（奇偶性、核尺寸、步长、分组或秩不匹配）时抛出。
    """


class GraphError(EsrKitError):
    """计算图错误异常

    当计算图结构非法（未知节点类型、悬空输入、非拓扑序等）时抛出。
    """


class ModelFormatError(EsrKitError):
    """模型文件格式错误异常

    当模型文本或权重二进制文件解码失败时抛出。
    """


class ImageFormatError(EsrKitError):
    """图像格式错误异常

    当 PNG/PPM 图像编解码失败时抛出。
    """
