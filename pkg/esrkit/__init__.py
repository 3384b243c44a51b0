"""
高效超分辨率工具箱

包含 NCHW 推理引擎、无损结构重参数化代数、共享模块库、
复杂度分析（参数量/FLOPs/运行时间）以及挑战赛评分与排名。
"""

from esrkit.exceptions import (
    ConfigurationError,
    EsrKitError,
    FusionError,
    GraphError,
    ImageFormatError,
    MetricError,
    ModelFormatError,
    ScoringError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"
__author__ = "ESRKit Team"

__all__ = [
    "ConfigurationError",
    "EsrKitError",
    "FusionError",
    "GraphError",
    "ImageFormatError",
    "MetricError",
    "ModelFormatError",
    "ScoringError",
    "ShapeError",
    "ValidationError",
]
