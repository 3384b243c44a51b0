"""
配置数据模型

定义引擎、重参数化、指标、复杂度分析和评分的配置结构。
"""

from enum import Enum
from typing import Optional, Tuple

from pydantic import BaseModel, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Precision(str, Enum):
    """引擎数值精度枚举"""

    FLOAT32 = "float32"
    FLOAT64 = "float64"


class EngineSettings(BaseSettings):
    """
    引擎环境变量设置

    读取 ESRKIT_ 前缀的环境变量（例如 ESRKIT_THREADS=4）。
    """

    model_config = SettingsConfigDict(env_prefix="ESRKIT_", extra="ignore")

    threads: Optional[int] = Field(default=None, ge=1, description="引擎线程数")
    precision: Optional[Precision] = Field(default=None, description="数值精度")


class EngineConfig(BaseModel):
    """
    引擎配置模型

    控制卷积的并行线程数与默认数值精度（float64 为验证模式）。
    """

    threads: int = Field(default=1, ge=1, description="引擎线程数")
    precision: Precision = Field(default=Precision.FLOAT32, description="数值精度")


class ReparamConfig(BaseModel):
    """
    重参数化配置模型

    融合前后最大输出差异的容差，按引擎精度选用。
    """

    tolerance_f32: float = Field(default=1e-4, gt=0.0, description="32 位融合等价容差")
    tolerance_f64: float = Field(default=1e-10, gt=0.0, description="64 位验证模式容差")

    def tolerance_for(self, precision: Precision) -> float:
        """按数值精度返回融合等价容差"""
        return self.tolerance_f64 if precision == Precision.FLOAT64 else self.tolerance_f32


class MetricsConfig(BaseModel):
    """
    指标配置模型

    包含 PSNR 边界裁剪宽度、量化模式与通道约定。
    """

    shave: int = Field(default=4, ge=0, description="PSNR 边界裁剪像素数")
    mode: str = Field(default="uint8", description="PSNR 取值模式 (uint8/float)")
    channel: str = Field(default="rgb", description="PSNR 通道 (rgb/y)")

    @field_validator("mode")
    @classmethod
    def validate_mode(cls, v: str) -> str:
        """验证 PSNR 模式"""
        valid_modes = ["uint8", "float"]
        if v.lower() not in valid_modes:
            raise ValueError(f"mode必须是以下之一: {valid_modes}")
        return v.lower()

    @field_validator("channel")
    @classmethod
    def validate_channel(cls, v: str) -> str:
        """验证 PSNR 通道"""
        valid_channels = ["rgb", "y"]
        if v.lower() not in valid_channels:
            raise ValueError(f"channel必须是以下之一: {valid_channels}")
        return v.lower()


class ProfileConfig(BaseModel):
    """
    复杂度分析配置模型

    FLOPs 约定默认 1 MAC = 1 FLOP，逐元素运算默认不计入。
    """

    input_hw: Tuple[int, int] = Field(default=(256, 256), description="FLOPs 统计输入尺寸")
    mac_factor: int = Field(default=1, description="每个 MAC 折算的 FLOPs 数 (1/2)")
    include_elementwise: bool = Field(default=False, description="是否计入逐元素运算")
    count_frozen: bool = Field(default=True, description="是否计入固定滤波器参数")
    warmup: int = Field(default=5, ge=0, description="计时预热次数")
    reps: int = Field(default=50, ge=1, description="计时重复次数")

    @field_validator("mac_factor")
    @classmethod
    def validate_mac_factor(cls, v: int) -> int:
        """验证 MAC 折算系数"""
        if v not in (1, 2):
            raise ValueError(f"mac_factor必须是 1 或 2: {v}")
        return v

    @field_validator("input_hw")
    @classmethod
    def validate_input_hw(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """验证输入尺寸"""
        if v[0] < 1 or v[1] < 1:
            raise ValueError(f"input_hw 必须为正: {v}")
        return v


class ScoringConfig(BaseModel):
    """
    评分配置模型

    基线指标与 PSNR 门槛取自挑战赛基线行。
    """

    baseline_runtime: float = Field(default=22.183, gt=0.0, description="基线运行时间 (ms)")
    baseline_params: float = Field(default=0.276, gt=0.0, description="基线参数量 (M)")
    baseline_flops: float = Field(default=16.70, gt=0.0, description="基线 FLOPs (G)")
    psnr_val_threshold: float = Field(default=26.90, description="验证集 PSNR 门槛 (dB)")
    psnr_test_threshold: float = Field(default=26.99, description="测试集 PSNR 门槛 (dB)")
    weights: Tuple[float, float, float] = Field(
        default=(0.7, 0.15, 0.15), description="运行时间/FLOPs/参数量权重"
    )

    @field_validator("weights")
    @classmethod
    def validate_weights(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """
        验证评分权重

        Args:
            v: 三个子赛道权重

        Returns:
            验证后的权重
        """
        if any(w < 0 for w in v):
            raise ValueError(f"权重不能为负: {v}")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"权重之和必须为 1: {v}")
        return v


class AppConfig(BaseModel):
    """
    应用主配置模型

    合并引擎、重参数化、指标、复杂度分析与评分配置。
    """

    engine: EngineConfig = Field(default_factory=EngineConfig, description="引擎配置")
    reparam: ReparamConfig = Field(default_factory=ReparamConfig, description="重参数化配置")
    metrics: MetricsConfig = Field(default_factory=MetricsConfig, description="指标配置")
    profile: ProfileConfig = Field(default_factory=ProfileConfig, description="复杂度分析配置")
    scoring: ScoringConfig = Field(default_factory=ScoringConfig, description="评分配置")

    @classmethod
    def from_dict(cls, data: dict) -> "AppConfig":
        """
        从字典创建配置对象

        Args:
            data: 配置字典

        Returns:
            配置对象
        """
        return cls(
            engine=EngineConfig(**(data.get("engine") or {})),
            reparam=ReparamConfig(**(data.get("reparam") or {})),
            metrics=MetricsConfig(**(data.get("metrics") or {})),
            profile=ProfileConfig(**(data.get("profile") or {})),
            scoring=ScoringConfig(**(data.get("scoring") or {})),
        )
