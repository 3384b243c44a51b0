"""
排行榜数据模型

定义排行榜记录、基线与评分报告的数据结构。
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class MetricRecord(BaseModel):
    """
    排行榜单行记录

    Attributes:
        team: 队伍名称
        psnr_val: 验证集 PSNR (dB)
        psnr_test: 测试集 PSNR (dB)
        runtime_val: 验证集运行时间 (ms)
        runtime_test: 测试集运行时间 (ms)
        runtime_avg: 平均运行时间 (ms)，缺省为 val/test 均值
        params: 参数量 (M)
        flops: FLOPs (G)
    """

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "example": {
                "team": "EMSR",
                "psnr_val": 26.92,
                "psnr_test": 27.01,
                "runtime_val": 10.268,
                "runtime_test": 9.720,
                "runtime_avg": 9.994,
                "params": 0.131,
                "flops": 8.54,
            }
        },
    )

    team: str = Field(..., min_length=1, description="队伍名称")
    psnr_val: float = Field(..., gt=0.0, description="验证集 PSNR (dB)")
    psnr_test: float = Field(..., gt=0.0, description="测试集 PSNR (dB)")
    runtime_val: float = Field(..., gt=0.0, description="验证集运行时间 (ms)")
    runtime_test: float = Field(..., gt=0.0, description="测试集运行时间 (ms)")
    runtime_avg: Optional[float] = Field(default=None, gt=0.0, description="平均运行时间 (ms)")
    params: float = Field(..., gt=0.0, description="参数量 (M)")
    flops: float = Field(..., gt=0.0, description="FLOPs (G)")

    @model_validator(mode="after")
    def fill_runtime_avg(self) -> "MetricRecord":
        """缺省的平均运行时间取 val/test 均值"""
        if self.runtime_avg is None:
            object.__setattr__(self, "runtime_avg", (self.runtime_val + self.runtime_test) / 2)
        return self

    @property
    def runtime_mean(self) -> float:
        """val/test 运行时间均值"""
        return (self.runtime_val + self.runtime_test) / 2


class Baseline(BaseModel):
    """
    评分基线

    Attributes:
        runtime: 基线运行时间 (ms)
        params: 基线参数量 (M)
        flops: 基线 FLOPs (G)
        psnr_val: 验证集 PSNR 门槛 (dB)
        psnr_test: 测试集 PSNR 门槛 (dB)
    """

    model_config = ConfigDict(frozen=True)

    runtime: float = Field(default=22.183, gt=0.0, description="基线运行时间 (ms)")
    params: float = Field(default=0.276, gt=0.0, description="基线参数量 (M)")
    flops: float = Field(default=16.70, gt=0.0, description="基线 FLOPs (G)")
    psnr_val: float = Field(default=26.90, gt=0.0, description="验证集 PSNR 门槛 (dB)")
    psnr_test: float = Field(default=26.99, gt=0.0, description="测试集 PSNR 门槛 (dB)")


class ScoreReport(BaseModel):
    """
    单条记录的评分结果

    Attributes:
        team: 队伍名称
        score_runtime: 运行时间子赛道分数
        score_params: 参数量子赛道分数
        score_flops: FLOPs 子赛道分数
        score_final: 加权总分
        eligible: 是否满足 PSNR 门槛
        rank: 主赛道名次（不合格为空）
        rank_runtime: 运行时间子赛道名次
        rank_params: 参数量子赛道名次
        rank_flops: FLOPs 子赛道名次
        record: 原始记录
    """

    team: str
    score_runtime: float
    score_params: float
    score_flops: float
    score_final: float
    eligible: bool
    rank: Optional[int] = None
    rank_runtime: Optional[int] = None
    rank_params: Optional[int] = None
    rank_flops: Optional[int] = None
    record: MetricRecord
