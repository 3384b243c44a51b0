"""
复杂度分析数据模型

定义参数量/FLOPs/运行时间报告的数据结构。
"""

from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator


class NodeCost(BaseModel):
    """
    单个节点的复杂度条目

    Attributes:
        node: 节点 ID
        kind: 节点类型
        out_shape: 输出形状 (c, h, w)
        params: 参数量
        flops: FLOPs
    """

    node: str = Field(..., description="节点 ID")
    kind: str = Field(..., description="节点类型")
    out_shape: Tuple[int, int, int] = Field(..., description="输出形状 (c, h, w)")
    params: int = Field(default=0, ge=0, description="参数量")
    flops: int = Field(default=0, ge=0, description="FLOPs")


class RuntimeStats(BaseModel):
    """
    运行时间统计

    Attributes:
        mean_ms: 平均耗时
        median_ms: 中位数耗时
        min_ms: 最短耗时
        reps: 计时次数
        warmup: 预热次数
        threads: 引擎线程数
        cpu: CPU 型号
        samples_ms: 每次计时的原始样本
    """

    model_config = ConfigDict(json_schema_extra={"example": {"mean_ms": 12.3, "median_ms": 12.1}})

    mean_ms: float = Field(..., gt=0.0, description="平均耗时 (ms)")
    median_ms: float = Field(..., gt=0.0, description="中位数耗时 (ms)")
    min_ms: float = Field(..., gt=0.0, description="最短耗时 (ms)")
    reps: int = Field(..., ge=1, description="计时次数")
    warmup: int = Field(default=0, ge=0, description="预热次数")
    threads: int = Field(default=1, ge=1, description="引擎线程数")
    cpu: str = Field(default="unknown", description="CPU 型号")
    samples_ms: List[float] = Field(default_factory=list, description="原始计时样本 (ms)")


class ProfileReport(BaseModel):
    """
    复杂度分析报告

    Attributes:
        model: 模型名称
        params: 参数量
        flops: 指定输入尺寸下的 FLOPs
        input_size: 输入尺寸 (h, w)
        mac_factor: 每个 MAC 折算的 FLOPs 数
        include_elementwise: 是否计入逐元素运算
        runtime: 运行时间统计（未计时时为空）
        nodes: 逐节点明细
    """

    model: str = Field(default="model", description="模型名称")
    params: int = Field(..., ge=0, description="参数量")
    flops: int = Field(..., ge=0, description="FLOPs")
    input_size: Tuple[int, int] = Field(default=(256, 256), description="输入尺寸 (h, w)")
    mac_factor: int = Field(default=1, description="FLOPs/MAC 折算系数")
    include_elementwise: bool = Field(default=False, description="是否计入逐元素运算")
    runtime: Optional[RuntimeStats] = Field(default=None, description="运行时间统计")
    nodes: List[NodeCost] = Field(default_factory=list, description="逐节点明细")

    @computed_field  # type: ignore[prop-decorator]
    @property
    def params_m(self) -> float:
        """参数量 (M)"""
        return self.params / 1e6

    @computed_field  # type: ignore[prop-decorator]
    @property
    def flops_g(self) -> float:
        """FLOPs (G)"""
        return self.flops / 1e9

    @model_validator(mode="after")
    def check_nodes(self) -> "ProfileReport":
        """节点明细之和必须等于总量"""
        if self.nodes:
            if sum(n.params for n in self.nodes) != self.params:
                raise ValueError("节点参数量之和与总参数量不一致")
            if sum(n.flops for n in self.nodes) != self.flops:
                raise ValueError("节点 FLOPs 之和与总 FLOPs 不一致")
        return self
