"""
模型文件读写

模型由两部分组成：
- 图文本（YAML）：格式标识与版本、元数据、按拓扑序排列的节点记录
  （id、kind、inputs、attrs），权重以张量名引用；
- 权重文件（二进制）：魔数 "ESRW"、版本 u32、张量个数 u32，随后每个张量为
  名称长度 u32 + UTF-8 名称 + 维数 u32 + 各维 u32 + 小端 float32 数据。
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml
from loguru import logger

from esrkit.core.blocks import EsaWeights, SpabWeights
from esrkit.core.graph import ModelGraph, Node, NodeKind
from esrkit.core.reparam import (
    BatchNormStats,
    BranchSpec,
    ConvBranch,
    FixedFilterBranch,
    IdentityBranch,
    RepBlockSpec,
    ScaledIdentityBranch,
    SeqBranch,
)
from esrkit.core.tensor_ops import ConvSpec
from esrkit.exceptions import EsrKitError, ModelFormatError

GRAPH_FORMAT = "esrkit-graph"
GRAPH_VERSION = 1
WEIGHTS_MAGIC = b"ESRW"
WEIGHTS_VERSION = 1
WEIGHTS_SUFFIX = ".esrw"

_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


# ---------------------------------------------------------------------------
# 权重文件
# ---------------------------------------------------------------------------


def encode_weights(tensors: Dict[str, np.ndarray]) -> bytes:
    """
    把命名张量编码为权重文件字节串

    Args:
        tensors: 名称到数组的有序映射

    Returns:
        权重文件内容
    """
    parts = [_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode_weights(data: bytes) -> Dict[str, np.ndarray]:
    """
    解析权重文件字节串

    Args:
        data: 权重文件内容

    Returns:
        名称到 float32 数组的映射

    Raises:
        ModelFormatError: 魔数/版本不符、数据截断或名称重复
    """
    if len(data) < _HEADER.size:
        raise ModelFormatError("权重文件过短，缺少文件头")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != WEIGHTS_MAGIC:
        raise ModelFormatError(f"权重文件魔数错误: {magic!r}")
    if version != WEIGHTS_VERSION:
        raise ModelFormatError(f"不支持的权重文件版本: {version}")

    offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise ModelFormatError(f"权重文件在偏移 {offset} 处被截断")
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    for _ in range(count):
        (name_len,) = _U32.unpack(take(_U32.size))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelFormatError(f"张量名称不是合法的 UTF-8: {e}") from e
        (rank,) = _U32.unpack(take(_U32.size))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise ModelFormatError(f"权重文件中张量名重复: {name}")
        tensors[name] = arr
    if offset != len(data):
        raise ModelFormatError(f"权重文件末尾有 {len(data) - offset} 字节多余数据")
    return tensors


# ---------------------------------------------------------------------------
# 图属性编码
# ---------------------------------------------------------------------------


@dataclass
class _TensorWriter:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def put(self, name: str, arr: Optional[np.ndarray]) -> Optional[str]:
        if arr is None:
            return None
        self.tensors[name] = np.asarray(arr)
        return name

    def conv(self, prefix: str, conv: ConvSpec) -> Dict[str, Any]:
        return {
            "type": "conv",
            "weight": self.put(f"{prefix}.weight", conv.weight),
            "bias": self.put(f"{prefix}.bias", conv.bias),
            "stride": list(conv.stride),
            "padding": list(conv.padding),
            "dilation": list(conv.dilation),
            "groups": conv.groups,
        }

    def branch(self, prefix: str, branch: BranchSpec) -> Dict[str, Any]:
        if isinstance(branch, ConvBranch):
            out: Dict[str, Any] = {"kind": "conv", "conv": self.conv(f"{prefix}.conv", branch.conv)}
            if branch.bn is not None:
                bn = branch.bn
                out["bn"] = {
                    "gamma": self.put(f"{prefix}.bn.gamma", bn.gamma),
                    "beta": self.put(f"{prefix}.bn.beta", bn.beta),
                    "mean": self.put(f"{prefix}.bn.mean", bn.mean),
                    "var": self.put(f"{prefix}.bn.var", bn.var),
                    "eps": float(bn.eps),
                }
            return out
        if isinstance(branch, SeqBranch):
            return {
                "kind": "seq",
                "convs": [self.conv(f"{prefix}.convs.{i}", c) for i, c in enumerate(branch.convs)],
            }
        if isinstance(branch, IdentityBranch):
            return {"kind": "identity", "channels": branch.channels}
        if isinstance(branch, ScaledIdentityBranch):
            return {"kind": "scaled_identity", "scale": self.put(f"{prefix}.scale", branch.scale)}
        if isinstance(branch, FixedFilterBranch):
            return {
                "kind": "fixed_filter",
                "name": branch.name,
                "filter": self.put(f"{prefix}.filter", branch.filter),
                "scale": self.put(f"{prefix}.scale", branch.scale),
                "pre": None if branch.pre is None else self.conv(f"{prefix}.pre", branch.pre),
                "bias": self.put(f"{prefix}.bias", branch.bias),
            }
        raise ModelFormatError(f"无法序列化的分支类型: {type(branch).__name__}")

    def rep_block(self, prefix: str, spec: RepBlockSpec) -> Dict[str, Any]:
        return {
            "type": "rep_block",
            "name": spec.name,
            "target": list(spec.target),
            "branches": [self.branch(f"{prefix}.branches.{i}", b) for i, b in enumerate(spec.branches)],
        }

    def slot(self, prefix: str, slot: Union[ConvSpec, RepBlockSpec]) -> Dict[str, Any]:
        if isinstance(slot, RepBlockSpec):
            return self.rep_block(prefix, slot)
        return self.conv(prefix, slot)

    def node_attrs(self, node: Node) -> Dict[str, Any]:
        kind, attrs = node.kind, node.attrs
        if kind == NodeKind.CONV:
            return {"conv": self.conv(node.id, attrs["conv"])}
        if kind in (NodeKind.REP_CONV, NodeKind.EDGE_BLOCK):
            return {"block": self.rep_block(node.id, attrs["block"])}
        if kind == NodeKind.SPAB:
            spab: SpabWeights = attrs["block"]
            return {
                "block": {
                    "convs": [self.slot(f"{node.id}.convs.{i}", s) for i, s in enumerate(spab.convs)],
                    "bias": spab.bias,
                    "act": spab.act,
                }
            }
        if kind == NodeKind.ESA:
            esa: EsaWeights = attrs["block"]
            return {
                "block": {
                    "down": self.conv(f"{node.id}.down", esa.down),
                    "conv": self.conv(f"{node.id}.conv", esa.conv),
                    "expand": self.conv(f"{node.id}.expand", esa.expand),
                    "pool_kernel": esa.pool_kernel,
                    "pool_stride": esa.pool_stride,
                }
            }
        return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


@dataclass
class _TensorReader:
    tensors: Dict[str, np.ndarray]
    used: set = field(default_factory=set)

    def get(self, ref: Optional[str], required: bool = True) -> Optional[np.ndarray]:
        if ref is None:
            if required:
                raise ModelFormatError("缺少必需的权重引用")
            return None
        if ref not in self.tensors:
            raise ModelFormatError(f"权重引用无法解析: {ref}")
        self.used.add(ref)
        return self.tensors[ref]

    def conv(self, data: Dict[str, Any]) -> ConvSpec:
        return ConvSpec(
            weight=self.get(data["weight"]),
            bias=self.get(data.get("bias"), required=False),
            stride=tuple(data.get("stride", (1, 1))),
            padding=tuple(data.get("padding", (0, 0))),
            dilation=tuple(data.get("dilation", (1, 1))),
            groups=int(data.get("groups", 1)),
        )

    def branch(self, data: Dict[str, Any]) -> BranchSpec:
        kind = data["kind"]
        if kind == "conv":
            bn = data.get("bn")
            stats = None
            if bn is not None:
                stats = BatchNormStats(
                    gamma=self.get(bn["gamma"]),
                    beta=self.get(bn["beta"]),
                    mean=self.get(bn["mean"]),
                    var=self.get(bn["var"]),
                    eps=float(bn.get("eps", 1e-5)),
                )
            return ConvBranch(self.conv(data["conv"]), stats)
        if kind == "seq":
            return SeqBranch(tuple(self.conv(c) for c in data["convs"]))
        if kind == "identity":
            return IdentityBranch(int(data["channels"]))
        if kind == "scaled_identity":
            return ScaledIdentityBranch(self.get(data["scale"]))
        if kind == "fixed_filter":
            pre = data.get("pre")
            return FixedFilterBranch(
                filter=self.get(data["filter"]),
                scale=self.get(data["scale"]),
                pre=None if pre is None else self.conv(pre),
                bias=self.get(data.get("bias"), required=False),
                name=str(data.get("name", "custom")),
            )
        raise ModelFormatError(f"未知分支类型: {kind}")

    def rep_block(self, data: Dict[str, Any]) -> RepBlockSpec:
        return RepBlockSpec(
            branches=tuple(self.branch(b) for b in data["branches"]),
            target=tuple(data.get("target", (3, 3))),
            name=str(data.get("name", "custom")),
        )

    def slot(self, data: Dict[str, Any]) -> Union[ConvSpec, RepBlockSpec]:
        if data.get("type") == "rep_block":
            return self.rep_block(data)
        return self.conv(data)

    def node_attrs(self, kind: NodeKind, attrs: Dict[str, Any]) -> Dict[str, Any]:
        if kind == NodeKind.CONV:
            return {"conv": self.conv(attrs["conv"])}
        if kind in (NodeKind.REP_CONV, NodeKind.EDGE_BLOCK):
            return {"block": self.rep_block(attrs["block"])}
        if kind == NodeKind.SPAB:
            block = attrs["block"]
            return {
                "block": SpabWeights(
                    convs=tuple(self.slot(s) for s in block["convs"]),
                    bias=float(block.get("bias", -0.5)),
                    act=str(block.get("act", "silu")),
                )
            }
        if kind == NodeKind.ESA:
            block = attrs["block"]
            return {
                "block": EsaWeights(
                    down=self.conv(block["down"]),
                    conv=self.conv(block["conv"]),
                    expand=self.conv(block["expand"]),
                    pool_kernel=int(block.get("pool_kernel", 7)),
                    pool_stride=int(block.get("pool_stride", 3)),
                )
            }
        return dict(attrs or {})


# ---------------------------------------------------------------------------
# 模型读写
# ---------------------------------------------------------------------------


def default_weights_path(graph_path: Union[str, Path]) -> Path:
    """图文本对应的默认权重文件路径（同名、后缀 .esrw）"""
    return Path(graph_path).with_suffix(WEIGHTS_SUFFIX)


def graph_to_document(model: ModelGraph, weights_name: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    把计算图转换为 YAML 文档与命名张量

    Args:
        model: 计算图
        weights_name: 写入文档的权重文件名

    Returns:
        (文档字典, 命名张量)
    """
    writer = _TensorWriter()
    nodes: List[Dict[str, Any]] = []
    for node in model.nodes:
        nodes.append(
            {
                "id": node.id,
                "kind": node.kind.value,
                "inputs": list(node.inputs),
                "attrs": writer.node_attrs(node),
            }
        )
    document = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "metadata": {
            "name": model.name,
            "scale": model.scale,
            "channels": model.channels,
            "in_channels": model.in_channels,
        },
        "weights": weights_name,
        "nodes": nodes,
    }
    return document, writer.tensors


def document_to_graph(document: Any, tensors: Dict[str, np.ndarray]) -> ModelGraph:
    """
    从 YAML 文档与命名张量重建计算图

    Raises:
        ModelFormatError: 格式标识/版本不符、字段缺失或权重引用无法解析
    """
    if not isinstance(document, dict):
        raise ModelFormatError("模型文件顶层必须是映射")
    if document.get("format") != GRAPH_FORMAT:
        raise ModelFormatError(f"模型文件格式标识错误: {document.get('format')!r}")
    if document.get("version") != GRAPH_VERSION:
        raise ModelFormatError(f"不支持的模型文件版本: {document.get('version')!r}")

    reader = _TensorReader(tensors)
    try:
        meta = document["metadata"]
        nodes = []
        for record in document["nodes"]:
            kind = NodeKind(record["kind"])
            nodes.append(
                Node(
                    id=str(record["id"]),
                    kind=kind,
                    inputs=tuple(record.get("inputs") or ()),
                    attrs=reader.node_attrs(kind, record.get("attrs") or {}),
                )
            )
        model = ModelGraph(
            nodes=tuple(nodes),
            scale=int(meta["scale"]),
            channels=int(meta["channels"]),
            in_channels=int(meta.get("in_channels", 3)),
            name=str(meta.get("name", "model")),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"模型文件字段缺失或取值错误: {e}") from e
    except EsrKitError as e:
        raise ModelFormatError(f"模型文件内容不合法: {e}") from e

    unused = set(tensors) - reader.used
    if unused:
        logger.warning(f"权重文件中有 {len(unused)} 个张量未被引用")
    return model


def save_model(
    model: ModelGraph,
    path: Union[str, Path],
    weights_path: Optional[Union[str, Path]] = None,
) -> Tuple[Path, Path]:
    """
    保存模型（图文本 + 权重文件）

    float64 权重按 float32 写入。

    Args:
        model: 计算图
        path: 图文本路径
        weights_path: 权重文件路径，默认与图文本同名、后缀 .esrw

    Returns:
        (图文本路径, 权重文件路径)
    """
    path = Path(path)
    weights_path = Path(weights_path) if weights_path is not None else default_weights_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    weights_path.parent.mkdir(parents=True, exist_ok=True)

    try:
        weights_ref = str(weights_path.resolve().relative_to(path.parent.resolve()))
    except ValueError:
        weights_ref = str(weights_path.resolve())
    document, tensors = graph_to_document(model, weights_ref)
    if any(arr.dtype == np.float64 for arr in tensors.values()):
        logger.warning("模型包含 float64 权重，将按 float32 保存")

    weights_path.write_bytes(encode_weights(tensors))
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(document, f, sort_keys=False, allow_unicode=True)
    logger.info(f"模型已保存: {path} ({len(tensors)} 个张量 -> {weights_path})")
    return path, weights_path


def load_model(
    path: Union[str, Path],
    weights_path: Optional[Union[str, Path]] = None,
    dtype=np.float32,
) -> ModelGraph:
    """
    加载模型

    Args:
        path: 图文本路径
        weights_path: 权重文件路径，默认取图文本中记录的路径
        dtype: 权重加载后的 dtype，float64 用于高精度校验

    Returns:
        计算图

    Raises:
        ModelFormatError: 文件内容不合法
        OSError: 文件无法读取
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ModelFormatError(f"模型文件 YAML 解析失败: {e}") from e

    if weights_path is None:
        ref = document.get("weights") if isinstance(document, dict) else None
        weights_path = (path.parent / ref) if ref else default_weights_path(path)
    tensors = decode_weights(Path(weights_path).read_bytes())
    if np.dtype(dtype) != np.float32:
        tensors = {name: arr.astype(dtype) for name, arr in tensors.items()}
    model = document_to_graph(document, tensors)
    logger.info(f"模型已加载: {path} ({model.name}, {len(model.nodes)} 个节点)")
    return model
