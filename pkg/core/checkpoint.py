"""
检查点读写 - DNRV1 二进制格式

magic "DNRV1" | u64 配置 JSON 长度 + UTF-8 JSON |
逐个参数 {u32 名称长度 + 名称, u8 dtype 标记, u32 维数, u64 各维尺寸, 小端原始数据} 直到文件结束
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import BundleFormatError
from .model import ModelConfig, ModelParams, param_specs
from .run_store import atomic_write_bytes
from .tensor import Tensor

MAGIC = b"DNRV1"
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {tag: dtype.newbyteorder("<") for dtype, tag in DTYPE_TAGS.items()}


def checkpoint_to_bytes(params: ModelParams) -> bytes:
    """序列化参数集合"""
    config_json = json.dumps(params.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(config_json)), config_json]
    for name, tensor in params.items():
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BI", DTYPE_TAGS[tensor.dtype], tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        chunks.append(tensor.data.astype(TAG_DTYPES[DTYPE_TAGS[tensor.dtype]], copy=False).tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, section: str) -> bytes:
        if self.offset + size > len(self.data):
            raise BundleFormatError(section, f"数据被截断 (需要 {size} 字节, 剩余 {len(self.data) - self.offset})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)


def restore_params(config_data, tensors: Mapping[str, Tensor], section: str) -> ModelParams:
    """由配置字典与命名张量重建参数集合，逐个核对名称与形状"""
    if not isinstance(config_data, dict):
        raise BundleFormatError(f"{section}.config", f"模型配置必须是 JSON 对象 (got {type(config_data).__name__})")
    try:
        config = ModelConfig.from_dict(config_data).validate()
    except (ValueError, TypeError, KeyError, IndexError) as exc:
        raise BundleFormatError(f"{section}.config", f"模型配置无效: {exc}") from exc

    expected = OrderedDict((spec.name, tuple(spec.shape)) for spec in param_specs(config))
    missing = [name for name in expected if name not in tensors]
    unknown = [name for name in tensors if name not in expected]
    if missing or unknown:
        raise BundleFormatError(section, f"参数与模型配置不符: 缺少 {missing}, 多余 {unknown}")
    for name, shape in expected.items():
        if tuple(tensors[name].shape) != shape:
            raise BundleFormatError(f"{section}.{name}", f"形状 {tuple(tensors[name].shape)} 与配置要求 {shape} 不符")
    return ModelParams(config, OrderedDict((name, tensors[name]) for name in expected))


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    """反序列化参数集合，格式错误时抛出 BundleFormatError"""
    reader = _Reader(data)
    if reader.take(len(MAGIC), "checkpoint.magic") != MAGIC:
        raise BundleFormatError("checkpoint.magic", "不是 DNRV1 检查点")
    (config_length,) = reader.unpack("<Q", "checkpoint.config")
    try:
        config_data = json.loads(reader.take(config_length, "checkpoint.config").decode("utf-8"))
    except ValueError as exc:
        raise BundleFormatError("checkpoint.config", f"配置 JSON 无法解析: {exc}") from exc

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    while not reader.exhausted:
        (name_length,) = reader.unpack("<I", "checkpoint.tensor")
        try:
            name = reader.take(name_length, "checkpoint.tensor").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleFormatError("checkpoint.tensor", f"参数名不是合法 UTF-8: {exc}") from exc
        if name in tensors:
            raise BundleFormatError(f"checkpoint.{name}", "参数名重复")
        tag, rank = reader.unpack("<BI", f"checkpoint.{name}")
        if tag not in TAG_DTYPES:
            raise BundleFormatError(f"checkpoint.{name}", f"未知的 dtype 标记 {tag}")
        shape = reader.unpack(f"<{rank}Q", f"checkpoint.{name}")
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        payload = reader.take(count * dtype.itemsize, f"checkpoint.{name}")
        array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        tensors[name] = Tensor(array, requires_grad=True, dtype=array.dtype)
    return restore_params(config_data, tensors, "checkpoint")


def save_checkpoint(path: Union[str, Path], params: ModelParams) -> Path:
    return atomic_write_bytes(path, checkpoint_to_bytes(params))


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError("checkpoint", f"检查点不存在: {path}")
    return checkpoint_from_bytes(path.read_bytes())
