"""
模型压缩 - 逐张量仿射量化、Huffman 熵编码、关键帧打包与码率统计

DNVB1 码流布局 (整数均为小端):
    magic "DNVB1" | u32 版本 | u64 配置 JSON 长度 + JSON | u32 张量数 |
    逐张量 {u32 名称长度 + 名称, u8 dtype, u32 维数 + u64 各维, f64 scale, f64 zero_point, u64 符号数} |
    u64 熵编码码流长度 + 码流 | u32 关键帧数 |
    逐关键帧 {u32 视频 id 长度 + id, u32 帧序号, u8 编码 id, u64 数据长度 + 数据}
"""

import json
import logging
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import DTYPE_TAGS, TAG_DTYPES, restore_params
from .config_manager import worker_count
from .entropy import entropy_decode, entropy_encode
from .errors import BundleFormatError, CodecError, EntropyDecodeError, InputRangeError
from .keyframe_codec import CODEC_NAMES, KeyframeCodecConfig, default_manager
from .model import ModelConfig, ModelParams
from .run_store import atomic_write_bytes
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DNVB1"
VERSION = 1
KeyframeKey = Tuple[str, int]


@dataclass
class QuantizedTensor:
    """dequantized = zero_point + symbol·scale"""
    symbols: np.ndarray
    scale: float
    zero_point: float
    shape: Tuple[int, ...]
    bits: int = 8
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    @property
    def bytes_per_symbol(self) -> int:
        return 1 if self.bits <= 8 else 2

    def symbol_bytes(self) -> bytes:
        if self.bytes_per_symbol == 1:
            return self.symbols.astype(np.uint8).tobytes()
        return self.symbols.astype("<u2").tobytes()


def quantize(tensor: Union[Tensor, np.ndarray], bits: int = 8) -> QuantizedTensor:
    """逐张量 min-max 仿射量化；常量张量的 scale 为 0"""
    if not 1 <= int(bits) <= 16:
        raise InputRangeError(f"量化位数必须位于 1..16 (got {bits})")
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    values = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InputRangeError("待量化张量包含 NaN/Inf")
    symbol_dtype = np.uint8 if bits <= 8 else np.uint16
    if values.size == 0:
        return QuantizedTensor(np.zeros(0, dtype=symbol_dtype), 0.0, 0.0, values.shape, int(bits), np.dtype(dtype))
    low = float(values.min())
    high = float(values.max())
    levels = (1 << int(bits)) - 1
    scale = (high - low) / levels
    if scale == 0.0:
        symbols = np.zeros(values.size, dtype=symbol_dtype)
    else:
        symbols = np.clip(np.round((values.reshape(-1) - low) / scale), 0, levels).astype(symbol_dtype)
    return QuantizedTensor(symbols, scale, low, values.shape, int(bits), np.dtype(dtype))


def dequantize(q: QuantizedTensor) -> Tensor:
    values = q.zero_point + q.symbols.astype(np.float64) * q.scale
    return Tensor(values.reshape(q.shape).astype(q.dtype), requires_grad=False, dtype=q.dtype)


# ---------------------------------------------------------------- 码流结构

@dataclass
class QuantMeta:
    name: str
    dtype: np.dtype
    shape: Tuple[int, ...]
    scale: float
    zero_point: float
    count: int


@dataclass
class KeyframePayload:
    video_id: str
    frame_index: int
    codec_id: int
    payload: bytes


@dataclass
class SizeLedger:
    model_bytes: int
    keyframe_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.model_bytes + self.keyframe_bytes


def _string(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


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

    def string(self, section: str) -> str:
        (length,) = self.unpack("<I", section)
        try:
            return self.take(length, section).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleFormatError(section, f"字符串不是合法 UTF-8: {exc}") from exc


BUNDLE_CONFIG_KEYS = ("model", "bits", "clip_len", "frame_size", "videos")


def _check_bundle_config(config) -> None:
    if not isinstance(config, dict):
        raise BundleFormatError("config", f"配置必须是 JSON 对象 (got {type(config).__name__})")
    missing = [key for key in BUNDLE_CONFIG_KEYS if key not in config]
    if missing:
        raise BundleFormatError("config", f"配置缺少字段 {missing}")
    try:
        bits = int(config["bits"])
        height, width = (int(v) for v in config["frame_size"])
        clip_len = int(config["clip_len"])
        frames = [(str(video["id"]), int(video["frames"])) for video in config["videos"]]
    except (TypeError, ValueError, KeyError) as exc:
        raise BundleFormatError("config", f"配置字段类型错误: {exc}") from exc
    if not 1 <= bits <= 16 or height < 1 or width < 1 or clip_len < 1 or any(n < 1 for _, n in frames):
        raise BundleFormatError("config", "配置字段超出范围")


@dataclass
class CompressedBundle:
    config: Dict
    tensors: List[QuantMeta]
    stream: bytes
    keyframes: List[KeyframePayload] = field(default_factory=list)
    version: int = VERSION

    @property
    def bits(self) -> int:
        return int(self.config["bits"])

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config["model"])

    def _model_section(self) -> bytes:
        config_json = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, struct.pack("<I", self.version), struct.pack("<Q", len(config_json)), config_json,
                  struct.pack("<I", len(self.tensors))]
        for meta in self.tensors:
            chunks.append(_string(meta.name))
            chunks.append(struct.pack("<BI", DTYPE_TAGS[np.dtype(meta.dtype)], len(meta.shape)))
            chunks.append(struct.pack(f"<{len(meta.shape)}Q", *meta.shape))
            chunks.append(struct.pack("<ddQ", meta.scale, meta.zero_point, meta.count))
        chunks.append(struct.pack("<Q", len(self.stream)))
        chunks.append(self.stream)
        return b"".join(chunks)

    def _keyframe_section(self) -> bytes:
        chunks = [struct.pack("<I", len(self.keyframes))]
        for frame in self.keyframes:
            chunks.append(_string(frame.video_id))
            chunks.append(struct.pack("<IB", frame.frame_index, frame.codec_id))
            chunks.append(struct.pack("<Q", len(frame.payload)))
            chunks.append(frame.payload)
        return b"".join(chunks)

    def to_bytes(self) -> bytes:
        return self._model_section() + self._keyframe_section()

    def ledger(self) -> SizeLedger:
        """model_bytes 为关键帧数字段之前的全部字节，keyframe_bytes 为其余部分"""
        return SizeLedger(model_bytes=len(self._model_section()), keyframe_bytes=len(self._keyframe_section()))

    @property
    def file_size(self) -> int:
        return self.ledger().total_bytes

    def total_pixels(self) -> int:
        height, width = self.config["frame_size"]
        return sum(int(video["frames"]) for video in self.config["videos"]) * int(height) * int(width)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedBundle":
        reader = _Reader(bytes(data))
        if reader.take(len(MAGIC), "header.magic") != MAGIC:
            raise BundleFormatError("header.magic", "不是 DNVB1 码流")
        (version,) = reader.unpack("<I", "header.version")
        if version != VERSION:
            raise BundleFormatError("header.version", f"不支持的版本 {version} (当前 {VERSION})")
        (config_length,) = reader.unpack("<Q", "config")
        try:
            config = json.loads(reader.take(config_length, "config").decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise BundleFormatError("config", f"配置 JSON 无法解析: {exc}") from exc
        _check_bundle_config(config)

        (tensor_count,) = reader.unpack("<I", "tensors")
        tensors: List[QuantMeta] = []
        for index in range(tensor_count):
            section = f"tensors[{index}]"
            name = reader.string(section)
            tag, rank = reader.unpack("<BI", section)
            if tag not in TAG_DTYPES:
                raise BundleFormatError(section, f"未知的 dtype 标记 {tag}")
            shape = tuple(reader.unpack(f"<{rank}Q", section))
            scale, zero_point, count = reader.unpack("<ddQ", section)
            if count != (int(np.prod(shape)) if rank else 1):
                raise BundleFormatError(section, f"{name}: 符号数 {count} 与形状 {shape} 不符")
            tensors.append(QuantMeta(name, TAG_DTYPES[tag].newbyteorder("="), shape, scale, zero_point, count))

        (stream_length,) = reader.unpack("<Q", "stream")
        stream = reader.take(stream_length, "stream")

        (keyframe_count,) = reader.unpack("<I", "keyframes")
        keyframes: List[KeyframePayload] = []
        for index in range(keyframe_count):
            section = f"keyframes[{index}]"
            video_id = reader.string(section)
            frame_index, codec_id = reader.unpack("<IB", section)
            if codec_id not in CODEC_NAMES:
                raise BundleFormatError(section, f"未知的关键帧编码 id {codec_id}")
            (payload_length,) = reader.unpack("<Q", section)
            keyframes.append(KeyframePayload(video_id, frame_index, codec_id, reader.take(payload_length, section)))
        if reader.offset != len(reader.data):
            raise BundleFormatError("trailer", f"码流末尾有 {len(reader.data) - reader.offset} 字节多余数据")
        return cls(config=config, tensors=tensors, stream=stream, keyframes=keyframes, version=version)


# ---------------------------------------------------------------- 压缩 / 解压

def _encode_keyframe(args) -> KeyframePayload:
    (video_id, frame_index), image, codec_config = args
    codec = default_manager().for_config(codec_config)
    return KeyframePayload(video_id, int(frame_index), codec.codec_id, codec.encode(image))


def compress_model(
    params: ModelParams,
    bits: int = 8,
    keyframes: Optional[Mapping[KeyframeKey, np.ndarray]] = None,
    codec_config: Optional[KeyframeCodecConfig] = None,
    layout: Optional[Dict] = None,
) -> CompressedBundle:
    """量化全部参数并熵编码为一条码流，关键帧按给定顺序编码

    layout 记录片段长度、帧尺寸与每个视频的保留帧数，解码只依赖码流本身。
    """
    codec_config = (codec_config or KeyframeCodecConfig()).validate()
    names = list(params)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        quantized = list(pool.map(lambda name: quantize(params[name], bits), names))
        encoded = list(pool.map(
            _encode_keyframe,
            [(key, image, codec_config) for key, image in (keyframes or {}).items()],
        ))

    tensors = [
        QuantMeta(name, q.dtype, tuple(q.shape), q.scale, q.zero_point, int(q.symbols.size))
        for name, q in zip(names, quantized)
    ]
    stream = entropy_encode(np.frombuffer(b"".join(q.symbol_bytes() for q in quantized), dtype=np.uint8))
    config = {
        "model": params.config.to_dict(),
        "bits": int(bits),
        "kf_codec": codec_config.codec,
        "quality": int(codec_config.quality),
        "clip_len": int(params.config.clip_len),
        "frame_size": [int(v) for v in params.config.input_size],
        "videos": [],
    }
    config.update(layout or {})
    bundle = CompressedBundle(config=config, tensors=tensors, stream=stream, keyframes=encoded)
    ledger = bundle.ledger()
    logger.info("压缩完成: %d 个张量, %d 个关键帧, model_bytes=%d keyframe_bytes=%d",
                len(tensors), len(encoded), ledger.model_bytes, ledger.keyframe_bytes)
    return bundle


def decompress_params(bundle: CompressedBundle) -> ModelParams:
    bits = bundle.bits
    width = 1 if bits <= 8 else 2
    total = sum(meta.count for meta in bundle.tensors) * width
    try:
        raw = entropy_decode(bundle.stream, total)
    except EntropyDecodeError as exc:
        raise BundleFormatError("stream", str(exc)) from exc

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    offset = 0
    for meta in bundle.tensors:
        chunk = raw[offset:offset + meta.count * width]
        offset += meta.count * width
        symbols = chunk if width == 1 else chunk.view("<u2")
        q = QuantizedTensor(symbols, meta.scale, meta.zero_point, meta.shape, bits, np.dtype(meta.dtype))
        tensor = dequantize(q)
        tensor.requires_grad = True
        tensors[meta.name] = tensor
    return restore_params(bundle.config["model"], tensors, "tensors")


def decode_keyframe(frame: KeyframePayload) -> np.ndarray:
    try:
        return default_manager().get_codec(frame.codec_id).decode(frame.payload)
    except CodecError as exc:
        raise BundleFormatError(f"keyframes[{frame.video_id}:{frame.frame_index}]", str(exc)) from exc


def decompress_keyframes(
    bundle: CompressedBundle,
    wanted: Optional[Sequence[KeyframeKey]] = None,
) -> Dict[KeyframeKey, np.ndarray]:
    """解码关键帧；wanted 给出时只解码其中列出的帧"""
    keys = None if wanted is None else set(wanted)
    selected = [frame for frame in bundle.keyframes if keys is None or (frame.video_id, frame.frame_index) in keys]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        images = list(pool.map(decode_keyframe, selected))
    return {(frame.video_id, frame.frame_index): image for frame, image in zip(selected, images)}


def decompress(bundle: CompressedBundle) -> Tuple[ModelParams, Dict[KeyframeKey, np.ndarray]]:
    return decompress_params(bundle), decompress_keyframes(bundle)


def bpp(bundle: Union[CompressedBundle, int], total_pixels: int) -> float:
    """8·(model_bytes + keyframe_bytes) / total_pixels"""
    if total_pixels <= 0:
        raise InputRangeError(f"total_pixels 必须 > 0 (got {total_pixels})")
    size = bundle.file_size if isinstance(bundle, CompressedBundle) else int(bundle)
    return 8.0 * size / total_pixels


def save_bundle(path: Union[str, Path], bundle: CompressedBundle) -> Path:
    return atomic_write_bytes(path, bundle.to_bytes())


def load_bundle(path: Union[str, Path]) -> CompressedBundle:
    path = Path(path)
    if not path.exists():
        raise BundleFormatError("file", f"码流文件不存在: {path}")
    return CompressedBundle.from_bytes(path.read_bytes())
