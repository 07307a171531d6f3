"""
关键帧编解码抽象层 - 统一不同图像压缩方式的接口
"""

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import fft

from .dataset import from_uint8, to_uint8
from .entropy import entropy_decode, entropy_encode
from .errors import CodecError, ConfigError, EntropyDecodeError

logger = logging.getLogger(__name__)

CODEC_IDS = {"raw": 0, "dct8": 1}
CODEC_NAMES = {value: key for key, value in CODEC_IDS.items()}

BLOCK = 8
DC_STEP = 8.0
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
ZIGZAG = np.array(
    sorted(range(BLOCK * BLOCK), key=lambda k: (k // BLOCK + k % BLOCK,
                                                k // BLOCK if (k // BLOCK + k % BLOCK) % 2 else k % BLOCK)),
    dtype=np.int64,
)


@dataclass
class KeyframeCodecConfig:
    """关键帧编码配置"""
    codec: str = "raw"
    quality: int = 75

    @property
    def codec_id(self) -> int:
        return CODEC_IDS[self.codec]

    def validate(self) -> "KeyframeCodecConfig":
        if self.codec not in CODEC_IDS:
            raise ConfigError("compress.kf_codec", f"未知的关键帧编码 {self.codec!r} (可选 {sorted(CODEC_IDS)})")
        if not 1 <= int(self.quality) <= 100:
            raise ConfigError("compress.quality", f"必须位于 1..100 (got {self.quality})")
        return self


@dataclass
class KeyframeCodecInfo:
    """编码方式信息"""
    codec_id: int
    name: str
    lossless: bool
    description: str


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise CodecError(f"关键帧必须是 [3,H,W] (got {image.shape})")
    if image.shape[1] > 0xFFFF or image.shape[2] > 0xFFFF:
        raise CodecError(f"关键帧尺寸超出 u16 范围: {image.shape}")
    return image


class KeyframeCodecBase(ABC):
    """关键帧编码器基类"""

    codec_id: int = -1

    @abstractmethod
    def encode(self, image: np.ndarray) -> bytes:
        pass

    @abstractmethod
    def decode(self, payload: bytes) -> np.ndarray:
        pass

    @abstractmethod
    def get_codec_info(self) -> KeyframeCodecInfo:
        pass

    def roundtrip(self, image: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(image))


class RawCodec(KeyframeCodecBase):
    """8 bit 平面存储：u16 H | u16 W | R 平面 | G 平面 | B 平面"""

    codec_id = CODEC_IDS["raw"]

    def encode(self, image: np.ndarray) -> bytes:
        image = _check_image(image)
        _, height, width = image.shape
        return struct.pack("<HH", height, width) + to_uint8(image).tobytes(order="C")

    def decode(self, payload: bytes) -> np.ndarray:
        if len(payload) < 4:
            raise CodecError("raw 关键帧数据被截断")
        height, width = struct.unpack_from("<HH", payload, 0)
        expected = 4 + 3 * height * width
        if len(payload) != expected:
            raise CodecError(f"raw 关键帧长度 {len(payload)} 与尺寸 {height}x{width} 不符 (应为 {expected})")
        pixels = np.frombuffer(payload, dtype=np.uint8, offset=4).reshape(3, height, width)
        return from_uint8(pixels)

    def get_codec_info(self) -> KeyframeCodecInfo:
        return KeyframeCodecInfo(self.codec_id, "raw", True, "8 bit 平面原样存储")


def quant_table(quality: int) -> np.ndarray:
    """按 IJG 规则缩放的 JPEG 亮度量化表，DC 步长固定为 8"""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise CodecError(f"quality 必须位于 1..100 (got {quality})")
    factor = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.clip(np.floor((JPEG_LUMA_TABLE * factor + 50.0) / 100.0), 1.0, 255.0)
    table[0, 0] = DC_STEP
    return table


class Dct8Codec(KeyframeCodecBase):
    """8x8 分块 DCT + 量化 + Huffman

    数据: u16 H | u16 W | u8 quality | u32 符号数 | 熵编码码流
    每个块按 zigzag 顺序去掉末尾的零，先写保留系数个数 (u8)，再写 int16 小端系数。
    """

    codec_id = CODEC_IDS["dct8"]

    def __init__(self, quality: int = 75):
        self.quality = int(quality)
        self.table = quant_table(self.quality)

    def _blocks(self, image: np.ndarray) -> Tuple[np.ndarray, int, int]:
        _, height, width = image.shape
        pad_h = (-height) % BLOCK
        pad_w = (-width) % BLOCK
        padded = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        channels, full_h, full_w = padded.shape
        blocks = padded.reshape(channels, full_h // BLOCK, BLOCK, full_w // BLOCK, BLOCK).transpose(0, 1, 3, 2, 4)
        return blocks, full_h, full_w

    def encode(self, image: np.ndarray) -> bytes:
        image = _check_image(image)
        _, height, width = image.shape
        levels = to_uint8(image).astype(np.float64) - 128.0
        blocks, _, _ = self._blocks(levels)
        coefficients = fft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
        quantized = np.round(coefficients / self.table).astype(np.int16)
        scanned = quantized.reshape(quantized.shape[:3] + (BLOCK * BLOCK,))[..., ZIGZAG]

        symbols = bytearray()
        for block in scanned.reshape(-1, BLOCK * BLOCK):
            nonzero = np.flatnonzero(block)
            kept = int(nonzero[-1]) + 1 if nonzero.size else 0
            symbols.append(kept)
            symbols += block[:kept].astype("<i2").tobytes()
        header = struct.pack("<HHBI", height, width, self.quality, len(symbols))
        return header + entropy_encode(bytes(symbols))

    def decode(self, payload: bytes) -> np.ndarray:
        header_size = struct.calcsize("<HHBI")
        if len(payload) < header_size:
            raise CodecError("dct8 关键帧数据被截断")
        height, width, quality, count = struct.unpack_from("<HHBI", payload, 0)
        if not 1 <= quality <= 100:
            raise CodecError(f"dct8 关键帧头部 quality={quality} 超出 1..100")
        if height == 0 or width == 0:
            raise CodecError(f"dct8 关键帧尺寸无效: {height}x{width}")
        try:
            symbols = entropy_decode(payload[header_size:], count).tobytes()
        except EntropyDecodeError as exc:
            raise CodecError(f"dct8 关键帧熵解码失败: {exc}") from exc

        block_rows = (height + BLOCK - 1) // BLOCK
        block_cols = (width + BLOCK - 1) // BLOCK
        scanned = np.zeros((3 * block_rows * block_cols, BLOCK * BLOCK), dtype=np.int16)
        cursor = 0
        for index in range(scanned.shape[0]):
            if cursor >= len(symbols):
                raise CodecError(f"dct8 关键帧在第 {index} 块处被截断")
            kept = symbols[cursor]
            cursor += 1
            if kept > BLOCK * BLOCK or cursor + 2 * kept > len(symbols):
                raise CodecError(f"dct8 关键帧第 {index} 块数据无效")
            scanned[index, :kept] = np.frombuffer(symbols, dtype="<i2", count=kept, offset=cursor)
            cursor += 2 * kept

        quantized = np.zeros_like(scanned)
        quantized[:, ZIGZAG] = scanned
        quantized = quantized.reshape(3, block_rows, block_cols, BLOCK, BLOCK)
        table = quant_table(quality)
        blocks = fft.idctn(quantized.astype(np.float64) * table, type=2, norm="ortho", axes=(-2, -1))
        full = blocks.transpose(0, 1, 3, 2, 4).reshape(3, block_rows * BLOCK, block_cols * BLOCK)
        pixels = np.clip(np.round(full[:, :height, :width] + 128.0), 0, 255).astype(np.uint8)
        return from_uint8(pixels)

    def get_codec_info(self) -> KeyframeCodecInfo:
        return KeyframeCodecInfo(self.codec_id, "dct8", False, f"8x8 分块 DCT, quality={self.quality}")


class KeyframeCodecManager:
    """关键帧编码器管理器"""

    def __init__(self):
        self._codecs: Dict[Tuple[int, int], KeyframeCodecBase] = {}

    def get_codec(self, codec_id: int, quality: int = 75) -> KeyframeCodecBase:
        """获取编码器实例；解码时 dct8 的 quality 取自数据头，这里的值只影响编码"""
        key = (codec_id, int(quality) if codec_id == CODEC_IDS["dct8"] else 0)
        if key in self._codecs:
            return self._codecs[key]
        if codec_id == CODEC_IDS["raw"]:
            codec: KeyframeCodecBase = RawCodec()
        elif codec_id == CODEC_IDS["dct8"]:
            codec = Dct8Codec(quality)
        else:
            raise CodecError(f"未知的关键帧编码 id {codec_id}")
        self._codecs[key] = codec
        return codec

    def for_config(self, config: KeyframeCodecConfig) -> KeyframeCodecBase:
        config.validate()
        return self.get_codec(config.codec_id, config.quality)

    def get_available_codecs(self) -> List[KeyframeCodecInfo]:
        return [self.get_codec(codec_id).get_codec_info() for codec_id in sorted(CODEC_NAMES)]

    def clear_cache(self) -> None:
        self._codecs.clear()


_default_manager: Optional[KeyframeCodecManager] = None


def default_manager() -> KeyframeCodecManager:
    global _default_manager
    if _default_manager is None:
        _default_manager = KeyframeCodecManager()
    return _default_manager


def keyframe_encode(image: np.ndarray, config: KeyframeCodecConfig) -> bytes:
    return default_manager().for_config(config).encode(image)


def keyframe_decode(payload: bytes, codec_id: int) -> np.ndarray:
    return default_manager().get_codec(codec_id).decode(payload)
