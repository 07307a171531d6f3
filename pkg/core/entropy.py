"""
熵编码 - 字节符号上的规范 Huffman 编码

码流: u16 表项数 K | K × (u8 符号, u8 码长) | 按 MSB 优先打包的码字，末尾补零到整字节
只有一种符号时码长为 0，码字部分为空。
"""

import heapq
import struct
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import EntropyDecodeError

SymbolsLike = Union[bytes, bytearray, np.ndarray]


def _as_symbols(symbols: SymbolsLike) -> np.ndarray:
    if isinstance(symbols, (bytes, bytearray)):
        return np.frombuffer(bytes(symbols), dtype=np.uint8)
    return np.ascontiguousarray(symbols, dtype=np.uint8).reshape(-1)


def code_lengths(counts: np.ndarray) -> Dict[int, int]:
    """由频数构造 Huffman 树并返回各符号码长，平局按插入顺序打破以保证确定性"""
    present = [int(s) for s in np.flatnonzero(counts)]
    if not present:
        return {}
    if len(present) == 1:
        return {present[0]: 0}
    heap: List[Tuple[int, int, List[int]]] = [(int(counts[s]), i, [s]) for i, s in enumerate(present)]
    heapq.heapify(heap)
    lengths = {s: 0 for s in present}
    order = len(heap)
    while len(heap) > 1:
        freq_a, _, group_a = heapq.heappop(heap)
        freq_b, _, group_b = heapq.heappop(heap)
        for symbol in group_a + group_b:
            lengths[symbol] += 1
        heapq.heappush(heap, (freq_a + freq_b, order, group_a + group_b))
        order += 1
    return lengths


def canonical_codes(lengths: Dict[int, int]) -> Dict[int, Tuple[int, int]]:
    """按 (码长, 符号) 排序分配规范码字，返回 symbol -> (code, length)"""
    codes: Dict[int, Tuple[int, int]] = {}
    code = 0
    previous = 0
    for symbol, length in sorted(lengths.items(), key=lambda item: (item[1], item[0])):
        code <<= length - previous
        codes[symbol] = (code, length)
        code += 1
        previous = length
    return codes


def entropy_encode(symbols: SymbolsLike) -> bytes:
    symbols = _as_symbols(symbols)
    counts = np.bincount(symbols, minlength=256)
    lengths = code_lengths(counts)
    table = sorted(lengths.items())
    header = [struct.pack("<H", len(table))] + [struct.pack("<BB", s, length) for s, length in table]
    if len(table) <= 1:
        return b"".join(header)

    codes = canonical_codes(lengths)
    code_of = np.zeros(256, dtype=np.uint64)
    length_of = np.zeros(256, dtype=np.int64)
    for symbol, (code, length) in codes.items():
        code_of[symbol] = code
        length_of[symbol] = length
    lens = length_of[symbols]
    values = code_of[symbols]
    owner = np.repeat(np.arange(symbols.size), lens)
    starts = np.cumsum(lens) - lens
    position = np.arange(int(lens.sum())) - starts[owner]
    shifts = (lens[owner] - 1 - position).astype(np.uint64)
    bits = ((values[owner] >> shifts) & np.uint64(1)).astype(np.uint8)
    return b"".join(header) + np.packbits(bits).tobytes()


def _read_table(data: bytes) -> Tuple[Dict[int, int], int]:
    if len(data) < 2:
        raise EntropyDecodeError("码流被截断: 缺少码表长度")
    (entries,) = struct.unpack_from("<H", data, 0)
    end = 2 + 2 * entries
    if entries > 256 or len(data) < end:
        raise EntropyDecodeError(f"码流被截断: 码表声明 {entries} 项")
    lengths: Dict[int, int] = {}
    for i in range(entries):
        symbol, length = struct.unpack_from("<BB", data, 2 + 2 * i)
        if symbol in lengths:
            raise EntropyDecodeError(f"码表中符号 {symbol} 重复")
        lengths[symbol] = length
    if entries > 1:
        kraft = sum(2.0 ** -length for length in lengths.values() if length > 0)
        if any(length == 0 for length in lengths.values()) or kraft > 1.0 + 1e-12:
            raise EntropyDecodeError("码表不满足前缀码条件")
    return lengths, end


def entropy_decode(data: bytes, n: int) -> np.ndarray:
    """解码 n 个符号；码流不足时抛出 EntropyDecodeError"""
    lengths, offset = _read_table(bytes(data))
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    if not lengths:
        raise EntropyDecodeError(f"码表为空但需要解码 {n} 个符号")
    if len(lengths) == 1:
        return np.full(n, next(iter(lengths)), dtype=np.uint8)

    codes = canonical_codes(lengths)
    by_code = {(length, code): symbol for symbol, (code, length) in codes.items()}
    max_length = max(lengths.values())
    bits = np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8, offset=offset)).tolist()
    out = np.empty(n, dtype=np.uint8)
    cursor = 0
    total = len(bits)
    for i in range(n):
        code = 0
        length = 0
        while True:
            if cursor >= total:
                raise EntropyDecodeError(f"码流被截断: 已解码 {i}/{n} 个符号")
            code = (code << 1) | bits[cursor]
            cursor += 1
            length += 1
            symbol = by_code.get((length, code))
            if symbol is not None:
                out[i] = symbol
                break
            if length >= max_length:
                raise EntropyDecodeError(f"第 {i} 个符号处出现无效码字")
    return out
