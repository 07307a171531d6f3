"""
评价指标 - PSNR / SSIM / MS-SSIM 与码率-失真点
"""

import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import MetricsError, ShapeError
from .run_store import append_csv_rows, atomic_write_text, format_csv, read_csv_rows
from .tensor import Tensor, correlate_valid, gaussian_kernel

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
RD_HEADER = ("label", "bpp", "psnr_db", "ms_ssim")
_warned_sizes = set()
_warned_lock = threading.Lock()

ArrayLike = Union[np.ndarray, Tensor]


@dataclass
class RdPoint:
    bpp: float
    psnr_db: float
    ms_ssim: float
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.bpp) and self.bpp > 0):
            raise MetricsError(f"bpp 必须为正的有限值 (got {self.bpp})")

    def as_row(self) -> List[str]:
        return [self.label, f"{self.bpp:.6f}", f"{self.psnr_db:.4f}", f"{self.ms_ssim:.6f}"]


def _as_array(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _pair(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(op, "两个输入形状必须一致", (a.shape, b.shape))
    return a, b


def psnr(a: ArrayLike, b: ArrayLike, cap_db: float = PSNR_CAP_DB) -> float:
    """-10·log10(MSE)，MSE 为 0 时取 cap_db"""
    a, b = _pair("psnr", a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap_db)
    return min(float(cap_db), -10.0 * math.log10(mse))


def masked_psnr(pred: ArrayLike, gt: ArrayLike, mask: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """只在掩码内 (mask == 0) 的像素上计算 PSNR；掩码为空时退化为整帧"""
    pred, gt = _pair("masked_psnr", pred, gt)
    hole = np.broadcast_to(np.asarray(mask) == 0, pred.shape)
    if not hole.any():
        return psnr(pred, gt, cap_db)
    mse = float(np.mean((pred[hole] - gt[hole]) ** 2))
    if mse == 0.0:
        return float(cap_db)
    return min(float(cap_db), -10.0 * math.log10(mse))


def _blur(x: np.ndarray) -> np.ndarray:
    kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    return correlate_valid(correlate_valid(x, kernel, -2), kernel, -1)


def _ssim_maps(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (亮度项, 对比度-结构项) 两张图"""
    if a.ndim < 2 or min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError("ssim", f"帧尺寸小于 {SSIM_WINDOW}x{SSIM_WINDOW} 窗口", (a.shape,))
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1)
    contrast_structure = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    return luminance, contrast_structure


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    """11x11 高斯窗 (σ=1.5) 的单尺度 SSIM，对通道与位置取平均"""
    a, b = _pair("ssim", a, b)
    luminance, contrast_structure = _ssim_maps(a, b)
    return float(np.mean(luminance * contrast_structure))


def max_scales(height: int, width: int) -> int:
    """满足 min(H,W) >= 11·2^(s-1) 的最大尺度数"""
    side = min(height, width)
    if side < SSIM_WINDOW:
        return 0
    return int(math.floor(math.log2(side / SSIM_WINDOW))) + 1


def _downsample(x: np.ndarray) -> np.ndarray:
    height, width = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :height, :width]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def ms_ssim(a: ArrayLike, b: ArrayLike, scales: int = 5, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """多尺度 SSIM；帧太小时自动减少尺度数并重新归一化权重"""
    a, b = _pair("ms_ssim", a, b)
    available = max_scales(a.shape[-2], a.shape[-1])
    if available < 1:
        raise ShapeError("ms_ssim", f"帧尺寸小于 {SSIM_WINDOW}x{SSIM_WINDOW} 窗口", (a.shape,))
    if scales > available:
        key = (a.shape[-2], a.shape[-1], scales)
        with _warned_lock:
            first = key not in _warned_sizes
            _warned_sizes.add(key)
        if first:
            logger.warning("帧尺寸 %dx%d 只支持 %d 个尺度 (请求 %d)，已重新归一化权重",
                           a.shape[-2], a.shape[-1], available, scales)
        scales = available
    used = np.asarray(weights[:scales], dtype=np.float64)
    used = used / used.sum()

    score = 1.0
    for level in range(scales):
        luminance, contrast_structure = _ssim_maps(a, b)
        if level == scales - 1:
            term = float(np.mean(luminance * contrast_structure))
        else:
            term = float(np.mean(contrast_structure))
            a, b = _downsample(a), _downsample(b)
        score *= max(term, 0.0) ** used[level]
    return float(score)


# ---------------------------------------------------------------- 码率-失真

def average_per_video(scores: Mapping[str, Sequence[float]]) -> float:
    """先对每个视频内的逐帧分数求平均，再对视频求平均"""
    if not scores:
        raise MetricsError("没有可平均的视频")
    return float(np.mean([np.mean(values) for values in scores.values()]))


def frame_scores(decoded: np.ndarray, reference: np.ndarray) -> Tuple[List[float], List[float]]:
    """逐帧 (PSNR, MS-SSIM)，输入 [N,3,H,W]"""
    psnrs = [psnr(d, r) for d, r in zip(decoded, reference)]
    ms = [ms_ssim(d, r) for d, r in zip(decoded, reference)]
    return psnrs, ms


def check_coverage(expected: Mapping[str, int], decoded: Mapping[str, np.ndarray]) -> None:
    """解码结果必须覆盖每个视频的全部保留帧"""
    missing: List[str] = []
    for video_id, count in expected.items():
        frames = decoded.get(video_id)
        have = 0 if frames is None else int(frames.shape[0])
        if have < count:
            missing.append(f"{video_id}[{have}..{count - 1}]")
    if missing:
        raise MetricsError("解码结果缺少帧: " + ", ".join(missing))


def rd_point(
    bits_per_pixel: float,
    references: Mapping[str, np.ndarray],
    decoded: Mapping[str, np.ndarray],
    label: str = "",
) -> RdPoint:
    """references/decoded: video_id -> [N',3,H,W]，PSNR 与 MS-SSIM 先视频内平均再视频间平均"""
    check_coverage({vid: int(frames.shape[0]) for vid, frames in references.items()}, decoded)
    psnr_by_video: Dict[str, List[float]] = {}
    ms_by_video: Dict[str, List[float]] = {}
    for video_id, reference in references.items():
        frames = decoded[video_id][: reference.shape[0]]
        psnr_by_video[video_id], ms_by_video[video_id] = frame_scores(frames, reference)
    point = RdPoint(
        bpp=float(bits_per_pixel),
        psnr_db=average_per_video(psnr_by_video),
        ms_ssim=average_per_video(ms_by_video),
        label=label,
    )
    logger.info("RD 点 %s: bpp=%.4f psnr=%.2f ms_ssim=%.4f", label or "-", point.bpp, point.psnr_db, point.ms_ssim)
    return point


def write_rd_report(path: Union[str, Path], points: Sequence[RdPoint], append: bool = True) -> Path:
    if append:
        return append_csv_rows(path, RD_HEADER, [p.as_row() for p in points])
    return atomic_write_text(path, format_csv(RD_HEADER, [p.as_row() for p in points]))


def read_rd_report(path: Union[str, Path]) -> List[RdPoint]:
    return [
        RdPoint(label=row[0], bpp=float(row[1]), psnr_db=float(row[2]), ms_ssim=float(row[3]))
        for row in read_csv_rows(path)
        if row
    ]
