"""
数据集 - 视频读写、片段切分、ClipBatch 组装、修复任务掩码与合成视频语料
"""

import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError
from .run_store import atomic_write_bytes

logger = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:05d}.ppm"
KeyframeLookup = Dict[Tuple[int, int], np.ndarray]


@dataclass
class Video:
    """单个视频，frames: [N,3,H,W] float32，取值在 [0,1]"""
    video_id: str
    frames: np.ndarray
    class_id: int = 0

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_size(self) -> Tuple[int, int]:
        return int(self.frames.shape[2]), int(self.frames.shape[3])


@dataclass
class Dataset:
    videos: List[Video] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def frame_size(self) -> Tuple[int, int]:
        sizes = {video.frame_size for video in self.videos}
        if len(sizes) != 1:
            raise DatasetError(f"所有视频的分辨率必须一致 (got {sorted(sizes)})")
        return sizes.pop()

    def video_ids(self) -> List[str]:
        return [video.video_id for video in self.videos]

    def retained_frames(self, clip_len: int) -> List[int]:
        return [retained_length(video.num_frames, clip_len) for video in self.videos]

    def total_pixels(self, clip_len: int) -> int:
        height, width = self.frame_size
        return sum(self.retained_frames(clip_len)) * height * width


@dataclass
class ClipRecord:
    """片段 j 覆盖帧 jS..(j+1)S-1，关键帧为 jS 与 (j+1)S"""
    video_index: int
    clip_index: int
    start: int
    clip_len: int

    @property
    def end(self) -> int:
        return self.start + self.clip_len

    def frame_indices(self) -> List[int]:
        return list(range(self.start, self.end))


@dataclass
class ClipBatch:
    keyframes: Tuple[np.ndarray, np.ndarray]  # 各 [B,3,H,W]
    frames: np.ndarray  # [B,3,H,W,S]
    t_indices: np.ndarray  # [S]
    video_ids: List[str]
    records: List[ClipRecord]
    masks: Optional[np.ndarray] = None  # [B,1,H,W,S]，掩码内为 0

    @property
    def batch_size(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class MaskSpec:
    boxes_per_frame: int = 5
    box_width: int = 8
    seed: int = 0

    def validate(self, frame_size: Optional[Tuple[int, int]] = None) -> "MaskSpec":
        if self.boxes_per_frame < 0:
            raise ConfigError("mask.boxes_per_frame", f"必须 >= 0 (got {self.boxes_per_frame})")
        if self.box_width < 1:
            raise ConfigError("mask.box_width", f"必须 >= 1 (got {self.box_width})")
        if frame_size is not None and self.box_width > min(frame_size):
            raise ConfigError("mask.box_width", f"{self.box_width} 超过帧尺寸 {frame_size[0]}x{frame_size[1]}")
        return self


# ---------------------------------------------------------------- 片段切分

def clip_times(clip_len: int) -> np.ndarray:
    """片段内相对时间 [0/S, 1/S, ..., (S-1)/S]"""
    return np.arange(clip_len, dtype=np.float64) / clip_len


def retained_length(num_frames: int, clip_len: int) -> int:
    if num_frames < clip_len + 1:
        return 0
    return ((num_frames - 1) // clip_len) * clip_len + 1


def build_clips(video: Union[Video, int], clip_len: int, video_index: int = 0) -> List[ClipRecord]:
    """截断到 k·S+1 帧并切成 k 个共享边界关键帧的片段"""
    num_frames = video.num_frames if isinstance(video, Video) else int(video)
    name = video.video_id if isinstance(video, Video) else f"#{video_index}"
    if num_frames < clip_len + 1:
        raise DatasetError(f"视频 {name} 只有 {num_frames} 帧，至少需要 {clip_len + 1} 帧")
    retained = retained_length(num_frames, clip_len)
    if retained < num_frames:
        logger.warning("视频 %s: 丢弃末尾帧 %d..%d (保留 %d 帧)", name, retained, num_frames - 1, retained)
    return [
        ClipRecord(video_index=video_index, clip_index=j, start=j * clip_len, clip_len=clip_len)
        for j in range((retained - 1) // clip_len)
    ]


def dataset_clips(dataset: Dataset, clip_len: int) -> List[ClipRecord]:
    records: List[ClipRecord] = []
    for index, video in enumerate(dataset.videos):
        records.extend(build_clips(video, clip_len, video_index=index))
    return records


def raw_keyframes(dataset: Dataset, clip_len: int) -> KeyframeLookup:
    """每个视频在 0, S, 2S, ... 处的原始关键帧"""
    lookup: KeyframeLookup = {}
    for index, video in enumerate(dataset.videos):
        for frame_index in range(0, retained_length(video.num_frames, clip_len), clip_len):
            lookup[(index, frame_index)] = video.frames[frame_index]
    return lookup


def make_clip_batch(
    dataset: Dataset,
    records: Sequence[ClipRecord],
    keyframes: Optional[KeyframeLookup] = None,
) -> ClipBatch:
    """按片段记录组装一个 mini-batch，关键帧可来自编解码后的查找表"""
    starts, ends, frames = [], [], []
    for record in records:
        video = dataset.videos[record.video_index]
        if keyframes is not None:
            starts.append(keyframes[(record.video_index, record.start)])
            ends.append(keyframes[(record.video_index, record.end)])
        else:
            starts.append(video.frames[record.start])
            ends.append(video.frames[record.end])
        frames.append(np.moveaxis(video.frames[record.start:record.end], 0, -1))
    clip_len = records[0].clip_len
    return ClipBatch(
        keyframes=(np.stack(starts).astype(np.float32), np.stack(ends).astype(np.float32)),
        frames=np.stack(frames).astype(np.float32),
        t_indices=clip_times(clip_len),
        video_ids=[dataset.videos[r.video_index].video_id for r in records],
        records=list(records),
    )


# ---------------------------------------------------------------- 修复掩码

def frame_mask(spec: MaskSpec, height: int, width: int, video_index: int, frame_index: int) -> np.ndarray:
    """单帧掩码 [H,W]，由 (seed, 视频, 帧) 唯一确定；方框内为 0"""
    spec.validate((height, width))
    mask = np.ones((height, width), dtype=np.float32)
    rng = np.random.default_rng([spec.seed, video_index, frame_index])
    side = spec.box_width
    for _ in range(spec.boxes_per_frame):
        top = int(rng.integers(0, height - side + 1))
        left = int(rng.integers(0, width - side + 1))
        mask[top:top + side, left:left + side] = 0.0
    return mask


def apply_masks(batch: ClipBatch, spec: MaskSpec) -> ClipBatch:
    """为每帧生成方框掩码；关键帧输入同样被遮挡"""
    _, _, height, width, clip_len = batch.frames.shape
    spec.validate((height, width))
    masks = np.empty((batch.batch_size, 1, height, width, clip_len), dtype=np.float32)
    start_masks, end_masks = [], []
    for b, record in enumerate(batch.records):
        for s, frame_index in enumerate(record.frame_indices()):
            masks[b, 0, :, :, s] = frame_mask(spec, height, width, record.video_index, frame_index)
        start_masks.append(masks[b, :, :, :, 0])
        end_masks.append(frame_mask(spec, height, width, record.video_index, record.end)[None])
    start, end = batch.keyframes
    return replace(
        batch,
        keyframes=(start * np.stack(start_masks), end * np.stack(end_masks)),
        masks=masks,
    )


# ---------------------------------------------------------------- 合成语料

_MOTION_KINDS = ("translate", "rotate", "scale")


def _motion_program(seed: int, class_id: int) -> Dict[str, float]:
    rng = np.random.default_rng([seed, 1, class_id])
    return {
        "kind": _MOTION_KINDS[class_id % len(_MOTION_KINDS)],
        "amplitude": float(rng.uniform(0.15, 0.3)),
        "omega": float(rng.uniform(0.5, 1.5)),
        "phase": float(rng.uniform(0.0, 2.0 * math.pi)),
        "pan": float(rng.uniform(-0.5, 0.5)),
        "direction": float(rng.uniform(0.0, 2.0 * math.pi)),
    }


def _render_frame(program: Dict[str, float], style: Dict[str, np.ndarray], tau: float, height: int, width: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    pan = program["pan"] * tau
    frame = np.empty((3, height, width), dtype=np.float64)
    for ch in range(3):
        fx, fy = style["freq"][ch]
        frame[ch] = style["base"][ch] + 0.2 * np.sin(
            2.0 * math.pi * (fx * (xs + pan) + fy * ys) + style["texture_phase"][ch]
        )

    angle = 2.0 * math.pi * program["omega"] * tau + program["phase"]
    for index in range(2):
        cx, cy = style["centers"][index]
        radius = style["radii"][index]
        if program["kind"] == "translate":
            cx = cx + program["amplitude"] * math.cos(program["direction"]) * math.sin(angle + index)
            cy = cy + program["amplitude"] * math.sin(program["direction"]) * math.sin(angle + index)
        elif program["kind"] == "rotate":
            cx = 0.5 + program["amplitude"] * math.cos(angle + index * math.pi)
            cy = 0.5 + program["amplitude"] * math.sin(angle + index * math.pi)
        else:
            radius = radius * (1.0 + 0.5 * math.sin(angle + index))
        if index == 0:
            distance = np.sqrt(((xs - cx) * width) ** 2 + ((ys - cy) * height) ** 2)
        else:
            distance = np.maximum(np.abs(xs - cx) * width, np.abs(ys - cy) * height)
        alpha = np.clip(radius * min(height, width) - distance + 0.5, 0.0, 1.0)
        frame = frame * (1.0 - alpha) + style["colors"][index][:, None, None] * alpha
    return frame


def synth_corpus(
    n_videos: int,
    n_classes: int,
    frames: int,
    size: Tuple[int, int],
    seed: int = 0,
) -> Dataset:
    """程序化生成的视频：每个类别一种运动方式，每个视频独立的外观"""
    if n_videos < 1 or n_classes < 1 or frames < 1:
        raise DatasetError(f"非法的合成参数 n_videos={n_videos}, n_classes={n_classes}, frames={frames}")
    height, width = size
    videos: List[Video] = []
    for v in range(n_videos):
        class_id = v % n_classes
        program = _motion_program(seed, class_id)
        rng = np.random.default_rng([seed, 2, v])
        style = {
            "base": rng.uniform(0.3, 0.7, size=3),
            "freq": rng.uniform(0.5, 3.0, size=(3, 2)),
            "texture_phase": rng.uniform(0.0, 2.0 * math.pi, size=3),
            "centers": rng.uniform(0.3, 0.7, size=(2, 2)),
            "radii": rng.uniform(0.12, 0.22, size=2),
            "colors": rng.uniform(0.0, 1.0, size=(2, 3)),
        }
        clip = np.stack(
            [_render_frame(program, style, i / max(frames - 1, 1), height, width) for i in range(frames)]
        )
        # 量化到 8 bit 网格，保证 PPM 导出与 raw 关键帧编解码无损
        clip = from_uint8(to_uint8(np.clip(clip, 0.0, 1.0)))
        videos.append(Video(video_id=f"synth_{v:03d}", frames=clip, class_id=class_id))
    return Dataset(videos=videos)


# ---------------------------------------------------------------- PPM 读写

def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return (np.asarray(frames, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def encode_ppm(frame: np.ndarray) -> bytes:
    """[3,H,W] -> 二进制 P6"""
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(to_uint8(frame).transpose(1, 2, 0)), mode="RGB").save(buffer, format="PPM")
    return buffer.getvalue()


def save_frame(path: Union[str, Path], frame: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_ppm(frame))


def load_frame(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as image:
        pixels = np.asarray(image.convert("RGB"), dtype=np.uint8)
    return from_uint8(pixels.transpose(2, 0, 1))


def list_frame_files(directory: Union[str, Path]) -> List[Path]:
    return sorted(Path(directory).glob("frame_*.ppm"))


def load_video_dir(directory: Union[str, Path], video_id: Optional[str] = None) -> Video:
    directory = Path(directory)
    files = list_frame_files(directory)
    if not files:
        raise DatasetError(f"目录中没有 frame_*.ppm: {directory}")
    frames = np.stack([load_frame(path) for path in files])
    return Video(video_id=video_id or directory.name, frames=frames)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """每个子目录是一个视频"""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"数据集目录不存在: {path}")
    directories = sorted(p for p in path.iterdir() if p.is_dir())
    if not directories:
        raise DatasetError(f"数据集目录为空: {path}")
    dataset = Dataset(videos=[load_video_dir(d) for d in directories])
    dataset.frame_size
    return dataset


def save_video(directory: Union[str, Path], frames: np.ndarray, first_index: int = 0) -> List[Path]:
    directory = Path(directory)
    return [
        save_frame(directory / FRAME_PATTERN.format(first_index + i), frame) for i, frame in enumerate(frames)
    ]


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    for video in dataset.videos:
        save_video(path / video.video_id, video.frames)
    return path


def frame_table(dataset: Dataset, clip_len: int) -> List[Tuple[int, int]]:
    """全部保留帧按视频顺序首尾相接后的 (视频序号, 帧序号) 表"""
    return [
        (index, frame_index)
        for index, video in enumerate(dataset.videos)
        for frame_index in range(retained_length(video.num_frames, clip_len))
    ]


def global_times(count: int) -> np.ndarray:
    """拼接后的全局时间 t = i / (总帧数 - 1)"""
    if count <= 1:
        return np.zeros(max(count, 0), dtype=np.float64)
    return np.arange(count, dtype=np.float64) / (count - 1)
