"""
编解码流程 - 关键帧准备、整段视频重建、选择性解码与评估
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .compress import CompressedBundle, KeyframeKey, decompress_keyframes, decompress_params
from .dataset import (
    Dataset,
    KeyframeLookup,
    MaskSpec,
    clip_times,
    frame_mask,
    from_uint8,
    global_times,
    retained_length,
    to_uint8,
)
from .errors import SelectionError
from .keyframe_codec import KeyframeCodecConfig, default_manager
from .metrics import average_per_video, masked_psnr
from .model import ModelConfig, ModelParams, forward_clip, nerv_forward
from .tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass
class Selection:
    """--select video=ID[,clip=J]"""
    video_id: str
    clip: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "Selection":
        fields: Dict[str, str] = {}
        for part in text.split(","):
            match = re.fullmatch(r"\s*(video|clip)\s*=\s*(\S+)\s*", part)
            if not match or match.group(1) in fields:
                raise SelectionError(f"无法解析选择项 {text!r}，格式为 video=ID[,clip=J]")
            fields[match.group(1)] = match.group(2)
        if "video" not in fields:
            raise SelectionError(f"选择项 {text!r} 缺少 video=ID")
        clip = None
        if "clip" in fields:
            if not fields["clip"].isdigit():
                raise SelectionError(f"clip 必须是非负整数 (got {fields['clip']!r})")
            clip = int(fields["clip"])
        return cls(video_id=fields["video"], clip=clip)


@dataclass
class DecodedVideo:
    video_id: str
    frames: np.ndarray  # [n,3,H,W]
    first_index: int = 0


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """四舍五入到 8 bit 网格，与写出的 PPM 完全一致"""
    return from_uint8(to_uint8(frames))


def bundle_layout(dataset: Dataset, clip_len: int) -> Dict:
    height, width = dataset.frame_size
    return {
        "clip_len": int(clip_len),
        "frame_size": [int(height), int(width)],
        "videos": [
            {"id": video.video_id, "frames": retained_length(video.num_frames, clip_len)}
            for video in dataset.videos
        ],
    }


# ---------------------------------------------------------------- 关键帧

def dataset_keyframes(dataset: Dataset, clip_len: int, mask_spec: Optional[MaskSpec] = None) -> Dict[KeyframeKey, np.ndarray]:
    """按 (video_id, 帧序号) 列出全部关键帧；修复任务中关键帧同样被遮挡"""
    keyframes: Dict[KeyframeKey, np.ndarray] = {}
    for index, video in enumerate(dataset.videos):
        height, width = video.frame_size
        for frame_index in range(0, retained_length(video.num_frames, clip_len), clip_len):
            image = video.frames[frame_index]
            if mask_spec is not None:
                image = image * frame_mask(mask_spec, height, width, index, frame_index)[None]
            keyframes[(video.video_id, frame_index)] = image
    return keyframes


def codec_roundtrip(keyframes: Mapping[KeyframeKey, np.ndarray], codec_config: KeyframeCodecConfig) -> Dict[KeyframeKey, np.ndarray]:
    """经过关键帧编解码后的图像，与从码流解码得到的完全相同"""
    codec = default_manager().for_config(codec_config)
    return {key: codec.roundtrip(image) for key, image in keyframes.items()}


def index_lookup(dataset: Dataset, keyframes: Mapping[KeyframeKey, np.ndarray]) -> KeyframeLookup:
    """(video_id, 帧) -> (视频序号, 帧)，供训练批次使用"""
    positions = {video.video_id: index for index, video in enumerate(dataset.videos)}
    return {(positions[video_id], frame): image for (video_id, frame), image in keyframes.items()}


# ---------------------------------------------------------------- 重建

def reconstruct_clips(
    params: ModelParams,
    keyframes: Mapping[int, np.ndarray],
    clip_indices: Sequence[int],
    batch_size: int = 4,
) -> np.ndarray:
    """按片段重建，返回 [len(clip_indices)·S,3,H,W]"""
    config = params.config
    clip_len = config.clip_len
    times = clip_times(clip_len)
    outputs: List[np.ndarray] = []
    with no_grad():
        for offset in range(0, len(clip_indices), batch_size):
            chunk = clip_indices[offset:offset + batch_size]
            start = np.stack([keyframes[j * clip_len] for j in chunk]).astype(params.dtype)
            end = np.stack([keyframes[(j + 1) * clip_len] for j in chunk]).astype(params.dtype)
            clips = forward_clip((start, end), times, params).data
            frames = np.moveaxis(clips, -1, 1).reshape((-1,) + clips.shape[1:4])
            if config.copy_keyframes:
                frames = frames.copy()
                for b, j in enumerate(chunk):
                    frames[b * clip_len] = keyframes[j * clip_len]
            outputs.append(frames)
    return np.concatenate(outputs, axis=0)


def reconstruct_video(
    params: ModelParams,
    keyframes: Mapping[int, np.ndarray],
    retained: int,
    batch_size: int = 4,
) -> np.ndarray:
    """D-NeRV 重建全部保留帧；末尾边界帧 kS 直接取解码后的关键帧"""
    clip_len = params.config.clip_len
    count = (retained - 1) // clip_len
    frames = reconstruct_clips(params, keyframes, list(range(count)), batch_size)
    tail = np.asarray(keyframes[count * clip_len], dtype=frames.dtype)[None]
    return np.concatenate([frames, tail], axis=0)


def reconstruct_nerv(params: ModelParams, frame_positions: Sequence[int], total_frames: int, batch_size: int = 8) -> np.ndarray:
    """NeRV 按全局帧位置重建"""
    times = global_times(total_frames)
    outputs: List[np.ndarray] = []
    with no_grad():
        for offset in range(0, len(frame_positions), batch_size):
            chunk = list(frame_positions[offset:offset + batch_size])
            outputs.append(nerv_forward(times[chunk], params).data)
    return np.concatenate(outputs, axis=0)


def _video_offsets(videos: Sequence[Dict]) -> Tuple[Dict[str, int], int]:
    offsets: Dict[str, int] = {}
    total = 0
    for video in videos:
        offsets[video["id"]] = total
        total += int(video["frames"])
    return offsets, total


def decode_bundle(
    bundle: CompressedBundle,
    selection: Optional[Selection] = None,
    batch_size: int = 4,
    params: Optional[ModelParams] = None,
) -> Dict[str, DecodedVideo]:
    """解码整个码流或其中一个视频 / 片段；只解码被选中片段用到的关键帧"""
    params = params or decompress_params(bundle)
    config = params.config
    clip_len = int(bundle.config["clip_len"])
    videos = bundle.config["videos"]
    known = {video["id"]: int(video["frames"]) for video in videos}
    if selection is not None:
        if selection.video_id not in known:
            raise SelectionError(f"码流中没有视频 {selection.video_id!r} (可选 {sorted(known)})")
        clips = (known[selection.video_id] - 1) // clip_len
        if selection.clip is not None and not 0 <= selection.clip < clips:
            raise SelectionError(f"视频 {selection.video_id} 只有 {clips} 个片段 (clip={selection.clip})")

    targets = [v for v in videos if selection is None or v["id"] == selection.video_id]
    decoded: Dict[str, DecodedVideo] = {}

    if config.variant == "nerv":
        offsets, total = _video_offsets(videos)
        for video in targets:
            count = int(video["frames"])
            first, last = 0, count
            if selection is not None and selection.clip is not None:
                first, last = selection.clip * clip_len, (selection.clip + 1) * clip_len
            positions = [offsets[video["id"]] + i for i in range(first, last)]
            frames = reconstruct_nerv(params, positions, total, batch_size)
            decoded[video["id"]] = DecodedVideo(video["id"], frames, first)
        return decoded

    for video in targets:
        count = int(video["frames"])
        clips = (count - 1) // clip_len
        if selection is not None and selection.clip is not None:
            clip_indices = [selection.clip]
            wanted = [(video["id"], selection.clip * clip_len), (video["id"], (selection.clip + 1) * clip_len)]
        else:
            clip_indices = list(range(clips))
            wanted = [(video["id"], i * clip_len) for i in range(clips + 1)]
        images = decompress_keyframes(bundle, wanted)
        missing = [key for key in wanted if key not in images]
        if missing:
            raise SelectionError(f"码流缺少关键帧: {missing}")
        logger.info("视频 %s: 解码关键帧 %s", video["id"], [frame for _, frame in wanted])
        by_frame = {frame: image for (_, frame), image in images.items()}
        if len(clip_indices) == clips:
            frames = reconstruct_video(params, by_frame, count, batch_size)
            decoded[video["id"]] = DecodedVideo(video["id"], frames, 0)
        else:
            frames = reconstruct_clips(params, by_frame, clip_indices, batch_size)
            decoded[video["id"]] = DecodedVideo(video["id"], frames, clip_indices[0] * clip_len)
    return decoded


def reconstruct_dataset(
    params: ModelParams,
    dataset: Dataset,
    keyframes: Optional[Mapping[KeyframeKey, np.ndarray]] = None,
    batch_size: int = 4,
) -> Dict[str, np.ndarray]:
    """内存中的整库重建，keyframes 缺省时用原始关键帧"""
    config = params.config
    clip_len = config.clip_len
    if config.variant == "nerv":
        layout = bundle_layout(dataset, clip_len)
        offsets, total = _video_offsets(layout["videos"])
        return {
            video["id"]: reconstruct_nerv(
                params, [offsets[video["id"]] + i for i in range(int(video["frames"]))], total, batch_size
            )
            for video in layout["videos"]
        }
    keyframes = keyframes if keyframes is not None else dataset_keyframes(dataset, clip_len)
    result: Dict[str, np.ndarray] = {}
    for video in dataset.videos:
        retained = retained_length(video.num_frames, clip_len)
        by_frame = {frame: image for (vid, frame), image in keyframes.items() if vid == video.video_id}
        result[video.video_id] = reconstruct_video(params, by_frame, retained, batch_size)
    return result


def references(dataset: Dataset, clip_len: int) -> Dict[str, np.ndarray]:
    return {
        video.video_id: video.frames[: retained_length(video.num_frames, clip_len)]
        for video in dataset.videos
    }


# ---------------------------------------------------------------- 修复评估

def mean_fill(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """掩码内像素用该帧各通道未遮挡像素的均值填充"""
    keep = np.asarray(mask) > 0
    filled = np.array(frame, dtype=np.float64, copy=True)
    for channel in range(filled.shape[0]):
        visible = filled[channel][keep]
        fill = float(visible.mean()) if visible.size else 0.5
        filled[channel][~keep] = fill
    return filled.astype(np.float32)


def predicted_frames(config: ModelConfig, retained: int) -> List[int]:
    """由网络生成的帧序号；末尾边界帧 (以及 copy_keyframes 时的关键帧位) 是解码关键帧，不计入"""
    if config.variant == "nerv":
        return list(range(retained))
    clip_len = config.clip_len
    frames = range(retained - 1)
    if config.copy_keyframes:
        return [i for i in frames if i % clip_len]
    return list(frames)


@dataclass
class InpaintReport:
    model_psnr: float
    baseline_psnr: float
    per_video: Dict[str, Tuple[float, float]]
    scored_frames: Dict[str, List[int]]


def inpaint_report(
    params: ModelParams,
    dataset: Dataset,
    mask_spec: MaskSpec,
    keyframes: Optional[Mapping[KeyframeKey, np.ndarray]] = None,
    batch_size: int = 4,
) -> InpaintReport:
    """掩码区域 PSNR：模型输出与均值填充基线，先视频内平均再视频间平均"""
    clip_len = params.config.clip_len
    if keyframes is None:
        keyframes = dataset_keyframes(dataset, clip_len, mask_spec)
    decoded = reconstruct_dataset(params, dataset, keyframes, batch_size)
    model_scores: Dict[str, List[float]] = {}
    baseline_scores: Dict[str, List[float]] = {}
    scored: Dict[str, List[int]] = {}
    for index, video in enumerate(dataset.videos):
        height, width = video.frame_size
        frames = decoded[video.video_id]
        scored[video.video_id] = predicted_frames(params.config, frames.shape[0])
        model_scores[video.video_id] = []
        baseline_scores[video.video_id] = []
        for frame_index in scored[video.video_id]:
            pred, gt = frames[frame_index], video.frames[frame_index]
            mask = frame_mask(mask_spec, height, width, index, frame_index)
            model_scores[video.video_id].append(masked_psnr(quantize_frames(pred), gt, mask[None]))
            baseline_scores[video.video_id].append(masked_psnr(mean_fill(gt * mask[None], mask), gt, mask[None]))
    per_video = {
        vid: (float(np.mean(model_scores[vid])), float(np.mean(baseline_scores[vid]))) for vid in model_scores
    }
    return InpaintReport(
        model_psnr=average_per_video(model_scores),
        baseline_psnr=average_per_video(baseline_scores),
        per_video=per_video,
        scored_frames=scored,
    )
