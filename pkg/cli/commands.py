"""
命令实现 - 每个子命令返回进程退出码
"""

import argparse
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from core.checkpoint import load_checkpoint
from core.compress import CompressedBundle, bpp, compress_model, load_bundle, save_bundle
from core.config_manager import ConfigManager, RunConfig
from core.dataset import Dataset, load_dataset, save_dataset, save_video, synth_corpus
from core.errors import (
    BundleFormatError,
    CodecError,
    ConfigError,
    DatasetError,
    DNeRVError,
    EntropyDecodeError,
    InputRangeError,
    MetricsError,
    RunLockedError,
    SelectionError,
    ShapeError,
    StageError,
    TrainingDivergedError,
)
from core.metrics import RdPoint, average_per_video, frame_scores, psnr, rd_point, write_rd_report
from core.model import ModelConfig, ModelParams, init_params
from core.pipeline import (
    Selection,
    bundle_layout,
    codec_roundtrip,
    dataset_keyframes,
    decode_bundle,
    index_lookup,
    inpaint_report,
    quantize_frames,
    references,
)
from core.run_store import RunStore, atomic_write_text, format_csv
from core.train import train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3

BUNDLE_NAME = "bundle.dnvb"
INPAINT_NAME = "inpaint.csv"

FLAG_OVERRIDES = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "clip_len": "model.clip_len",
    "kf_codec": "compress.kf_codec",
    "quality": "compress.quality",
    "bits": "compress.bits",
    "variant": "model.variant",
    "data": "dataset.path",
}


# ---------------------------------------------------------------- 公共步骤

def load_config(args: argparse.Namespace) -> Tuple[ConfigManager, RunConfig]:
    """配置文件 → 命令行参数 → --set 覆盖，最后统一校验"""
    manager = ConfigManager(getattr(args, "config", None))
    manager.apply_overrides({key: getattr(args, flag, None) for flag, key in FLAG_OVERRIDES.items()})
    for assignment in getattr(args, "overrides", []) or []:
        manager.apply_override(assignment)
    return manager, manager.resolve()


def load_data(config: RunConfig) -> Dataset:
    if config.dataset.path:
        return load_dataset(config.dataset.path)
    synth = config.dataset.synth
    logger.info("未指定数据集目录，使用合成语料 (%d 个视频, %d 类, %d 帧)", synth.n_videos, synth.n_classes, synth.frames)
    return synth_corpus(synth.n_videos, synth.n_classes, synth.frames, tuple(config.model.input_size), synth.seed)


def open_store(args: argparse.Namespace, config: RunConfig) -> RunStore:
    if getattr(args, "out", None):
        return RunStore(path=args.out)
    return RunStore(root=config.run.root, name=config.run.name)


def training_keyframes(dataset: Dataset, config: RunConfig, masked: bool = False):
    """训练与解码使用同一份关键帧：编解码后 (以及修复任务中遮挡后) 的图像"""
    if config.model.variant != "dnerv":
        return None, None
    mask_spec = config.mask if masked and config.mask.boxes_per_frame > 0 else None
    keyframes = dataset_keyframes(dataset, config.model.clip_len, mask_spec)
    if config.codec_aware_keyframes:
        keyframes = codec_roundtrip(keyframes, config.compress.codec_config)
    return keyframes, index_lookup(dataset, keyframes)


def _check_frame_size(params: ModelParams, dataset: Dataset) -> None:
    if tuple(params.config.input_size) != tuple(dataset.frame_size):
        raise DatasetError(
            f"检查点输入尺寸 {tuple(params.config.input_size)} 与数据集帧尺寸 {dataset.frame_size} 不一致"
        )


def decoded_psnr(bundle: CompressedBundle, dataset: Dataset) -> float:
    """8 bit 取整后的解码帧 PSNR，先视频内平均再视频间平均"""
    decoded = decode_bundle(bundle)
    scores: Dict[str, List[float]] = {}
    for video_id, reference in references(dataset, int(bundle.config["clip_len"])).items():
        frames = quantize_frames(decoded[video_id].frames)
        scores[video_id] = [psnr(d, r) for d, r in zip(frames, reference)]
    return average_per_video(scores)


def build_bundle(params: ModelParams, dataset: Dataset, config: RunConfig) -> CompressedBundle:
    clip_len = params.config.clip_len
    keyframes = dataset_keyframes(dataset, clip_len) if params.config.variant == "dnerv" else {}
    return compress_model(
        params,
        bits=config.compress.bits,
        keyframes=keyframes,
        codec_config=config.compress.codec_config,
        layout=bundle_layout(dataset, clip_len),
    )


INVALID_INPUT = (
    ConfigError, DatasetError, BundleFormatError, EntropyDecodeError, SelectionError, MetricsError,
    CodecError, RunLockedError, ShapeError, InputRangeError, StageError,
)


def run_command(handler: Callable[[argparse.Namespace], int], args: argparse.Namespace) -> int:
    """把领域异常映射为退出码"""
    try:
        return handler(args)
    except TrainingDivergedError as exc:
        logger.error("训练发散: %s", exc)
        print(f"错误: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except INVALID_INPUT as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"错误: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DNeRVError as exc:
        logger.exception("未分类的错误")
        print(f"错误: {exc}", file=sys.stderr)
        return EXIT_FAILED


# ---------------------------------------------------------------- 子命令

def cmd_synth(args: argparse.Namespace) -> int:
    _, config = load_config(args)
    if not args.out:
        raise ConfigError("out", "synth 需要 --out 指定输出目录")
    synth = config.dataset.synth
    dataset = synth_corpus(synth.n_videos, synth.n_classes, synth.frames, tuple(config.model.input_size), synth.seed)
    path = save_dataset(dataset, args.out)
    print(f"videos={len(dataset)} frames={synth.frames} path={path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    manager, config = load_config(args)
    dataset = load_data(config)
    store = open_store(args, config)
    with store.lock():
        manager.export_config(store.config_path)
        _, lookup = training_keyframes(dataset, config)
        result = train_loop(dataset, config.model, config.train, store=store, keyframes=lookup)
    final_psnr = result.history[-1][3] if result.history else "-"
    print(f"checkpoint={result.checkpoint_path} epochs={len(result.history)} psnr={final_psnr}")
    return EXIT_OK


def cmd_compress(args: argparse.Namespace) -> int:
    _, config = load_config(args)
    out = Path(args.out) if args.out else None
    if out is not None and out.suffix == ".dnvb":
        store = RunStore(root=config.run.root, name=config.run.name)
        target = out
    else:
        store = open_store(args, config)
        target = store.artifact(BUNDLE_NAME)
    params = load_checkpoint(Path(args.checkpoint) if args.checkpoint else store.checkpoint_path)
    dataset = load_data(config)
    _check_frame_size(params, dataset)

    bundle = build_bundle(params, dataset, config)
    save_bundle(target, bundle)
    ledger = bundle.ledger()
    rate = bpp(bundle, bundle.total_pixels())
    quality = decoded_psnr(bundle, dataset)
    print(f"model_bytes={ledger.model_bytes} keyframe_bytes={ledger.keyframe_bytes} bpp={rate} psnr={quality}")
    logger.info("码流已写出: %s", target)
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    if not args.out:
        raise ConfigError("out", "decode 需要 --out 指定输出目录")
    bundle = load_bundle(args.bundle)
    selection = Selection.parse(args.select) if args.select else None
    decoded = decode_bundle(bundle, selection)
    written = 0
    for video_id, video in decoded.items():
        written += len(save_video(Path(args.out) / video_id, video.frames, video.first_index))
    print(f"videos={len(decoded)} frames={written} path={args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _, config = load_config(args)
    bundle = load_bundle(args.bundle)
    clip_len = int(bundle.config["clip_len"])
    truth = references(load_dataset(args.gt), clip_len)
    decoded = {video.video_id: video.frames for video in load_dataset(args.decoded).videos}

    mismatched = [
        f"{vid}: decoded={decoded[vid].shape[0] if vid in decoded else 0} expected={frames.shape[0]}"
        for vid, frames in truth.items()
        if vid not in decoded or decoded[vid].shape[0] != frames.shape[0]
    ]
    if mismatched:
        raise MetricsError("帧数不一致: " + "; ".join(mismatched))

    psnr_by_video: Dict[str, List[float]] = {}
    ms_by_video: Dict[str, List[float]] = {}
    print(f"{'video':<24}{'psnr_db':>12}{'ms_ssim':>12}")
    for vid, frames in truth.items():
        psnr_by_video[vid], ms_by_video[vid] = frame_scores(decoded[vid], frames)
        print(f"{vid:<24}{np.mean(psnr_by_video[vid]):>12.4f}{np.mean(ms_by_video[vid]):>12.6f}")
    point = RdPoint(
        bpp=bpp(bundle, bundle.total_pixels()),
        psnr_db=average_per_video(psnr_by_video),
        ms_ssim=average_per_video(ms_by_video),
        label=args.label,
    )
    print(f"{'average':<24}{point.psnr_db:>12.4f}{point.ms_ssim:>12.6f}")
    print(f"bpp={point.bpp} psnr={point.psnr_db} ms_ssim={point.ms_ssim}")

    report = Path(args.report) if args.report else open_store(args, config).report_path
    write_rd_report(report, [point])
    return EXIT_OK


def cmd_inpaint(args: argparse.Namespace) -> int:
    manager, config = load_config(args)
    dataset = load_data(config)
    store = open_store(args, config)
    mask_spec = config.mask.validate(dataset.frame_size)
    with store.lock():
        manager.export_config(store.config_path)
        keyframes, lookup = training_keyframes(dataset, config, masked=True)
        result = train_loop(
            dataset, config.model, config.train, store=store, keyframes=lookup,
            mask_spec=mask_spec if mask_spec.boxes_per_frame > 0 else None,
        )
        report = inpaint_report(result.params, dataset, mask_spec, keyframes)
        rows = [["model", f"{report.model_psnr:.6f}"], ["mean_fill", f"{report.baseline_psnr:.6f}"]]
        rows += [[f"{vid}/model", f"{m:.6f}"] for vid, (m, _) in report.per_video.items()]
        rows += [[f"{vid}/mean_fill", f"{b:.6f}"] for vid, (_, b) in report.per_video.items()]
        atomic_write_text(store.artifact(INPAINT_NAME), format_csv(("label", "masked_psnr"), rows))
    print(f"masked_psnr={report.model_psnr} mean_fill_psnr={report.baseline_psnr}")
    return EXIT_OK


# ---------------------------------------------------------------- 码率-失真扫描

def scale_width(config: ModelConfig, width: float) -> ModelConfig:
    """按倍数缩放各阶段通道数与 NeRV 主干宽度"""
    def scaled(value: int) -> int:
        return max(1, int(round(value * width)))

    return replace(
        config,
        stage_channels=[scaled(c) for c in config.stage_channels],
        nerv_stem_channels=scaled(config.nerv_stem_channels),
        nerv_hidden=scaled(config.nerv_hidden),
    )


SizeOf = Callable[[ModelConfig], int]


def match_width(config: ModelConfig, target_bytes: int, size_of: SizeOf) -> Tuple[ModelConfig, float, int]:
    """二分搜索宽度倍数使码流总大小最接近目标；NeRV 再用 nerv_hidden 细调

    size_of 返回候选配置压缩后的码流字节数 (模型 + 关键帧)。
    返回 (配置, 宽度倍数, 码流字节数)。
    """
    cache: Dict[Tuple, int] = {}

    def measure(candidate: ModelConfig) -> int:
        key = (tuple(candidate.stage_channels), candidate.nerv_stem_channels, candidate.nerv_hidden)
        if key not in cache:
            cache[key] = size_of(candidate)
        return cache[key]

    low, high = 1.0 / 64.0, 64.0
    best = (math.inf, config, 1.0, 0)
    for _ in range(40):
        width = math.sqrt(low * high)
        candidate = scale_width(config, width)
        size = measure(candidate)
        if abs(size - target_bytes) < best[0]:
            best = (abs(size - target_bytes), candidate, width, size)
        if size < target_bytes:
            low = width
        else:
            high = width

    if config.variant == "nerv":
        coarse, width = best[1], best[2]
        low_hidden, high_hidden = 1, max(4 * coarse.nerv_hidden, 4)
        while low_hidden <= high_hidden:
            hidden = (low_hidden + high_hidden) // 2
            candidate = replace(coarse, nerv_hidden=hidden)
            size = measure(candidate)
            if abs(size - target_bytes) < best[0]:
                best = (abs(size - target_bytes), candidate, width, size)
            if size < target_bytes:
                low_hidden = hidden + 1
            else:
                high_hidden = hidden - 1
    return best[1], best[2], best[3]


@dataclass
class SweepPoint:
    variant: str
    width: float
    bits: int
    quality: int

    @property
    def label(self) -> str:
        return f"{self.variant}-w{self.width:g}-b{self.bits}-q{self.quality}"


def _run_point(point: SweepPoint, config: RunConfig, dataset: Dataset, store: RunStore,
               target_bytes: Optional[int]) -> Tuple[RdPoint, int]:
    base = replace(config.model, variant=point.variant)
    point_config = replace(
        config, compress=replace(config.compress, bits=point.bits, quality=point.quality).validate()
    )
    if target_bytes is None:
        model = scale_width(base, point.width)
    else:
        def size_of(candidate: ModelConfig) -> int:
            params = init_params(candidate, seed=config.train.seed)
            return build_bundle(params, dataset, point_config).file_size

        model, width, estimate = match_width(base, target_bytes, size_of)
        logger.info(
            "%s: 目标 %d 字节，宽度倍数 %.3f，nerv_hidden=%d，初始化参数码流 %d 字节",
            point.label, target_bytes, width, model.nerv_hidden, estimate,
        )
    point_config = replace(point_config, model=model.validate())
    point_store = RunStore(path=store.path / point.label)
    _, lookup = training_keyframes(dataset, point_config)
    result = train_loop(dataset, point_config.model, point_config.train, store=point_store, keyframes=lookup)
    bundle = build_bundle(result.params, dataset, point_config)
    save_bundle(point_store.artifact(BUNDLE_NAME), bundle)
    decoded = {
        vid: quantize_frames(video.frames) for vid, video in decode_bundle(bundle).items()
    }
    rd = rd_point(bpp(bundle, bundle.total_pixels()), references(dataset, model.clip_len), decoded, point.label)
    return rd, bundle.file_size


def cmd_rd_sweep(args: argparse.Namespace) -> int:
    manager, config = load_config(args)
    dataset = load_data(config)
    store = open_store(args, config)
    sweep = config.sweep
    variants = list(sweep.variants)
    if args.variant and args.variant not in variants:
        variants.append(args.variant)
    variants.sort(key=lambda v: v != "dnerv")

    points = [
        SweepPoint(variant, width, bits, quality)
        for variant in variants
        for width in sweep.widths
        for bits in sweep.bits
        for quality in sweep.qualities
    ]
    rows: List[RdPoint] = []
    failed: List[str] = []
    reference_sizes: Dict[Tuple[float, int, int], int] = {}
    with store.lock():
        manager.export_config(store.config_path)
        for point in points:
            target = None
            if sweep.match_total_size and point.variant == "nerv":
                target = reference_sizes.get((point.width, point.bits, point.quality))
            try:
                rd, size = _run_point(point, config, dataset, store, target)
            except DNeRVError as exc:
                logger.error("扫描点 %s 失败: %s", point.label, exc)
                failed.append(point.label)
                continue
            if point.variant == "dnerv":
                reference_sizes[(point.width, point.bits, point.quality)] = size
            rows.append(rd)
            write_rd_report(store.report_path, rows, append=False)
            print(f"{rd.label} bpp={rd.bpp} psnr={rd.psnr_db} ms_ssim={rd.ms_ssim} bytes={size}")

    if failed:
        print(f"失败的扫描点: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK
