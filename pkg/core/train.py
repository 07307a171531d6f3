"""
训练 - L1 + SSIM 复合损失、AdamW、warmup + 余弦学习率与训练主循环
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .dataset import (
    ClipRecord,
    Dataset,
    KeyframeLookup,
    MaskSpec,
    apply_masks,
    dataset_clips,
    frame_mask,
    frame_table,
    global_times,
    make_clip_batch,
)
from .errors import ConfigError, DatasetError, ShapeError, TrainingDivergedError
from .metrics import psnr
from .model import ModelConfig, ModelParams, forward_clip, init_params, nerv_forward, to_frame_layout
from .run_store import RunStore, atomic_write_text, format_csv
from .tensor import (
    Tensor,
    absolute,
    constant,
    gaussian_blur,
    gaussian_kernel,
    mean,
    mul,
    no_grad,
    sub,
    sum_,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "loss", "psnr", "lr")
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    batch_size: int = 2
    epochs: int = 10
    warmup_epochs: int = 2
    alpha: float = 0.7
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr_peak <= 0:
            raise ConfigError("train.lr_peak", f"必须 > 0 (got {self.lr_peak})")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"必须 >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            raise ConfigError("train.epochs", f"必须 >= 0 (got {self.epochs})")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ConfigError("train.warmup_epochs", f"必须满足 0 <= warmup_epochs < epochs (got {self.warmup_epochs})")
        if self.epochs == 0 and self.warmup_epochs != 0:
            raise ConfigError("train.warmup_epochs", "epochs 为 0 时 warmup_epochs 必须为 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("train.alpha", f"必须位于 [0, 1] (got {self.alpha})")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", f"必须 >= 0 (got {self.weight_decay})")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("train.betas", f"必须是两个 [0,1) 内的数 (got {self.betas})")
        if self.eps <= 0:
            raise ConfigError("train.eps", f"必须 > 0 (got {self.eps})")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


# ---------------------------------------------------------------- 损失

def _frames(x: Tensor) -> Tensor:
    return to_frame_layout(x) if x.ndim == 5 else x


def _mask_frames(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 5:
        mask = np.moveaxis(mask, -1, 1).reshape((-1,) + mask.shape[1:4])
    return mask


def ssim_term(pred: Tensor, gt: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """可微的单尺度 SSIM，mask 给出时只统计未遮挡像素"""
    kernel = gaussian_kernel()
    if mask is None:
        mu_x = gaussian_blur(pred, kernel)
        mu_y = gaussian_blur(gt, kernel)
        var_x = sub(gaussian_blur(mul(pred, pred), kernel), mul(mu_x, mu_x))
        var_y = sub(gaussian_blur(mul(gt, gt), kernel), mul(mu_y, mu_y))
        cov = sub(gaussian_blur(mul(pred, gt), kernel), mul(mu_x, mu_y))
        weights = None
    else:
        m = constant(np.broadcast_to(mask, pred.shape).astype(pred.dtype), pred)
        coverage = gaussian_blur(m, kernel).data
        total = float(coverage.sum())
        if total == 0.0:
            return constant(np.ones((), dtype=pred.dtype), pred)
        inverse = constant(np.where(coverage > 0, 1.0 / np.where(coverage > 0, coverage, 1.0), 0.0), pred)
        weights = constant(coverage / total, pred)
        xm = mul(pred, m)
        ym = mul(gt, m)
        mu_x = mul(gaussian_blur(xm, kernel), inverse)
        mu_y = mul(gaussian_blur(ym, kernel), inverse)
        var_x = sub(mul(gaussian_blur(mul(xm, xm), kernel), inverse), mul(mu_x, mu_x))
        var_y = sub(mul(gaussian_blur(mul(ym, ym), kernel), inverse), mul(mu_y, mu_y))
        cov = sub(mul(gaussian_blur(mul(xm, ym), kernel), inverse), mul(mu_x, mu_y))

    luminance = (mul(mu_x, mu_y) * 2.0 + SSIM_C1) / (mul(mu_x, mu_x) + mul(mu_y, mu_y) + SSIM_C1)
    contrast = (cov * 2.0 + SSIM_C2) / (var_x + var_y + SSIM_C2)
    ssim_map = mul(luminance, contrast)
    if weights is None:
        return mean(ssim_map)
    return sum_(mul(ssim_map, weights))


def composite_loss(pred: Tensor, gt, alpha: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """L1 + α·(1 - SSIM)；mask 中为 0 的像素不参与任何统计"""
    gt = constant(gt, pred)
    if pred.shape != gt.shape:
        raise ShapeError("composite_loss", "预测与真值形状必须一致", (pred.shape, gt.shape))
    pred_frames = _frames(pred)
    gt_frames = _frames(gt)
    diff = absolute(sub(pred_frames, gt_frames))
    if mask is None:
        l1 = mean(diff)
        frame_mask_array = None
    else:
        frame_mask_array = _mask_frames(mask)
        m = constant(np.broadcast_to(frame_mask_array, pred_frames.shape).astype(pred.dtype), pred)
        count = float(m.data.sum())
        l1 = sum_(mul(diff, m)) * (1.0 / count if count > 0 else 0.0)
    if alpha == 0.0:
        return l1
    return l1 + (1.0 - ssim_term(pred_frames, gt_frames, frame_mask_array)) * alpha


# ---------------------------------------------------------------- 优化器

@dataclass
class AdamWState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: ModelParams,
    grads: Optional[Mapping[str, np.ndarray]],
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamWState:
    """解耦权重衰减的 Adam 更新，原地修改参数；grads 为 None 时取各参数的 .grad"""
    if grads is None:
        grads = {name: t.grad for name, t in params.items() if t.grad is not None}
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"参数 {name} 的梯度含有 NaN/Inf (step {state.step + 1})", parameter=name)

    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        first = state.first.get(name)
        second = state.second.get(name)
        if first is None:
            first = np.zeros_like(tensor.data)
            second = np.zeros_like(tensor.data)
        first = beta1 * first + (1.0 - beta1) * grad
        second = beta2 * second + (1.0 - beta2) * grad * grad
        state.first[name] = first.astype(tensor.dtype, copy=False)
        state.second[name] = second.astype(tensor.dtype, copy=False)
        update = (first / correction1) / (np.sqrt(second / correction2) + eps)
        tensor.data = (tensor.data * (1.0 - lr * weight_decay) - lr * update).astype(tensor.dtype, copy=False)
    return state


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """线性 warmup 到 lr_peak，之后余弦退火到 0"""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_peak * step / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / decay_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- 训练主循环

@dataclass
class TrainResult:
    params: ModelParams
    history: List[List[str]]
    checkpoint_path: Optional[Path] = None


class _NervUnits:
    """NeRV 基线的训练单元：全部保留帧首尾相接，按全局时间索引"""

    def __init__(self, dataset: Dataset, clip_len: int):
        self.dataset = dataset
        self.table = frame_table(dataset, clip_len)
        self.times = global_times(len(self.table))

    def __len__(self) -> int:
        return len(self.table)

    def batch(self, indices: Sequence[int], mask_spec: Optional[MaskSpec]):
        frames = np.stack([self.dataset.videos[v].frames[f] for v, f in (self.table[i] for i in indices)])
        masks = None
        if mask_spec is not None and mask_spec.boxes_per_frame > 0:
            height, width = frames.shape[2:]
            masks = np.stack(
                [frame_mask(mask_spec, height, width, *self.table[i])[None] for i in indices]
            )
        return self.times[list(indices)], frames.astype(np.float32), masks


def _check_dataset(dataset: Dataset, model_config: ModelConfig) -> None:
    if len(dataset) == 0:
        raise DatasetError("数据集为空")
    if tuple(dataset.frame_size) != tuple(model_config.input_size):
        raise DatasetError(f"帧尺寸 {dataset.frame_size} 与 model.input_size {tuple(model_config.input_size)} 不一致")


def eval_subset_psnr(
    params: ModelParams,
    dataset: Dataset,
    batch_size: int,
    keyframes: Optional[KeyframeLookup] = None,
) -> float:
    """在固定评估子集 (每个片段的第 0 帧与第 S/2 帧) 上的平均 PSNR"""
    config = params.config
    clip_len = config.clip_len
    picks = sorted({0, clip_len // 2})
    scores: List[float] = []
    records = dataset_clips(dataset, clip_len)
    with no_grad():
        if config.variant == "nerv":
            units = _NervUnits(dataset, clip_len)
            positions = {pair: i for i, pair in enumerate(units.table)}
            wanted = [positions[(r.video_index, r.start + p)] for r in records for p in picks]
            for offset in range(0, len(wanted), batch_size):
                chunk = wanted[offset:offset + batch_size]
                times, frames, _ = units.batch(chunk, None)
                pred = nerv_forward(times, params).data
                scores.extend(psnr(p, g) for p, g in zip(pred, frames))
        else:
            for offset in range(0, len(records), batch_size):
                batch = make_clip_batch(dataset, records[offset:offset + batch_size], keyframes)
                pred = forward_clip(batch.keyframes, batch.t_indices, params).data
                for b in range(batch.batch_size):
                    scores.extend(psnr(pred[b, ..., p], batch.frames[b, ..., p]) for p in picks)
    return float(np.mean(scores))


def _clip_step(params, dataset, records, keyframes, mask_spec, alpha) -> Tensor:
    batch = make_clip_batch(dataset, records, keyframes)
    if mask_spec is not None and mask_spec.boxes_per_frame > 0:
        batch = apply_masks(batch, mask_spec)
    pred = forward_clip(batch.keyframes, batch.t_indices, params)
    return composite_loss(pred, batch.frames, alpha, batch.masks)


def _write_metrics(store: Optional[RunStore], history: List[List[str]]) -> None:
    if store is not None:
        atomic_write_text(store.metrics_path, format_csv(METRICS_HEADER, history))


def train_loop(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    store: Optional[RunStore] = None,
    keyframes: Optional[KeyframeLookup] = None,
    mask_spec: Optional[MaskSpec] = None,
    dtype=np.float32,
) -> TrainResult:
    """打乱片段顺序的 mini-batch 训练；每个 epoch 记录评估 PSNR 并写检查点

    keyframes 为编解码后的关键帧查找表时，训练时看到的关键帧与解码时完全一致。
    loss 出现 NaN 时抛出 TrainingDivergedError，运行目录中保留上一个完好的检查点。
    """
    model_config.validate()
    train_config.validate()
    _check_dataset(dataset, model_config)
    if mask_spec is not None:
        mask_spec.validate(dataset.frame_size)

    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, seed=train_config.seed, dtype=dtype)
    nerv = model_config.variant == "nerv"
    if nerv:
        units = _NervUnits(dataset, model_config.clip_len)
        unit_count = len(units)
    else:
        records: List[ClipRecord] = dataset_clips(dataset, model_config.clip_len)
        unit_count = len(records)

    steps_per_epoch = math.ceil(unit_count / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    warmup_steps = train_config.warmup_epochs * steps_per_epoch
    logger.info(
        "开始训练: variant=%s 参数量=%d 训练单元=%d 每轮步数=%d 总步数=%d",
        model_config.variant, params.num_parameters(), unit_count, steps_per_epoch, total_steps,
    )

    checkpoint_path = None
    history: List[List[str]] = []
    if store is not None:
        checkpoint_path = save_checkpoint(store.checkpoint_path, params)
        _write_metrics(store, history)

    state = AdamWState()
    step = 0
    lr = 0.0
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(unit_count)
        losses: List[float] = []
        for offset in range(0, unit_count, train_config.batch_size):
            chunk = [int(i) for i in order[offset:offset + train_config.batch_size]]
            params.zero_grad()
            if nerv:
                times, frames, masks = units.batch(chunk, mask_spec)
                loss = composite_loss(nerv_forward(times, params), frames, train_config.alpha, masks)
            else:
                loss = _clip_step(
                    params, dataset, [records[i] for i in chunk], keyframes, mask_spec, train_config.alpha
                )
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"epoch {epoch} step {step + 1}: loss 为 {value}，已保留上一个检查点")
            loss.backward()
            lr = lr_at(step, total_steps, warmup_steps, train_config.lr_peak)
            adamw_step(params, None, state, lr, train_config.betas, train_config.eps, train_config.weight_decay)
            losses.append(value)
            step += 1

        score = eval_subset_psnr(params, dataset, train_config.batch_size, keyframes)
        epoch_loss = float(np.mean(losses))
        history.append([str(epoch), str(step), f"{epoch_loss:.8f}", f"{score:.6f}", f"{lr:.8e}"])
        logger.info("epoch %d/%d step %d loss=%.6f psnr=%.3f lr=%.3e",
                    epoch, train_config.epochs, step, epoch_loss, score, lr)
        if store is not None:
            checkpoint_path = save_checkpoint(store.checkpoint_path, params)
            _write_metrics(store, history)

    return TrainResult(params=params, history=history, checkpoint_path=checkpoint_path)
