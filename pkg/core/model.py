"""
模型定义 - D-NeRV（关键帧编码器 + 运动感知解码器）与 NeRV 基线

所有函数都是 (参数, 输入) 的纯函数。解码器内部把片段的时间轴折叠进 batch 维，
即帧布局 [B·S, C, h, w]，第 n 个样本对应片段 n // S 的第 n % S 帧；
片段布局 [B, C, h, w, S] 只在 GTMLP 与对外接口处使用。
"""

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DNeRVError, InputRangeError, ShapeError, StageError
from .tensor import (
    Tensor,
    add,
    bilinear_sample,
    broadcast_to,
    concat,
    constant,
    conv2d,
    gelu,
    linear,
    mul,
    narrow,
    permute,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
    scale,
    sigmoid,
    take,
    time_matmul,
)

TimeArg = Union[float, Sequence[float], np.ndarray]


@dataclass
class ModelConfig:
    """网络结构配置，决定全部参数形状"""
    stage_upscales: List[int] = field(default_factory=lambda: [2, 2, 2])
    stage_channels: List[int] = field(default_factory=lambda: [32, 24, 16])
    clip_len: int = 8
    pe_base: float = 1.25
    pe_levels: int = 12
    input_size: Tuple[int, int] = (32, 40)
    variant: str = "dnerv"
    flow_hidden: int = 16
    refine_hidden: int = 16
    nerv_hidden: int = 64
    nerv_stem_channels: int = 32
    use_flow: bool = True
    use_saf: bool = True
    use_gtmlp: bool = True
    copy_keyframes: bool = False

    @property
    def num_stages(self) -> int:
        return len(self.stage_upscales)

    @property
    def total_upscale(self) -> int:
        return int(np.prod(self.stage_upscales))

    def stage_size(self, stage: int) -> Tuple[int, int]:
        """第 stage 个解码阶段输入特征的空间尺寸"""
        remaining = int(np.prod(self.stage_upscales[stage:]))
        height, width = self.input_size
        return height // remaining, width // remaining

    def validate(self) -> "ModelConfig":
        if self.variant not in ("dnerv", "nerv"):
            raise ConfigError("model.variant", f"必须是 dnerv 或 nerv (got {self.variant!r})")
        if not self.stage_upscales or any(int(r) < 1 for r in self.stage_upscales):
            raise ConfigError("model.stage_upscales", f"必须是正整数列表 (got {self.stage_upscales})")
        if len(self.stage_channels) != len(self.stage_upscales):
            raise ConfigError(
                "model.stage_channels",
                f"长度 {len(self.stage_channels)} 与 stage_upscales 长度 {len(self.stage_upscales)} 不一致",
            )
        if any(int(c) < 1 for c in self.stage_channels):
            raise ConfigError("model.stage_channels", f"必须是正整数列表 (got {self.stage_channels})")
        if len(self.input_size) != 2 or any(int(s) < 1 for s in self.input_size):
            raise ConfigError("model.input_size", f"必须是 [H, W] (got {self.input_size})")
        height, width = self.input_size
        if height % self.total_upscale or width % self.total_upscale:
            raise ConfigError(
                "model.input_size",
                f"{height}x{width} 不能被总放大倍数 {self.total_upscale} 整除",
            )
        if self.clip_len < 1:
            raise ConfigError("model.clip_len", f"必须 >= 1 (got {self.clip_len})")
        if self.pe_levels < 1:
            raise ConfigError("model.pe_levels", f"必须 >= 1 (got {self.pe_levels})")
        if self.pe_base <= 0:
            raise ConfigError("model.pe_base", f"必须 > 0 (got {self.pe_base})")
        for name in ("flow_hidden", "refine_hidden", "nerv_hidden", "nerv_stem_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}", f"必须 >= 1 (got {getattr(self, name)})")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["input_size"] = list(self.input_size)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        config = cls(**known)
        config.stage_upscales = [int(r) for r in config.stage_upscales]
        config.stage_channels = [int(c) for c in config.stage_channels]
        config.input_size = (int(config.input_size[0]), int(config.input_size[1]))
        return config


@dataclass
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    init: str
    fan_in: int = 1


class ModelParams:
    """有序的命名参数集合，附带决定形状的结构配置"""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def clone(self, dtype=None) -> "ModelParams":
        copied = OrderedDict(
            (name, Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=dtype or t.dtype))
            for name, t in self.tensors.items()
        )
        return ModelParams(self.config, copied)


# ---------------------------------------------------------------- 参数初始化

def _conv_specs(prefix: str, cout: int, cin: int, k: int = 3, init: str = "uniform") -> List[ParamSpec]:
    fan_in = cin * k * k
    return [
        ParamSpec(f"{prefix}.w", (cout, cin, k, k), init, fan_in),
        ParamSpec(f"{prefix}.b", (cout,), init, fan_in),
    ]


def param_specs(config: ModelConfig) -> List[ParamSpec]:
    """按名称顺序列出全部参数的形状与初始化方式"""
    specs: List[ParamSpec] = []
    upscales = config.stage_upscales
    channels = config.stage_channels
    levels = config.num_stages
    pe_dim = 2 * config.pe_levels

    if config.variant == "nerv":
        base_h, base_w = config.stage_size(0)
        stem = config.nerv_stem_channels
        specs += [
            ParamSpec("nerv.stem1.w", (pe_dim, config.nerv_hidden), "uniform", pe_dim),
            ParamSpec("nerv.stem1.b", (config.nerv_hidden,), "uniform", pe_dim),
            ParamSpec("nerv.stem2.w", (config.nerv_hidden, stem * base_h * base_w), "uniform", config.nerv_hidden),
            ParamSpec("nerv.stem2.b", (stem * base_h * base_w,), "uniform", config.nerv_hidden),
        ]
        cin = stem
        for stage in range(levels):
            r = upscales[stage]
            specs += _conv_specs(f"nerv.up.{stage}", channels[stage] * r * r, cin)
            cin = channels[stage]
        specs += _conv_specs("nerv.head", 3, cin)
        return specs

    # 编码器从全分辨率开始，逐级下采样到各解码阶段的输入尺寸
    for stage in reversed(range(levels)):
        r = upscales[stage]
        cin = 3 if stage == levels - 1 else channels[stage + 1]
        specs += _conv_specs(f"enc.{stage}", channels[stage], cin * r * r)

    for stage in range(levels):
        r = upscales[stage]
        cin = channels[0] + pe_dim if stage == 0 else channels[stage - 1]
        prefix = f"dec.{stage}"
        if config.use_flow:
            specs += _conv_specs(f"{prefix}.flow1", config.flow_hidden, cin)
            specs += _conv_specs(f"{prefix}.flow2", 4, config.flow_hidden, init="zeros")
        if config.use_saf:
            specs += [
                ParamSpec(f"{prefix}.gamma.w", (channels[stage], 1), "zeros"),
                ParamSpec(f"{prefix}.gamma.b", (1,), "ones"),
                ParamSpec(f"{prefix}.beta.w", (channels[stage], 1), "zeros"),
                ParamSpec(f"{prefix}.beta.b", (1,), "zeros"),
            ]
        specs += _conv_specs(f"{prefix}.up", channels[stage] * r * r, cin)
        if config.use_gtmlp:
            specs.append(ParamSpec(f"{prefix}.gtmlp.w", (channels[stage], config.clip_len, config.clip_len), "zeros"))

    last = channels[-1]
    if config.use_flow:
        specs += _conv_specs("final.flow1", config.flow_hidden, last)
        specs += _conv_specs("final.flow2", 4, config.flow_hidden, init="zeros")
    specs += _conv_specs("final.refine1", config.refine_hidden, last + 3)
    specs += _conv_specs("final.refine2", 3, config.refine_hidden)
    return specs


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(spec.shape)) for spec in param_specs(config))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """按 PyTorch 默认的均匀分布 ±1/sqrt(fan_in) 初始化，特殊层见 param_specs"""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for spec in param_specs(config):
        if spec.init == "zeros":
            data = np.zeros(spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        else:
            bound = 1.0 / math.sqrt(spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        tensors[spec.name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- 数据类型

@dataclass
class KeyframePyramid:
    """每个解码阶段的关键帧特征对 (I^l_0, I^l_1)"""
    levels: List[Tuple[Tensor, Tensor]]

    def sizes(self) -> List[Tuple[int, int]]:
        return [tuple(start.shape[2:4]) for start, _ in self.levels]


@dataclass
class FlowPair:
    forward: Tensor
    backward: Tensor


@dataclass
class StageState:
    features: Tensor  # [B, C, h, w, T]
    stage: int


# ---------------------------------------------------------------- 基本组件

def _time_array(t: TimeArg) -> np.ndarray:
    values = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
        raise InputRangeError(f"时间索引必须位于 [0, 1] (got {values.tolist()})")
    return values


def _encode_times(times: np.ndarray, base: float, levels: int) -> np.ndarray:
    frequencies = np.power(float(base), np.arange(levels, dtype=np.float64)) * math.pi
    angles = times[:, None] * frequencies[None, :]
    encoded = np.empty((times.size, 2 * levels), dtype=np.float64)
    encoded[:, 0::2] = np.sin(angles)
    encoded[:, 1::2] = np.cos(angles)
    return encoded


def positional_encode(t: float, base: float, levels: int, dtype=np.float64) -> Tensor:
    """(sin(b^0·π·t), cos(b^0·π·t), ..., sin(b^{l-1}·π·t), cos(b^{l-1}·π·t))"""
    times = _time_array(t)
    if times.size != 1:
        raise InputRangeError("positional_encode 只接受单个时间索引")
    return Tensor(_encode_times(times, base, levels)[0], dtype=dtype)


def _time_weights(t: TimeArg, like: Tensor) -> Union[float, Tensor]:
    if np.isscalar(t):
        return float(t)
    values = np.asarray(t, dtype=like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))
    if values.shape[0] != like.shape[0]:
        raise ShapeError("time_weights", "逐样本时间数量必须等于 batch 大小", (values.shape, like.shape))
    return constant(values, like)


def content_interp(start: Tensor, end: Tensor, t: TimeArg) -> Tensor:
    """(1-t)·start + t·end；t 可以是标量或逐样本数组"""
    if start.shape != end.shape:
        raise ShapeError("content_interp", "两个关键帧特征形状必须一致", (start.shape, end.shape))
    weight = _time_weights(t, start)
    if isinstance(weight, float):
        return add(scale(start, 1.0 - weight), scale(end, weight))
    complement = constant(1.0 - weight.data, start)
    return add(mul(start, complement), mul(end, weight))


def stage1_input(content: Tensor, pe: Tensor) -> Tensor:
    """通道拼接 M^1_t = Concat(I^1_t, PE(t))，PE 在空间上广播"""
    batch, _, height, width = content.shape
    pe = constant(pe, content)
    if pe.ndim == 1:
        pe = reshape(pe, (1, pe.shape[0], 1, 1))
    else:
        pe = reshape(pe, (pe.shape[0], pe.shape[1], 1, 1))
    if pe.dtype != content.dtype:
        pe = Tensor(pe.data, dtype=content.dtype)
    pe = broadcast_to(pe, (batch, pe.shape[1], height, width))
    return concat([content, pe], axis=1)


def _conv(x: Tensor, params: ModelParams, prefix: str, pad: int = 1) -> Tensor:
    return conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"], stride=1, pad=pad)


def estimate_flow(features: Tensor, params: ModelParams, prefix: str) -> FlowPair:
    """两层 3x3 卷积 (中间 GELU) 输出 4 通道，拆为 F_{t→0} 与 F_{t→1}"""
    hidden = gelu(_conv(features, params, f"{prefix}.flow1"))
    flows = _conv(hidden, params, f"{prefix}.flow2")
    return FlowPair(forward=narrow(flows, 1, 0, 2), backward=narrow(flows, 1, 2, 2))


def warp(features: Tensor, flow: Tensor) -> Tensor:
    return bilinear_sample(features, flow)


def warp_blend(start: Tensor, end: Tensor, flows: FlowPair, t: TimeArg) -> Tensor:
    """距离感知融合: (1-t)·warp(I0, F_{t→0}) + t·warp(I1, F_{t→1})"""
    return content_interp(warp(start, flows.forward), warp(end, flows.backward), t)


def saf(features: Tensor, content: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """空间自适应融合: γ·M + β，γ、β 由两层全连接逐像素计算"""
    if features.shape[0] != content.shape[0] or features.shape[2:] != content.shape[2:]:
        raise ShapeError("saf", "内容特征与解码特征的空间尺寸必须一致", (features.shape, content.shape))
    pixels = permute(content, (0, 2, 3, 1))
    gamma = linear(pixels, params[f"{prefix}.gamma.w"], params[f"{prefix}.gamma.b"])
    beta = linear(pixels, params[f"{prefix}.beta.w"], params[f"{prefix}.beta.b"])
    gamma = permute(gamma, (0, 3, 1, 2))
    beta = permute(beta, (0, 3, 1, 2))
    return add(mul(features, gamma), beta)


def upsample_block(features: Tensor, params: ModelParams, prefix: str, r: int) -> Tensor:
    """PixelShuffle(GELU(Conv(J)))"""
    weight = params[f"{prefix}.w"]
    if weight.shape[0] % (r * r):
        raise ShapeError("upsample_block", f"卷积输出通道必须是 r²={r * r} 的倍数", (weight.shape,))
    return pixel_shuffle(gelu(_conv(features, params, prefix)), r)


def gtmlp(clip_features: Tensor, weight: Tensor) -> Tensor:
    """全局时间 MLP: O + matmul(O, W)"""
    return add(clip_features, time_matmul(clip_features, weight))


def to_clip_layout(frames: Tensor, clip_len: int) -> Tensor:
    """[B·S, C, h, w] -> [B, C, h, w, S]"""
    count, channels, height, width = frames.shape
    if count % clip_len:
        raise ShapeError("to_clip_layout", f"帧数不是片段长度 {clip_len} 的倍数", (frames.shape,))
    clips = reshape(frames, (count // clip_len, clip_len, channels, height, width))
    return permute(clips, (0, 2, 3, 4, 1))


def to_frame_layout(clips: Tensor) -> Tensor:
    """[B, C, h, w, S] -> [B·S, C, h, w]"""
    batch, channels, height, width, clip_len = clips.shape
    frames = permute(clips, (0, 4, 1, 2, 3))
    return reshape(frames, (batch * clip_len, channels, height, width))


def final_refine(decoder_features: Tensor, warped_frames: Tensor, params: ModelParams) -> Tensor:
    """拼接 M^L 与融合后的扭曲关键帧，两层卷积 + sigmoid；接受帧布局或片段布局"""
    if decoder_features.ndim == 5:
        clip_len = decoder_features.shape[4]
        refined = final_refine(to_frame_layout(decoder_features), to_frame_layout(warped_frames), params)
        return to_clip_layout(refined, clip_len)
    if decoder_features.shape[0] != warped_frames.shape[0] or decoder_features.shape[2:] != warped_frames.shape[2:]:
        raise ShapeError("final_refine", "解码特征与扭曲帧分辨率不一致", (decoder_features.shape, warped_frames.shape))
    hidden = gelu(_conv(concat([decoder_features, warped_frames], axis=1), params, "final.refine1"))
    return sigmoid(_conv(hidden, params, "final.refine2"))


# ---------------------------------------------------------------- D-NeRV

def encode_keyframes(start: Tensor, end: Tensor, params: ModelParams) -> KeyframePyramid:
    """内容编码器：逐级 space-to-depth + 3x3 卷积 + GELU"""
    config = params.config
    height, width = start.shape[2], start.shape[3]
    if start.shape != end.shape:
        raise ShapeError("encode_keyframes", "起止关键帧形状必须一致", (start.shape, end.shape))
    if height % config.total_upscale or width % config.total_upscale:
        raise ShapeError(
            "encode_keyframes", f"输入尺寸不能被总下采样倍数 {config.total_upscale} 整除", (start.shape,)
        )

    def run(image: Tensor) -> List[Tensor]:
        features: List[Optional[Tensor]] = [None] * config.num_stages
        x = image
        for stage in reversed(range(config.num_stages)):
            x = pixel_unshuffle(x, config.stage_upscales[stage])
            x = gelu(_conv(x, params, f"enc.{stage}"))
            features[stage] = x
        return features

    return KeyframePyramid(levels=list(zip(run(start), run(end))))


def _fold_indices(batch: int, clip_len: int) -> np.ndarray:
    return np.repeat(np.arange(batch), clip_len)


def decoder_stage(
    features: Tensor,
    keyframe_pair: Tuple[Tensor, Tensor],
    t_frames: np.ndarray,
    params: ModelParams,
    stage: int,
) -> StageState:
    """单个解码阶段：流估计、扭曲融合、SAF、上采样块、GTMLP"""
    config = params.config
    start, end = keyframe_pair
    prefix = f"dec.{stage}"
    if config.use_flow:
        content = warp_blend(start, end, estimate_flow(features, params, prefix), t_frames)
    else:
        content = content_interp(start, end, t_frames)
    fused = saf(features, content, params, prefix) if config.use_saf else features
    upsampled = upsample_block(fused, params, f"{prefix}.up", config.stage_upscales[stage])
    clip = to_clip_layout(upsampled, config.clip_len)
    if config.use_gtmlp:
        clip = gtmlp(clip, params[f"{prefix}.gtmlp.w"])
    return StageState(features=clip, stage=stage)


def forward_clip(
    keyframes: Tuple[Tensor, Tensor],
    t_indices: Sequence[float],
    params: ModelParams,
    config: Optional[ModelConfig] = None,
) -> Tensor:
    """输入片段起止关键帧与相对时间索引，一次输出整个片段 [B,3,H,W,S]"""
    config = config or params.config
    start, end = keyframes
    times = _time_array(t_indices)
    if times.size != config.clip_len:
        raise ShapeError("forward_clip", f"时间索引数量必须等于片段长度 {config.clip_len}", ((times.size,),))
    if not isinstance(start, Tensor):
        start = Tensor(start, dtype=params.dtype)
    if not isinstance(end, Tensor):
        end = Tensor(end, dtype=params.dtype)
    batch = start.shape[0]

    try:
        pyramid = encode_keyframes(start, end, params)
    except StageError:
        raise
    except DNeRVError as exc:
        raise StageError(0, exc) from exc

    fold = _fold_indices(batch, config.clip_len)
    t_frames = np.tile(times, batch)
    features: Optional[Tensor] = None
    for stage in range(config.num_stages):
        try:
            level_start, level_end = pyramid.levels[stage]
            pair = (take(level_start, fold, 0), take(level_end, fold, 0))
            if stage == 0:
                pe = Tensor(_encode_times(t_frames, config.pe_base, config.pe_levels), dtype=params.dtype)
                features = stage1_input(content_interp(pair[0], pair[1], t_frames), pe)
            state = decoder_stage(features, pair, t_frames, params, stage)
            features = to_frame_layout(state.features)
        except StageError:
            raise
        except DNeRVError as exc:
            raise StageError(stage, exc) from exc

    try:
        frame_start = take(start, fold, 0)
        frame_end = take(end, fold, 0)
        if config.use_flow:
            warped = warp_blend(frame_start, frame_end, estimate_flow(features, params, "final"), t_frames)
        else:
            warped = content_interp(frame_start, frame_end, t_frames)
        frames = final_refine(features, warped, params)
    except DNeRVError as exc:
        raise StageError(config.num_stages, exc) from exc
    return to_clip_layout(frames, config.clip_len)


# ---------------------------------------------------------------- NeRV 基线

def nerv_forward(t_absolute: TimeArg, params: ModelParams, config: Optional[ModelConfig] = None) -> Tensor:
    """位置编码 → 全连接主干 → 堆叠上采样块 → 3 通道输出头 [B,3,H,W]"""
    config = config or params.config
    times = _time_array(t_absolute)
    pe = Tensor(_encode_times(times, config.pe_base, config.pe_levels), dtype=params.dtype)
    hidden = gelu(linear(pe, params["nerv.stem1.w"], params["nerv.stem1.b"]))
    hidden = gelu(linear(hidden, params["nerv.stem2.w"], params["nerv.stem2.b"]))
    base_h, base_w = config.stage_size(0)
    x = reshape(hidden, (times.size, config.nerv_stem_channels, base_h, base_w))
    for stage, r in enumerate(config.stage_upscales):
        x = upsample_block(x, params, f"nerv.up.{stage}", r)
    return sigmoid(_conv(x, params, "nerv.head"))
