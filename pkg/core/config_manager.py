"""
配置管理 - YAML 运行配置、命令行覆盖、字段校验与解析后配置的回写
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .dataset import MaskSpec
from .errors import ConfigError
from .keyframe_codec import KeyframeCodecConfig
from .model import ModelConfig
from .run_store import atomic_write_text
from .train import TrainConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "DNERV_THREADS"

DEFAULT_CONFIG: Dict[str, Any] = {
    "model": {
        "variant": "dnerv",
        "stage_upscales": [2, 2, 2],
        "stage_channels": [32, 24, 16],
        "clip_len": 8,
        "pe_base": 1.25,
        "pe_levels": 12,
        "input_size": [32, 40],
        "flow_hidden": 16,
        "refine_hidden": 16,
        "nerv_hidden": 64,
        "nerv_stem_channels": 32,
        "use_flow": True,
        "use_saf": True,
        "use_gtmlp": True,
        "copy_keyframes": False,
    },
    "train": {
        "lr_peak": 5e-4,
        "batch_size": 2,
        "epochs": 10,
        "warmup_epochs": 2,
        "alpha": 0.7,
        "weight_decay": 0.01,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "seed": 0,
        "codec_aware_keyframes": True,
    },
    "compress": {
        "bits": 8,
        "kf_codec": "raw",
        "quality": 75,
    },
    "dataset": {
        "path": None,
        "synth": {
            "n_videos": 2,
            "n_classes": 1,
            "frames": 17,
            "seed": 0,
        },
    },
    "mask": {
        "boxes_per_frame": 5,
        "box_width": 8,
        "seed": 0,
    },
    "run": {
        "root": "runs",
        "name": "default",
    },
    "sweep": {
        "variants": ["dnerv"],
        "widths": [1.0],
        "bits": [8],
        "qualities": [75],
        "match_total_size": False,
    },
}


def worker_count() -> int:
    """线程池大小，DNERV_THREADS 设置时以它为上限"""
    available = os.cpu_count() or 1
    value = os.environ.get(THREADS_ENV)
    if not value:
        return available
    try:
        limit = int(value)
    except ValueError as exc:
        raise ConfigError(THREADS_ENV, f"必须是正整数 (got {value!r})") from exc
    if limit < 1:
        raise ConfigError(THREADS_ENV, f"必须是正整数 (got {value!r})")
    return min(limit, available)


@dataclass
class CompressSettings:
    bits: int = 8
    kf_codec: str = "raw"
    quality: int = 75

    @property
    def codec_config(self) -> KeyframeCodecConfig:
        return KeyframeCodecConfig(codec=self.kf_codec, quality=self.quality)

    def validate(self) -> "CompressSettings":
        if not 1 <= self.bits <= 16:
            raise ConfigError("compress.bits", f"必须位于 1..16 (got {self.bits})")
        self.codec_config.validate()
        return self


@dataclass
class SynthSettings:
    n_videos: int = 2
    n_classes: int = 1
    frames: int = 17
    seed: int = 0


@dataclass
class DatasetSettings:
    path: Optional[str] = None
    synth: SynthSettings = field(default_factory=SynthSettings)

    def validate(self, need_path: bool = False) -> "DatasetSettings":
        if self.path is not None:
            if not Path(self.path).is_dir():
                raise ConfigError("dataset.path", f"数据集目录不存在: {self.path}")
        elif need_path:
            raise ConfigError("dataset.path", "未指定数据集目录")
        synth = self.synth
        for name in ("n_videos", "n_classes", "frames"):
            if getattr(synth, name) < 1:
                raise ConfigError(f"dataset.synth.{name}", f"必须 >= 1 (got {getattr(synth, name)})")
        return self


@dataclass
class RunSettings:
    root: str = "runs"
    name: str = "default"


@dataclass
class SweepSettings:
    variants: List[str] = field(default_factory=lambda: ["dnerv"])
    widths: List[float] = field(default_factory=lambda: [1.0])
    bits: List[int] = field(default_factory=lambda: [8])
    qualities: List[int] = field(default_factory=lambda: [75])
    match_total_size: bool = False

    def validate(self) -> "SweepSettings":
        for variant in self.variants:
            if variant not in ("dnerv", "nerv"):
                raise ConfigError("sweep.variants", f"未知的模型 {variant!r}")
        if any(w <= 0 for w in self.widths):
            raise ConfigError("sweep.widths", f"宽度倍数必须 > 0 (got {self.widths})")
        if any(not 1 <= b <= 16 for b in self.bits):
            raise ConfigError("sweep.bits", f"量化位数必须位于 1..16 (got {self.bits})")
        if any(not 1 <= q <= 100 for q in self.qualities):
            raise ConfigError("sweep.qualities", f"质量必须位于 1..100 (got {self.qualities})")
        if not (self.variants and self.widths and self.bits and self.qualities):
            raise ConfigError("sweep", "扫描列表不能为空")
        return self


@dataclass
class RunConfig:
    """一次运行的完整配置"""
    model: ModelConfig
    train: TrainConfig
    compress: CompressSettings
    dataset: DatasetSettings
    mask: MaskSpec
    run: RunSettings
    sweep: SweepSettings
    codec_aware_keyframes: bool = True


class ConfigManager:
    """运行配置管理器"""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.config_file = Path(config_file) if config_file else None
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        default_config = copy.deepcopy(DEFAULT_CONFIG)
        if self.config_file is None:
            return default_config
        if not self.config_file.exists():
            raise ConfigError("config", f"配置文件不存在: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"无法解析 {self.config_file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"{self.config_file} 顶层必须是映射")
        self._check_keys(default_config, loaded, "")
        return self._merge_config(default_config, loaded)

    def _check_keys(self, default: Dict[str, Any], loaded: Dict[str, Any], prefix: str) -> None:
        for key, value in loaded.items():
            path = f"{prefix}{key}"
            if key not in default:
                raise ConfigError(path, "未知的配置项")
            if isinstance(default[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(path, "必须是映射")
                self._check_keys(default[key], value, f"{path}.")

    def _merge_config(self, default: Dict[str, Any], loaded: Dict[str, Any]) -> Dict[str, Any]:
        for key, value in default.items():
            if key not in loaded:
                loaded[key] = value
            elif isinstance(value, dict) and isinstance(loaded[key], dict):
                loaded[key] = self._merge_config(value, loaded[key])
        return loaded

    def get(self, key_path: str, default: Any = None) -> Any:
        keys = key_path.split(".")
        value = self.config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value: Any) -> None:
        keys = key_path.split(".")
        node: Any = DEFAULT_CONFIG
        for key in keys:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(key_path, "未知的配置项")
            node = node[key]
        config = self.config
        for key in keys[:-1]:
            config = config.setdefault(key, {})
        config[keys[-1]] = value

    def apply_override(self, assignment: str) -> None:
        """处理 --set key.path=value，值按 YAML 标量解析"""
        if "=" not in assignment:
            raise ConfigError(assignment, "覆盖项格式应为 key.path=value")
        key_path, raw = assignment.split("=", 1)
        try:
            value = yaml.safe_load(raw) if raw else None
        except yaml.YAMLError as exc:
            raise ConfigError(key_path.strip(), f"无法解析值 {raw!r}: {exc}") from exc
        self.set(key_path.strip(), value)

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        for key_path, value in overrides.items():
            if value is not None:
                self.set(key_path, value)

    def _section(self, name: str, cls, section: Optional[Dict[str, Any]] = None):
        values = dict(section if section is not None else self.config[name])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(name, f"配置项不合法: {exc}") from exc

    @staticmethod
    def _typed(path: str, value: Any, kind):
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(path, f"必须是布尔值 (got {value!r})")
            return value
        if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(path, f"必须是整数 (got {value!r})")
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(path, f"必须是数值 (got {value!r})")
            return float(value)
        return value

    def resolve(self) -> RunConfig:
        """校验全部字段并返回类型化的 RunConfig"""
        model_section = dict(self.config["model"])
        for name in ("clip_len", "pe_levels", "flow_hidden", "refine_hidden", "nerv_hidden", "nerv_stem_channels"):
            self._typed(f"model.{name}", model_section[name], int)
        for name in ("use_flow", "use_saf", "use_gtmlp", "copy_keyframes"):
            self._typed(f"model.{name}", model_section[name], bool)
        model_section["pe_base"] = self._typed("model.pe_base", model_section["pe_base"], float)
        for name in ("stage_upscales", "stage_channels", "input_size"):
            values = model_section[name]
            if not isinstance(values, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
                raise ConfigError(f"model.{name}", f"必须是整数列表 (got {values!r})")
        model = ModelConfig.from_dict(model_section).validate()

        train_section = dict(self.config["train"])
        codec_aware = self._typed("train.codec_aware_keyframes", train_section.pop("codec_aware_keyframes"), bool)
        for name in ("batch_size", "epochs", "warmup_epochs", "seed"):
            self._typed(f"train.{name}", train_section[name], int)
        for name in ("lr_peak", "alpha", "weight_decay", "eps"):
            train_section[name] = self._typed(f"train.{name}", train_section[name], float)
        betas = train_section["betas"]
        if not isinstance(betas, list) or len(betas) != 2:
            raise ConfigError("train.betas", f"必须是两个数的列表 (got {betas!r})")
        train_section["betas"] = tuple(self._typed("train.betas", b, float) for b in betas)
        train = self._section("train", TrainConfig, train_section).validate()

        compress_section = dict(self.config["compress"])
        self._typed("compress.bits", compress_section["bits"], int)
        self._typed("compress.quality", compress_section["quality"], int)
        compress = self._section("compress", CompressSettings, compress_section).validate()

        dataset_section = dict(self.config["dataset"])
        synth_section = dict(dataset_section.pop("synth"))
        for name in ("n_videos", "n_classes", "frames", "seed"):
            self._typed(f"dataset.synth.{name}", synth_section[name], int)
        if dataset_section["path"] is not None:
            dataset_section["path"] = str(dataset_section["path"])
        dataset = DatasetSettings(path=dataset_section["path"], synth=SynthSettings(**synth_section)).validate()

        mask_section = dict(self.config["mask"])
        for name in ("boxes_per_frame", "box_width", "seed"):
            self._typed(f"mask.{name}", mask_section[name], int)
        mask = self._section("mask", MaskSpec, mask_section).validate(tuple(model.input_size))

        run = self._section("run", RunSettings)
        if not run.name or "/" in str(run.name):
            raise ConfigError("run.name", f"必须是非空的目录名 (got {run.name!r})")

        sweep_section = dict(self.config["sweep"])
        for name in ("variants", "widths", "bits", "qualities"):
            if not isinstance(sweep_section[name], list):
                sweep_section[name] = [sweep_section[name]]
        sweep_section["widths"] = [self._typed("sweep.widths", w, float) for w in sweep_section["widths"]]
        sweep = self._section("sweep", SweepSettings, sweep_section).validate()

        return RunConfig(
            model=model,
            train=train,
            compress=compress,
            dataset=dataset,
            mask=mask,
            run=run,
            sweep=sweep,
            codec_aware_keyframes=codec_aware,
        )

    def export_config(self, file_path: Union[str, Path]) -> Path:
        """写出完整配置，可直接作为 --config 复现本次运行"""
        text = yaml.safe_dump(self.config, sort_keys=True, allow_unicode=True, default_flow_style=False)
        path = atomic_write_text(file_path, text)
        logger.debug("已写出解析后的配置 %s", path)
        return path

    def reset_to_defaults(self) -> None:
        self.config = copy.deepcopy(DEFAULT_CONFIG)
