import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.dataset import Dataset, Video, synth_corpus
from core.model import ModelConfig
from core.train import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的训练验收测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时的训练验收测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """16x16 帧、两级上采样、片段长度 2 的小模型"""
    return ModelConfig(
        stage_upscales=[2, 2],
        stage_channels=[4, 4],
        clip_len=2,
        pe_levels=2,
        input_size=(16, 16),
        flow_hidden=2,
        refine_hidden=4,
        nerv_hidden=8,
        nerv_stem_channels=4,
    )


@pytest.fixture
def tiny_nerv_config(tiny_config):
    tiny_config.variant = "nerv"
    return tiny_config


@pytest.fixture
def tiny_train_config():
    return TrainConfig(lr_peak=1e-3, batch_size=2, epochs=1, warmup_epochs=0, seed=0)


@pytest.fixture
def tiny_dataset():
    """两个视频，各 5 帧，16x16"""
    return synth_corpus(n_videos=2, n_classes=1, frames=5, size=(16, 16), seed=0)


@pytest.fixture
def constant_dataset():
    frames = np.full((5, 3, 16, 16), 0.5, dtype=np.float32)
    return Dataset(videos=[Video(video_id="flat", frames=frames)])
