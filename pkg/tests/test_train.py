import math

import numpy as np
import pytest

from core.checkpoint import checkpoint_to_bytes, load_checkpoint
from core.compress import CompressedBundle, compress_model, decompress_params
from core.dataset import MaskSpec, synth_corpus
from core.pipeline import inpaint_report
from core.errors import ConfigError, DatasetError, TrainingDivergedError
from core.model import ModelConfig, init_params
from core.run_store import RunStore, read_csv_rows
from core.tensor import Tensor
from core.train import (
    AdamWState,
    TrainConfig,
    adamw_step,
    composite_loss,
    eval_subset_psnr,
    lr_at,
    ssim_term,
    train_loop,
)


def _pair(rng, shape=(1, 3, 16, 16, 2)):
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


class TestLoss:
    def test_identical_inputs_give_zero(self, rng):
        pred, _ = _pair(rng)
        assert composite_loss(Tensor(pred), pred, alpha=0.7).item() <= 1e-9

    def test_alpha_zero_is_mean_absolute_error(self, rng):
        pred, gt = _pair(rng)
        assert composite_loss(Tensor(pred), gt, alpha=0.0).item() == pytest.approx(np.abs(pred - gt).mean())

    def test_constants(self):
        pred = np.full((1, 3, 16, 16, 2), 0.5)
        gt = np.full((1, 3, 16, 16, 2), 0.25)
        assert composite_loss(Tensor(pred), gt, alpha=0.0).item() == pytest.approx(0.25)

    def test_non_negative(self, rng):
        pred, gt = _pair(rng)
        assert composite_loss(Tensor(pred), gt, alpha=1.0).item() >= 0.0

    def test_shape_mismatch(self, rng):
        pred, _ = _pair(rng)
        with pytest.raises(ValueError):
            composite_loss(Tensor(pred), np.zeros((1, 3, 16, 16, 3)), alpha=0.5)

    def test_mask_hides_ground_truth(self, rng):
        pred, gt = _pair(rng)
        mask = np.ones((1, 1, 16, 16, 2))
        mask[..., 4:10, 3:9, :] = 0.0
        altered = gt.copy()
        altered[:, :, 4:10, 3:9, :] = rng.uniform(0, 1, altered[:, :, 4:10, 3:9, :].shape)
        first = composite_loss(Tensor(pred), gt, alpha=0.7, mask=mask).item()
        second = composite_loss(Tensor(pred), altered, alpha=0.7, mask=mask).item()
        assert first == second

    def test_masked_ssim_of_identical_is_one(self, rng):
        pred, _ = _pair(rng, (2, 3, 16, 16))
        mask = np.ones((2, 1, 16, 16))
        mask[:, :, 2:6, 2:6] = 0.0
        assert ssim_term(Tensor(pred), Tensor(pred), mask).item() == pytest.approx(1.0, abs=1e-9)

    def test_loss_gradient_flows(self, rng):
        pred, gt = _pair(rng)
        x = Tensor(pred, requires_grad=True)
        composite_loss(x, gt, alpha=0.7).backward()
        assert x.grad.shape == pred.shape and np.any(x.grad != 0)


class TestAdamW:
    @staticmethod
    def _params(config, seed=0):
        return init_params(config, seed=seed, dtype=np.float64)

    def test_zero_grads_without_decay_is_fixed_point(self, tiny_config):
        params = self._params(tiny_config)
        before = {n: t.data.copy() for n, t in params.items()}
        zeros = {n: np.zeros_like(t.data) for n, t in params.items()}
        adamw_step(params, zeros, AdamWState(), lr=1e-3, weight_decay=0.0)
        for name, tensor in params.items():
            np.testing.assert_array_equal(tensor.data, before[name])

    def test_zero_grads_with_decay_scales(self, tiny_config):
        params = self._params(tiny_config)
        before = {n: t.data.copy() for n, t in params.items()}
        zeros = {n: np.zeros_like(t.data) for n, t in params.items()}
        adamw_step(params, zeros, AdamWState(), lr=1e-2, weight_decay=0.1)
        for name, tensor in params.items():
            np.testing.assert_allclose(tensor.data, before[name] * (1.0 - 1e-3), rtol=1e-12)

    def test_first_step_is_sign_like(self, tiny_config, rng):
        params = self._params(tiny_config)
        before = {n: t.data.copy() for n, t in params.items()}
        grads = {n: rng.standard_normal(t.shape) for n, t in params.items()}
        adamw_step(params, grads, AdamWState(), lr=1e-3, eps=1e-8, weight_decay=0.0)
        for name, tensor in params.items():
            g = grads[name]
            np.testing.assert_allclose(tensor.data - before[name], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-6)

    def test_nan_names_parameter(self, tiny_config):
        params = self._params(tiny_config)
        name = next(iter(params))
        grads = {name: np.full(params[name].shape, np.nan)}
        with pytest.raises(TrainingDivergedError) as info:
            adamw_step(params, grads, AdamWState(), lr=1e-3)
        assert info.value.parameter == name


class TestSchedule:
    def test_warmup_endpoint(self):
        assert lr_at(10, 100, 10, 5e-4) == pytest.approx(5e-4)

    def test_final_step_near_zero(self):
        assert lr_at(99, 100, 10, 5e-4) < 5e-4 * (1 - math.cos(math.pi / 90))

    def test_halfway(self):
        assert lr_at(55, 100, 10, 5e-4) == pytest.approx(2.5e-4)

    def test_continuous_at_boundary(self):
        left = 5e-4 * 9.999999 / 10
        assert abs(lr_at(10, 100, 10, 5e-4) - left) < 1e-9

    def test_ramp_starts_at_zero(self):
        assert lr_at(0, 100, 10, 5e-4) == 0.0


class TestTrainConfig:
    def test_warmup_must_be_shorter(self):
        with pytest.raises(ConfigError, match="train.warmup_epochs"):
            TrainConfig(epochs=2, warmup_epochs=2).validate()

    def test_zero_epochs_allowed(self):
        TrainConfig(epochs=0, warmup_epochs=0).validate()

    def test_alpha_range(self):
        with pytest.raises(ConfigError, match="train.alpha"):
            TrainConfig(alpha=1.5).validate()


class TestTrainLoop:
    def test_zero_epochs_keeps_initialisation(self, tmp_path, tiny_dataset, tiny_config):
        store = RunStore(path=tmp_path / "run")
        result = train_loop(tiny_dataset, tiny_config, TrainConfig(epochs=0, warmup_epochs=0, seed=4), store=store)
        expected = checkpoint_to_bytes(init_params(tiny_config, seed=4))
        assert store.checkpoint_path.read_bytes() == expected
        assert result.history == []
        assert read_csv_rows(store.metrics_path) == []

    def test_one_row_per_epoch(self, tmp_path, tiny_dataset, tiny_config):
        store = RunStore(path=tmp_path / "run")
        config = TrainConfig(lr_peak=1e-3, batch_size=2, epochs=2, warmup_epochs=1)
        result = train_loop(tiny_dataset, tiny_config, config, store=store)
        rows = read_csv_rows(store.metrics_path)
        assert [row[0] for row in rows] == ["1", "2"]
        assert rows[-1][1] == "4"
        assert store.metrics_path.read_text().startswith("epoch,step,loss,psnr,lr\n")
        restored = load_checkpoint(store.checkpoint_path)
        for name in result.params:
            np.testing.assert_array_equal(restored[name].data, result.params[name].data)

    def test_deterministic(self, tmp_path, tiny_dataset, tiny_config, tiny_train_config):
        outputs = []
        for name in ("a", "b"):
            store = RunStore(path=tmp_path / name)
            train_loop(tiny_dataset, tiny_config, tiny_train_config, store=store)
            outputs.append((store.checkpoint_path.read_bytes(), store.metrics_path.read_bytes()))
        assert outputs[0] == outputs[1]

    def test_nerv_variant_trains(self, tiny_dataset, tiny_nerv_config, tiny_train_config):
        result = train_loop(tiny_dataset, tiny_nerv_config, tiny_train_config)
        assert len(result.history) == 1
        assert math.isfinite(float(result.history[0][2]))

    def test_masked_training_runs(self, tiny_dataset, tiny_config, tiny_train_config):
        spec = MaskSpec(boxes_per_frame=2, box_width=4, seed=0)
        result = train_loop(tiny_dataset, tiny_config, tiny_train_config, mask_spec=spec)
        assert len(result.history) == 1

    def test_frame_size_must_match(self, tiny_dataset, tiny_train_config):
        config = ModelConfig(stage_upscales=[2, 2], stage_channels=[4, 4], clip_len=2, input_size=(32, 32))
        with pytest.raises(DatasetError):
            train_loop(tiny_dataset, config, tiny_train_config)

    def test_nan_loss_aborts_and_keeps_checkpoint(self, tmp_path, tiny_config, tiny_train_config):
        dataset = synth_corpus(1, 1, 5, (16, 16))
        dataset.videos[0].frames[1] = np.nan
        store = RunStore(path=tmp_path / "run")
        with pytest.raises(TrainingDivergedError):
            train_loop(dataset, tiny_config, tiny_train_config, store=store)
        assert store.checkpoint_path.read_bytes() == checkpoint_to_bytes(init_params(tiny_config, seed=0))

    def test_eval_subset_psnr(self, constant_dataset, tiny_config):
        params = init_params(tiny_config)
        value = eval_subset_psnr(params, constant_dataset, batch_size=2)
        assert 0.0 < value < 100.0

    def test_loss_decreases_when_overfitting(self, tiny_dataset, tiny_config):
        config = TrainConfig(lr_peak=5e-3, batch_size=2, epochs=12, warmup_epochs=1, seed=0)
        history = train_loop(tiny_dataset, tiny_config, config).history
        losses = [float(row[2]) for row in history]
        scores = [float(row[3]) for row in history]
        assert losses[-1] < losses[0]
        assert scores[-1] > scores[0]

    def test_quantized_model_keeps_quality(self, tiny_dataset, tiny_config):
        config = TrainConfig(lr_peak=5e-3, batch_size=2, epochs=4, warmup_epochs=1, seed=0)
        params = train_loop(tiny_dataset, tiny_config, config).params
        bundle = CompressedBundle.from_bytes(compress_model(params, 8).to_bytes())
        restored = decompress_params(bundle)
        float_psnr = eval_subset_psnr(params, tiny_dataset, batch_size=2)
        assert eval_subset_psnr(restored, tiny_dataset, batch_size=2) >= float_psnr - 0.5


@pytest.mark.slow
def test_overfit_fixture_reaches_target(tmp_path):
    dataset = synth_corpus(2, 1, 33, (32, 40), seed=0)
    model = ModelConfig(stage_upscales=[2, 2, 2], clip_len=8, input_size=(32, 40))
    config = TrainConfig(lr_peak=5e-3, batch_size=2, epochs=400, warmup_epochs=20)
    result = train_loop(dataset, model, config, store=RunStore(path=tmp_path / "run"))
    assert float(result.history[-1][3]) >= 30.0


@pytest.mark.slow
def test_overfit_fixture_is_reproducible(tmp_path):
    dataset = synth_corpus(2, 1, 33, (32, 40), seed=0)
    model = ModelConfig(stage_upscales=[2, 2, 2], clip_len=8, input_size=(32, 40))
    config = TrainConfig(lr_peak=5e-3, batch_size=2, epochs=400, warmup_epochs=20)
    outputs = []
    for name in ("a", "b"):
        store = RunStore(path=tmp_path / name)
        result = train_loop(dataset, model, config, store=store)
        bundle = compress_model(result.params, 8)
        outputs.append((store.checkpoint_path.read_bytes(), store.metrics_path.read_bytes(), bundle.to_bytes()))
    assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_masked_training_beats_mean_fill():
    dataset = synth_corpus(1, 1, 33, (32, 40), seed=0)
    model = ModelConfig(stage_upscales=[2, 2, 2], clip_len=8, input_size=(32, 40))
    spec = MaskSpec(boxes_per_frame=5, box_width=8, seed=0)
    config = TrainConfig(lr_peak=5e-3, batch_size=2, epochs=400, warmup_epochs=20)
    result = train_loop(dataset, model, config, mask_spec=spec)
    report = inpaint_report(result.params, dataset, spec)
    assert report.model_psnr >= report.baseline_psnr + 2.0
