import struct

import numpy as np
import pytest

from core.compress import (
    MAGIC,
    CompressedBundle,
    bpp,
    compress_model,
    decompress,
    decompress_keyframes,
    decompress_params,
    dequantize,
    load_bundle,
    quantize,
    save_bundle,
)
from core.errors import BundleFormatError, InputRangeError
from core.keyframe_codec import KeyframeCodecConfig
from core.model import init_params
from core.pipeline import dataset_keyframes


class TestQuantize:
    def test_constant_tensor(self):
        q = quantize(np.full((4, 4), 0.3), bits=8)
        assert q.scale == 0.0
        assert not q.symbols.any()
        np.testing.assert_array_equal(dequantize(q).data, np.full((4, 4), 0.3))

    def test_grid_values_are_exact(self):
        values = np.array([0.0, 1.0, 2.0, 3.0])
        q = quantize(values, bits=2)
        assert q.scale == 1.0 and q.zero_point == 0.0
        np.testing.assert_array_equal(q.symbols, [0, 1, 2, 3])
        np.testing.assert_array_equal(dequantize(q).data, values)

    def test_error_bounded_by_half_step(self, rng):
        values = rng.uniform(-1.0, 1.0, 5000)
        values[[0, 1]] = [-1.0, 1.0]
        restored = dequantize(quantize(values, bits=8)).data
        assert np.max(np.abs(restored - values)) <= 1.0 / 255 + 1e-7

    def test_sixteen_bit_symbols(self, rng):
        q = quantize(rng.standard_normal(100), bits=16)
        assert q.symbols.dtype == np.uint16
        assert q.bytes_per_symbol == 2

    @pytest.mark.parametrize("bits", [0, 17])
    def test_bits_out_of_range(self, bits):
        with pytest.raises(InputRangeError):
            quantize(np.ones(3), bits=bits)

    def test_nan_rejected(self):
        with pytest.raises(InputRangeError):
            quantize(np.array([0.0, np.nan]))


def _bundle(config, dataset=None, bits=8, codec=None):
    params = init_params(config, seed=1)
    keyframes = dataset_keyframes(dataset, config.clip_len) if dataset is not None else None
    layout = {"frame_size": list(config.input_size), "videos": [{"id": "v", "frames": 5}]}
    return params, compress_model(params, bits, keyframes, codec, layout)


class TestBundle:
    def test_decompressed_params_match_quantizer(self, tiny_config):
        params, bundle = _bundle(tiny_config)
        restored = decompress_params(CompressedBundle.from_bytes(bundle.to_bytes()))
        assert list(restored) == list(params)
        assert restored.config == tiny_config
        for name in params:
            np.testing.assert_array_equal(restored[name].data, dequantize(quantize(params[name], 8)).data)

    def test_ledger_matches_file_size(self, tmp_path, tiny_config, tiny_dataset):
        _, bundle = _bundle(tiny_config, tiny_dataset)
        path = save_bundle(tmp_path / "b.dnvb", bundle)
        ledger = bundle.ledger()
        assert ledger.model_bytes + ledger.keyframe_bytes == path.stat().st_size == bundle.file_size
        assert ledger.keyframe_bytes > 4

    def test_bytes_are_deterministic(self, tiny_config, tiny_dataset):
        _, first = _bundle(tiny_config, tiny_dataset)
        _, second = _bundle(tiny_config, tiny_dataset)
        assert first.to_bytes() == second.to_bytes()

    def test_raw_keyframes_survive(self, tiny_config, tiny_dataset):
        _, bundle = _bundle(tiny_config, tiny_dataset)
        expected = dataset_keyframes(tiny_dataset, tiny_config.clip_len)
        params, decoded = decompress(CompressedBundle.from_bytes(bundle.to_bytes()))
        assert set(decoded) == set(expected)
        for key, image in expected.items():
            np.testing.assert_array_equal(decoded[key], image)

    def test_selected_keyframes_only(self, tiny_config, tiny_dataset):
        _, bundle = _bundle(tiny_config, tiny_dataset, codec=KeyframeCodecConfig("dct8", 80))
        decoded = decompress_keyframes(bundle, [("synth_001", 2)])
        assert list(decoded) == [("synth_001", 2)]

    def test_lower_bits_give_smaller_stream(self, tiny_config):
        _, eight = _bundle(tiny_config, bits=8)
        _, four = _bundle(tiny_config, bits=4)
        assert four.ledger().model_bytes < eight.ledger().model_bytes

    def test_total_pixels(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        assert bundle.total_pixels() == 5 * 16 * 16


class TestBundleErrors:
    def test_bad_magic(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        with pytest.raises(BundleFormatError) as info:
            CompressedBundle.from_bytes(b"NOPE!" + bundle.to_bytes()[len(MAGIC):])
        assert info.value.section == "header.magic"

    def test_unknown_version(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        data = bundle.to_bytes()
        patched = data[:len(MAGIC)] + struct.pack("<I", 2) + data[len(MAGIC) + 4:]
        with pytest.raises(BundleFormatError) as info:
            CompressedBundle.from_bytes(patched)
        assert info.value.section == "header.version"

    def test_truncated(self, tiny_config, tiny_dataset):
        _, bundle = _bundle(tiny_config, tiny_dataset)
        with pytest.raises(BundleFormatError):
            CompressedBundle.from_bytes(bundle.to_bytes()[:-10])

    def test_trailing_bytes(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        with pytest.raises(BundleFormatError, match="trailer"):
            CompressedBundle.from_bytes(bundle.to_bytes() + b"\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(BundleFormatError):
            load_bundle(tmp_path / "absent.dnvb")

    @pytest.mark.parametrize(
        "config",
        [[1, 2], {"bits": 8}, {"model": {}, "bits": 8, "clip_len": 2, "frame_size": [16], "videos": []}],
    )
    def test_malformed_config(self, tiny_config, config):
        _, bundle = _bundle(tiny_config)
        broken = CompressedBundle(config=config, tensors=bundle.tensors, stream=bundle.stream, keyframes=[])
        with pytest.raises(BundleFormatError) as info:
            CompressedBundle.from_bytes(broken.to_bytes())
        assert info.value.section == "config"

    def test_invalid_model_config(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        config = dict(bundle.config, model=dict(bundle.config["model"], variant="other"))
        broken = CompressedBundle(config=config, tensors=bundle.tensors, stream=bundle.stream, keyframes=[])
        with pytest.raises(BundleFormatError, match="model.variant"):
            decompress_params(CompressedBundle.from_bytes(broken.to_bytes()))


class TestBpp:
    def test_worked_example(self):
        assert bpp(50000, 640000) == pytest.approx(0.625)

    def test_uses_bundle_size(self, tiny_config):
        _, bundle = _bundle(tiny_config)
        assert bpp(bundle, 1280) == pytest.approx(8.0 * bundle.file_size / 1280)

    def test_zero_pixels_rejected(self):
        with pytest.raises(InputRangeError):
            bpp(10, 0)
