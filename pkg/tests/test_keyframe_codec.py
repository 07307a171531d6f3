import numpy as np
import pytest

from core.dataset import from_uint8, synth_corpus
from core.errors import CodecError, ConfigError
from core.keyframe_codec import (
    CODEC_IDS,
    Dct8Codec,
    KeyframeCodecConfig,
    KeyframeCodecManager,
    RawCodec,
    keyframe_decode,
    keyframe_encode,
    quant_table,
)
from core.metrics import psnr


@pytest.fixture
def frame():
    return synth_corpus(1, 1, 1, (32, 40), seed=3).videos[0].frames[0]


def test_raw_is_bit_exact(frame):
    codec = RawCodec()
    payload = codec.encode(frame)
    assert len(payload) == 4 + 3 * 32 * 40
    np.testing.assert_array_equal(codec.decode(payload), frame)


def test_raw_length_checked(frame):
    with pytest.raises(CodecError):
        RawCodec().decode(RawCodec().encode(frame)[:-1])


def test_dct8_constant_image_is_exact():
    image = from_uint8(np.full((3, 32, 32), 100, dtype=np.uint8))
    codec = Dct8Codec(quality=50)
    payload = codec.encode(image)
    np.testing.assert_array_equal(codec.decode(payload), image)
    assert len(payload) < len(RawCodec().encode(image))


def test_dct8_handles_non_multiple_of_eight():
    image = synth_corpus(1, 1, 1, (12, 20), seed=1).videos[0].frames[0]
    decoded = Dct8Codec(90).roundtrip(image)
    assert decoded.shape == image.shape
    assert psnr(decoded, image) > 25.0


def test_quality_is_monotone(frame):
    scores = [psnr(Dct8Codec(q).roundtrip(frame), frame) for q in (30, 60, 90)]
    assert scores[0] <= scores[1] <= scores[2]


def test_quality_shrinks_payload(frame):
    sizes = [len(Dct8Codec(q).encode(frame)) for q in (30, 90)]
    assert sizes[0] < sizes[1]


def test_quant_table():
    table = quant_table(50)
    assert table[0, 0] == 8.0
    assert table[0, 1] == 11.0
    assert quant_table(100).max() == 1.0


def test_decode_reads_quality_from_payload(frame):
    payload = keyframe_encode(frame, KeyframeCodecConfig("dct8", 40))
    np.testing.assert_array_equal(keyframe_decode(payload, CODEC_IDS["dct8"]), Dct8Codec(40).roundtrip(frame))


def test_truncated_dct8_payload(frame):
    payload = Dct8Codec(75).encode(frame)
    with pytest.raises(CodecError):
        Dct8Codec(75).decode(payload[: len(payload) // 2])


def test_unknown_codec_id():
    with pytest.raises(CodecError):
        KeyframeCodecManager().get_codec(9)


def test_config_validation():
    with pytest.raises(ConfigError, match="compress.kf_codec"):
        KeyframeCodecConfig("jpeg").validate()
    with pytest.raises(ConfigError, match="compress.quality"):
        KeyframeCodecConfig("dct8", 0).validate()


def test_manager_caches_instances():
    manager = KeyframeCodecManager()
    assert manager.get_codec(CODEC_IDS["dct8"], 60) is manager.get_codec(CODEC_IDS["dct8"], 60)
    assert manager.get_codec(CODEC_IDS["dct8"], 60) is not manager.get_codec(CODEC_IDS["dct8"], 70)
    assert [info.name for info in manager.get_available_codecs()] == ["raw", "dct8"]
    manager.clear_cache()
    assert not manager._codecs


def test_image_shape_checked():
    with pytest.raises(CodecError):
        RawCodec().encode(np.zeros((4, 8, 8)))


@pytest.mark.parametrize("quality", [0, 101, 255])
def test_corrupt_quality_header(frame, quality):
    payload = bytearray(Dct8Codec(75).encode(frame))
    payload[4] = quality
    with pytest.raises(CodecError, match="quality"):
        keyframe_decode(bytes(payload), CODEC_IDS["dct8"])


def test_zero_size_header(frame):
    payload = bytearray(Dct8Codec(75).encode(frame))
    payload[0:2] = b"\x00\x00"
    with pytest.raises(CodecError):
        Dct8Codec(75).decode(bytes(payload))


def test_quant_table_rejects_quality_out_of_range():
    with pytest.raises(CodecError):
        quant_table(0)
