import logging

import numpy as np
import pytest

from core.dataset import (
    ClipBatch,
    Dataset,
    MaskSpec,
    Video,
    apply_masks,
    build_clips,
    clip_times,
    dataset_clips,
    frame_mask,
    frame_table,
    from_uint8,
    global_times,
    load_dataset,
    load_frame,
    make_clip_batch,
    raw_keyframes,
    retained_length,
    save_dataset,
    save_frame,
    synth_corpus,
    to_uint8,
)
from core.errors import ConfigError, DatasetError


class TestClips:
    def test_seventeen_frames_give_two_clips(self):
        records = build_clips(17, 8)
        assert [r.start for r in records] == [0, 8]
        assert [(r.start, r.end) for r in records] == [(0, 8), (8, 16)]

    def test_minimal_video(self):
        assert len(build_clips(9, 8)) == 1

    def test_truncation_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            records = build_clips(12, 8)
        assert len(records) == 1
        assert retained_length(12, 8) == 9
        assert "9..11" in caplog.text

    def test_too_short(self):
        with pytest.raises(DatasetError):
            build_clips(8, 8)

    def test_every_retained_frame_covered_once(self):
        records = build_clips(25, 4)
        covered = [i for r in records for i in r.frame_indices()] + [records[-1].end]
        assert covered == list(range(retained_length(25, 4)))
        for left, right in zip(records, records[1:]):
            assert left.end == right.start

    def test_clip_times(self):
        np.testing.assert_array_equal(clip_times(4), [0.0, 0.25, 0.5, 0.75])

    def test_global_times(self):
        np.testing.assert_array_equal(global_times(5), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_frame_table_concatenates_videos(self, tiny_dataset):
        table = frame_table(tiny_dataset, 2)
        assert len(table) == 10
        assert table[5] == (1, 0)


class TestBatch:
    def test_batch_layout(self, tiny_dataset):
        records = dataset_clips(tiny_dataset, 2)
        batch = make_clip_batch(tiny_dataset, records[:3])
        assert isinstance(batch, ClipBatch)
        assert batch.frames.shape == (3, 3, 16, 16, 2)
        assert batch.keyframes[0].shape == (3, 3, 16, 16)
        np.testing.assert_array_equal(batch.keyframes[1][0], tiny_dataset.videos[0].frames[2])
        np.testing.assert_array_equal(batch.frames[1, ..., 0], tiny_dataset.videos[0].frames[2])
        assert batch.video_ids == ["synth_000", "synth_000", "synth_001"]

    def test_keyframe_lookup_used(self, tiny_dataset):
        records = dataset_clips(tiny_dataset, 2)
        lookup = {key: np.zeros_like(image) for key, image in raw_keyframes(tiny_dataset, 2).items()}
        batch = make_clip_batch(tiny_dataset, records[:1], lookup)
        assert not batch.keyframes[0].any()


class TestMasks:
    def test_zero_boxes_is_all_ones(self):
        assert frame_mask(MaskSpec(boxes_per_frame=0), 16, 16, 0, 0).all()

    def test_single_box_area(self):
        mask = frame_mask(MaskSpec(boxes_per_frame=1, box_width=50), 100, 100, 0, 0)
        assert (mask == 0).mean() == pytest.approx(0.25)

    def test_deterministic(self):
        spec = MaskSpec(boxes_per_frame=5, box_width=8, seed=4)
        np.testing.assert_array_equal(frame_mask(spec, 32, 40, 1, 7), frame_mask(spec, 32, 40, 1, 7))

    def test_box_wider_than_frame(self):
        with pytest.raises(ConfigError, match="mask.box_width"):
            frame_mask(MaskSpec(box_width=20), 16, 16, 0, 0)

    def test_masked_fraction_matches_inclusion_exclusion(self):
        height, width, side, boxes = 32, 40, 8, 5

        def cover(size):
            tops = np.arange(size - side + 1)
            pixels = np.arange(size)[:, None]
            return ((pixels >= tops) & (pixels < tops + side)).mean(axis=1)

        single = cover(height)[:, None] * cover(width)[None, :]
        expected = float(np.mean(1.0 - (1.0 - single) ** boxes))
        measured = np.mean([
            (frame_mask(MaskSpec(boxes, side, seed), height, width, 0, 0) == 0).mean() for seed in range(1000)
        ])
        assert measured == pytest.approx(expected, abs=0.01)

    def test_apply_masks_masks_keyframes(self, tiny_dataset):
        spec = MaskSpec(boxes_per_frame=2, box_width=4, seed=1)
        batch = apply_masks(make_clip_batch(tiny_dataset, dataset_clips(tiny_dataset, 2)[:2]), spec)
        assert batch.masks.shape == (2, 1, 16, 16, 2)
        assert set(np.unique(batch.masks)) <= {0.0, 1.0}
        hole = frame_mask(spec, 16, 16, 0, 0) == 0
        assert not batch.keyframes[0][0][:, hole].any()
        np.testing.assert_array_equal(batch.masks[0, 0, :, :, 0], frame_mask(spec, 16, 16, 0, 0))


class TestSynth:
    def test_deterministic(self):
        a = synth_corpus(2, 2, 5, (16, 16), seed=7)
        b = synth_corpus(2, 2, 5, (16, 16), seed=7)
        for va, vb in zip(a.videos, b.videos):
            np.testing.assert_array_equal(va.frames, vb.frames)

    def test_values_in_unit_range_and_on_8bit_grid(self, tiny_dataset):
        for video in tiny_dataset.videos:
            assert video.frames.min() >= 0.0 and video.frames.max() <= 1.0
            np.testing.assert_array_equal(from_uint8(to_uint8(video.frames)), video.frames)

    def test_class_assignment(self):
        corpus = synth_corpus(4, 2, 3, (8, 8))
        assert [v.class_id for v in corpus.videos] == [0, 1, 0, 1]
        assert corpus.video_ids() == ["synth_000", "synth_001", "synth_002", "synth_003"]


class TestFiles:
    def test_ppm_roundtrip(self, tmp_path, tiny_dataset):
        frame = tiny_dataset.videos[0].frames[0]
        path = save_frame(tmp_path / "frame_00000.ppm", frame)
        assert path.stat().st_size == len(b"P6\n16 16\n255\n") + 3 * 16 * 16
        np.testing.assert_array_equal(load_frame(path), frame)

    def test_dataset_roundtrip(self, tmp_path, tiny_dataset):
        save_dataset(tiny_dataset, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        assert loaded.video_ids() == tiny_dataset.video_ids()
        for a, b in zip(loaded.videos, tiny_dataset.videos):
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_missing_directory_named(self, tmp_path):
        with pytest.raises(DatasetError, match="nowhere"):
            load_dataset(tmp_path / "nowhere")

    def test_mixed_sizes_rejected(self):
        dataset = Dataset(videos=[
            Video("a", np.zeros((3, 3, 8, 8), dtype=np.float32)),
            Video("b", np.zeros((3, 3, 8, 16), dtype=np.float32)),
        ])
        with pytest.raises(DatasetError):
            dataset.frame_size
