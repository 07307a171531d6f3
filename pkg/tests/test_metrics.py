import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from core.errors import MetricsError, ShapeError
from core.metrics import (
    RD_HEADER,
    RdPoint,
    average_per_video,
    check_coverage,
    masked_psnr,
    max_scales,
    ms_ssim,
    psnr,
    rd_point,
    read_rd_report,
    ssim,
    write_rd_report,
)
from core.tensor import gaussian_kernel


@pytest.fixture
def image(rng):
    """平滑图像加少量纹理"""
    y, x = np.mgrid[0:48, 0:48] / 48.0
    base = np.stack([0.5 + 0.3 * np.sin(4 * x + c) * np.cos(3 * y) for c in range(3)])
    return np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1)


class TestPsnr:
    def test_one_level_error(self):
        assert psnr(np.zeros((3, 4, 4)), np.full((3, 4, 4), 1 / 255)) == pytest.approx(48.1308, abs=1e-4)

    def test_full_scale_error(self):
        assert psnr(np.zeros(10), np.ones(10)) == pytest.approx(0.0)

    def test_identical_is_capped(self):
        assert psnr(np.ones(5), np.ones(5)) == 100.0

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros(3), np.zeros(4))

    def test_masked_psnr_ignores_visible_pixels(self):
        gt = np.zeros((3, 8, 8))
        pred = np.zeros((3, 8, 8))
        pred[:, :4] = 1.0
        mask = np.ones((1, 8, 8))
        mask[:, 4:, :] = 0.0
        assert masked_psnr(pred, gt, mask) == 100.0
        assert masked_psnr(pred, gt, np.ones((1, 8, 8))) == pytest.approx(psnr(pred, gt))


def _naive_ssim(a, b):
    window = np.outer(gaussian_kernel(11, 1.5), gaussian_kernel(11, 1.5))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for channel in range(a.shape[0]):
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                pa = a[channel, i:i + 11, j:j + 11]
                pb = b[channel, i:i + 11, j:j + 11]
                mu_a, mu_b = (window * pa).sum(), (window * pb).sum()
                var_a = (window * pa * pa).sum() - mu_a ** 2
                var_b = (window * pb * pb).sum() - mu_b ** 2
                cov = (window * pa * pb).sum() - mu_a * mu_b
                values.append(
                    (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
                )
    return float(np.mean(values))


class TestSsim:
    def test_identical_is_one(self, image):
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_window_sum(self, rng):
        a = rng.uniform(0, 1, (3, 16, 18))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(_naive_ssim(a, b), abs=1e-10)

    def test_symmetric(self, image, rng):
        other = np.clip(image + 0.1 * rng.standard_normal(image.shape), 0, 1)
        assert ssim(image, other) == pytest.approx(ssim(other, image))

    def test_inverted_image_scores_low(self, image):
        assert ssim(image, 1.0 - image) < 0.5

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


class TestMsSsim:
    def test_identical_is_one(self, image):
        assert ms_ssim(image, image) == pytest.approx(1.0, abs=1e-9)

    def test_single_scale_is_ssim(self, image, rng):
        other = np.clip(image + 0.1 * rng.standard_normal(image.shape), 0, 1)
        assert ms_ssim(image, other, scales=1) == pytest.approx(ssim(image, other))

    def test_more_noise_scores_lower(self, image, rng):
        noise = rng.standard_normal(image.shape)
        scores = [ms_ssim(image, np.clip(image + s * noise, 0, 1)) for s in (0.02, 0.1, 0.3)]
        assert scores[0] > scores[1] > scores[2]

    def test_max_scales(self):
        assert max_scales(10, 100) == 0
        assert max_scales(11, 11) == 1
        assert max_scales(48, 48) == 3
        assert max_scales(176, 200) == 5

    def test_small_frames_warn_once(self, rng, caplog):
        a = rng.uniform(0, 1, (3, 23, 29))
        with caplog.at_level(logging.WARNING):
            ms_ssim(a, a)
            ms_ssim(a, a)
        assert sum("23x29" in record.getMessage() for record in caplog.records) <= 1

    def test_warns_once_across_threads(self, rng, caplog, monkeypatch):
        monkeypatch.setattr("core.metrics._warned_sizes", set())
        a = rng.uniform(0, 1, (3, 24, 31))
        with caplog.at_level(logging.WARNING):
            with ThreadPoolExecutor(max_workers=8) as pool:
                list(pool.map(lambda _: ms_ssim(a, a), range(16)))
        assert sum("24x31" in record.getMessage() for record in caplog.records) == 1


class TestRateDistortion:
    @pytest.mark.parametrize("value", [0.0, -0.5, float("nan"), float("inf")])
    def test_bpp_must_be_positive(self, value):
        with pytest.raises(MetricsError):
            RdPoint(value, 30.0, 0.9, "bad")

    def test_average_per_video_then_across(self):
        assert average_per_video({"a": [30.0], "b": [40.0]}) == pytest.approx(35.0)
        assert average_per_video({"a": [30.0, 30.0, 30.0], "b": [40.0]}) == pytest.approx(35.0)

    def test_empty_average(self):
        with pytest.raises(MetricsError):
            average_per_video({})

    def test_coverage_names_missing_frames(self):
        with pytest.raises(MetricsError, match=r"v1\[2..3\]"):
            check_coverage({"v1": 4}, {"v1": np.zeros((2, 3, 16, 16))})

    def test_rd_point(self, image):
        frames = np.stack([image, image])
        point = rd_point(0.5, {"v": frames}, {"v": frames}, label="x")
        assert (point.label, point.bpp, point.psnr_db) == ("x", 0.5, 100.0)
        assert point.ms_ssim == pytest.approx(1.0)

    def test_report_roundtrip_and_append(self, tmp_path):
        path = tmp_path / "report.csv"
        write_rd_report(path, [RdPoint(0.25, 31.5, 0.95, "a")], append=False)
        write_rd_report(path, [RdPoint(0.5, 33.25, 0.97, "b")])
        assert path.read_text().splitlines()[0] == ",".join(RD_HEADER)
        points = read_rd_report(path)
        assert [p.label for p in points] == ["a", "b"]
        assert points[1].psnr_db == pytest.approx(33.25)

    def test_row_formatting(self):
        assert RdPoint(0.1, 30.0, 0.9, "p").as_row() == ["p", "0.100000", "30.0000", "0.900000"]
