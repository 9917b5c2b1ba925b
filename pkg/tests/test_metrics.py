import numpy as np
import pytest

from tinker3d import metrics as mt
from tinker3d.embed_filter import ToyEmbedder


class TestPsnr:
    def test_identical_hits_cap(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert mt.psnr(a, a) == 99.0

    def test_uniform_offset_analytic(self):
        a = np.zeros((32, 32, 3))
        b = np.full_like(a, 10.0 / 255.0)
        assert mt.psnr(a, b) == pytest.approx(28.13, abs=0.01)

    def test_symmetry(self, rng):
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        assert mt.psnr(a, b) == mt.psnr(b, a)

    def test_monotone_in_noise_amplitude(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        noise = rng.standard_normal(a.shape)
        values = [mt.psnr(a, a + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_max_val_scaling(self, rng):
        a = rng.uniform(size=(8, 8)) * 255
        b = a + 10.0
        assert mt.psnr(a, b, max_val=255.0) == pytest.approx(28.13, abs=0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mt.psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identical_is_one(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert mt.ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_high_contrast_fixture(self):
        # frozen fixture: binary image vs its negative scores strongly negative
        fixture = (np.random.default_rng(3).uniform(size=(32, 32, 3)) > 0.5).astype(np.float64)
        assert mt.ssim(fixture, 1.0 - fixture) < 0.5

    def test_transpose_invariance(self, rng):
        a, b = rng.uniform(size=(20, 14)), rng.uniform(size=(20, 14))
        assert mt.ssim(a, b) == pytest.approx(mt.ssim(a.T, b.T), abs=1e-12)

    def test_grayscale_and_rgb_supported(self, rng):
        a = rng.uniform(size=(16, 16))
        assert -1.0 <= mt.ssim(a, a * 0.5) <= 1.0
        c = rng.uniform(size=(16, 16, 3))
        assert -1.0 <= mt.ssim(c, np.clip(c + 0.1, 0, 1)) <= 1.0

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            mt.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestSetConsistency:
    def test_identical_images(self, rng):
        img = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        emb = ToyEmbedder(seed=0, dimension=64)
        assert mt.set_consistency([img, img.copy(), img.copy()], emb) == pytest.approx(1.0, abs=1e-9)

    def test_two_images_single_pair(self, rng):
        from tinker3d.embed_filter import cosine

        emb = ToyEmbedder(seed=0, dimension=64)
        a = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        b = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        expected = cosine(emb.embed(a), emb.embed(b))
        assert mt.set_consistency([a, b], emb) == pytest.approx(expected, abs=1e-12)

    def test_permutation_invariance(self, rng):
        emb = ToyEmbedder(seed=0, dimension=64)
        imgs = [rng.uniform(size=(16, 16, 3)).astype(np.float32) for _ in range(4)]
        forward = mt.set_consistency(imgs, emb)
        assert mt.set_consistency(imgs[::-1], emb) == pytest.approx(forward, abs=1e-12)

    def test_needs_two_images(self, rng):
        with pytest.raises(ValueError):
            mt.set_consistency([rng.uniform(size=(8, 8, 3))], ToyEmbedder(seed=0, dimension=8))


class TestMetricReport:
    def test_mean_within_range(self):
        report = mt.MetricReport.from_values("psnr", "fixture", [10.0, 20.0, 30.0])
        assert min(report.values) <= report.mean <= max(report.values)
        assert report.mean == pytest.approx(20.0)

    def test_json_roundtrip(self, tmp_path):
        import json

        reports = [
            mt.MetricReport.from_values("psnr", "fx", [1.0, 2.0]),
            mt.MetricReport.from_values("ssim", "fx", [0.5]),
        ]
        mt.write_reports(tmp_path / "m.jsonl", reports)
        lines = (tmp_path / "m.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        parsed = json.loads(lines[0])
        assert parsed["metric"] == "psnr" and parsed["mean"] == 1.5
