import numpy as np
import pytest

from pyrsplat import metrics

from conftest import rel_err


class TestSsim:
    def test_self_similarity(self, rng):
        img = rng.uniform(0, 1, (24, 30, 3))
        assert metrics.compute_ssim(img, img) == pytest.approx(1.0)

    def test_symmetry(self, rng):
        a = rng.uniform(0, 1, (20, 20, 3))
        b = rng.uniform(0, 1, (20, 20, 3))
        assert metrics.compute_ssim(a, b) == pytest.approx(
            metrics.compute_ssim(b, a), abs=1e-12
        )

    def test_matches_reference_implementation(self, rng):
        skimage = pytest.importorskip("skimage.metrics")
        a = rng.uniform(0, 1, (32, 40, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ours = metrics.compute_ssim(a, b)
        theirs = skimage.structural_similarity(
            a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False,
        )
        assert abs(ours - theirs) < 1e-4

    def test_too_small_raises(self, rng):
        img = rng.uniform(0, 1, (8, 8, 3))
        with pytest.raises(ValueError):
            metrics.compute_ssim(img, img)

    def test_backward_matches_fd(self, rng):
        a = rng.uniform(0, 1, (14, 13, 3))
        b = rng.uniform(0, 1, (14, 13, 3))
        value, grad = metrics.ssim_backward(a, b)
        assert value == pytest.approx(metrics.compute_ssim(a, b))
        eps = 1e-6
        check = np.random.default_rng(0)
        flat = b.reshape(-1)
        gflat = grad.reshape(-1)
        for i in check.choice(flat.size, size=60, replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = metrics.compute_ssim(a, b)
            flat[i] = old - eps
            down = metrics.compute_ssim(a, b)
            flat[i] = old
            fd = (up - down) / (2 * eps)
            assert abs(gflat[i] - fd) / max(abs(fd), 1e-4) < 1e-4


class TestPsnr:
    def test_identical_capped(self, rng):
        img = rng.uniform(0, 1, (8, 8, 3))
        assert metrics.compute_psnr(img, img) == 100.0

    def test_closed_form_20db(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        assert metrics.compute_psnr(a, b) == pytest.approx(20.0)

    def test_constant_half(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.5)
        assert metrics.compute_psnr(a, b) == pytest.approx(6.0206, abs=1e-4)


class TestLoss:
    def test_perfect_reconstruction(self, rng):
        img = rng.uniform(0, 1, (16, 16, 3))
        assert metrics.loss(img, img, 0.8) == pytest.approx(0.0)

    def test_pure_mse(self, rng):
        a = rng.uniform(0, 1, (6, 6, 3))
        b = rng.uniform(0, 1, (6, 6, 3))
        assert metrics.loss(a, b, 1.0) == pytest.approx(float(np.mean((a - b) ** 2)))

    def test_constant_images_vs_reference(self):
        skimage = pytest.importorskip("skimage.metrics")
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        ref_ssim = skimage.structural_similarity(
            a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False,
        )
        lam = 0.8
        expected = lam * 1.0 + (1 - lam) * (1.0 - ref_ssim)
        assert metrics.loss(a, b, lam) == pytest.approx(expected, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            metrics.loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_backward_matches_fd(self, rng):
        a = rng.uniform(0.1, 0.9, (13, 12, 3))
        b = rng.uniform(0.1, 0.9, (13, 12, 3))
        value, grad = metrics.loss_backward(a, b, 0.8)
        assert value == pytest.approx(metrics.loss(a, b, 0.8))
        eps = 1e-6
        check = np.random.default_rng(1)
        flat = b.reshape(-1)
        gflat = grad.reshape(-1)
        for i in check.choice(flat.size, size=50, replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = metrics.loss(a, b, 0.8)
            flat[i] = old - eps
            down = metrics.loss(a, b, 0.8)
            flat[i] = old
            fd = (up - down) / (2 * eps)
            assert abs(gflat[i] - fd) / max(abs(fd), 1e-5) < 1e-4
