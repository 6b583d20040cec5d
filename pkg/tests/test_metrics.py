import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from qtune.metrics import batch_psnr, finite_mean, luma, psnr, ssim

from oracles import psnr_ref


def _pair(seed, shape=(24, 24, 3)):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, shape).astype(np.uint8), rng.integers(0, 256, shape).astype(np.uint8)


class TestPsnr:
    def test_identical_is_inf(self):
        a, _ = _pair(0)
        assert psnr(a, a) == math.inf

    def test_unit_mse(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-12)
        assert psnr(a, a + 1) == pytest.approx(48.1308, abs=1e-4)

    def test_matches_reference(self):
        a, b = _pair(1)
        assert psnr(a, b) == pytest.approx(psnr_ref(a, b), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 255, (32, 32, 3))
        noise = rng.normal(size=img.shape)
        values = [psnr(img, img + s * noise) for s in (1.0, 4.0, 16.0)]
        assert values[0] > values[1] > values[2]

    def test_finite_mean_caps_inf(self):
        assert finite_mean(np.array([math.inf, 30.0])) == 65.0
        assert math.isnan(finite_mean(np.array([])))

    def test_batch(self):
        a, b = _pair(3, (2, 8, 8, 3))
        np.testing.assert_allclose(batch_psnr(a, b), [psnr(a[0], b[0]), psnr(a[1], b[1])])


class TestSsim:
    def test_identical(self):
        a, _ = _pair(4)
        assert ssim(a, a) == 1.0

    def test_constant_extremes(self):
        # closed form for two constants: (2*0*255 + c1) / (0 + 255^2 + c1) with zero variances
        c1 = (0.01 * 255) ** 2
        expected = c1 / (255**2 + c1)
        val = ssim(np.zeros((16, 16, 3)), np.full((16, 16, 3), 255.0))
        assert val == pytest.approx(expected, rel=1e-9)
        assert val <= 0.01

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))

    def test_luma_weights(self):
        assert luma(np.array([[[255.0, 255.0, 255.0]]]))[0, 0] == pytest.approx(255.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_close_to_scikit_image(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 255, (48, 48, 3))
        b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
        ref = structural_similarity(luma(a), luma(b), data_range=255, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False)
        # scikit-image averages only the interior; ours averages all pixels with reflected borders
        assert ssim(a, b) == pytest.approx(ref, abs=0.02)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        a, b = _pair(seed, (16, 16, 3))
        s = ssim(a, b)
        assert -1.0 <= s <= 1.0
        assert s == pytest.approx(ssim(b, a), abs=1e-12)
        assert s < 1.0

    def test_bounded_on_many_pairs(self):
        rng = np.random.default_rng(7)
        vals = []
        for _ in range(1000):
            a = rng.integers(0, 256, (8, 8, 3))
            b = rng.integers(0, 256, (8, 8, 3)) if rng.random() < 0.5 else 255 - a
            vals.append(ssim(a, b))
        vals = np.array(vals)
        assert np.all((vals >= -1.0) & (vals <= 1.0))
