import logging

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from errors import DegenerateMapError, DimensionError, UndefinedCorrelationError
from metrics import mse, pcc, report, ssim, sum_normalize


def windowed_ssim(a, b, window, data_range, k1=0.01, k2=0.03):
    """Mean SSIM over every fully contained uniform window, population statistics"""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window)).reshape(-1, window * window)
    wb = sliding_window_view(b, (window, window)).reshape(-1, window * window)
    mu_a, mu_b = wa.mean(axis=1), wb.mean(axis=1)
    var_a = (wa ** 2).mean(axis=1) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=1) - mu_b ** 2
    cov = (wa * wb).mean(axis=1) - mu_a * mu_b
    values = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(values.mean())


class TestMse:
    def test_identical_is_zero(self, rng):
        a = rng.normal(size=10)
        assert mse(a, a) == 0.0

    def test_unit_offset(self):
        assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0

    def test_hand_computed(self):
        assert mse([1.0, 2.0, 3.0], [1.0, 0.0, 6.0]) == pytest.approx((0 + 4 + 9) / 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.zeros(3), np.zeros(4))


class TestPcc:
    def test_positive_affine(self, rng):
        a = rng.normal(size=20)
        assert pcc(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-12)

    def test_negation(self, rng):
        a = rng.normal(size=20)
        assert pcc(a, -a) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_input_is_undefined(self, rng):
        with pytest.raises(UndefinedCorrelationError):
            pcc(np.full(5, 0.2), rng.normal(size=5))

    def test_symmetric_and_bounded(self, rng):
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert pcc(a, b) == pytest.approx(pcc(b, a))
        assert -1.0 <= pcc(a, b) <= 1.0

    def test_invariant_to_positive_affine_maps(self, rng):
        a, b = rng.normal(size=30), rng.normal(size=30)
        assert pcc(5 * a - 1, 0.5 * b + 7) == pytest.approx(pcc(a, b), abs=1e-12)


class TestSsim:
    def test_identical_images(self, rng):
        a = rng.uniform(0, 1, size=(8, 8))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_patches_closed_form(self):
        c1 = (0.01 * 1.0) ** 2
        value = ssim(np.full((8, 8), 0.2), np.full((8, 8), 0.6))
        assert value == pytest.approx((2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1), rel=1e-6)

    def test_matches_sliding_window_mean(self, rng):
        a = rng.uniform(0, 1, size=(10, 9))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        assert ssim(a, b, window=5) == pytest.approx(windowed_ssim(a, b, 5, 1.0), abs=1e-10)

    def test_flat_vectors_use_square_grid(self, rng):
        a = rng.uniform(0, 1, size=64)
        b = rng.uniform(0, 1, size=64)
        assert ssim(a, b) == pytest.approx(ssim(a.reshape(8, 8), b.reshape(8, 8)))

    def test_window_larger_than_grid(self, rng):
        a = rng.uniform(0, 1, size=(8, 8))
        with pytest.raises(DimensionError):
            ssim(a, a, window=9)

    def test_even_window(self, rng):
        a = rng.uniform(0, 1, size=(8, 8))
        with pytest.raises(ValueError):
            ssim(a, a, window=4)


def test_sum_normalize():
    np.testing.assert_allclose(sum_normalize([1.0, 3.0]), [0.25, 0.75])
    with pytest.raises(DegenerateMapError):
        sum_normalize([1.0, -1.0])
    with pytest.raises(DegenerateMapError):
        sum_normalize(np.zeros(3))


class TestReport:
    def test_identical_images(self, rng):
        x = rng.uniform(0, 1, size=64)
        result = report(x, x, kind="image")
        assert result.ssim == pytest.approx(1.0, abs=1e-12)
        assert result.pcc == 1.0
        assert result.mse == 0.0
        assert result.config["data_range"] == 1.0

    def test_identical_constant_maps(self):
        result = report(np.ones(16), np.ones(16))
        assert result.pcc == 1.0
        assert result.mse == 0.0

    def test_maps_are_sum_normalized(self, rng):
        a = rng.uniform(0.1, 1, size=16)
        scaled = report(a, 10 * a)
        assert scaled.mse == pytest.approx(0.0, abs=1e-30)
        assert scaled.pcc == pytest.approx(1.0)

    def test_anticorrelated_maps_flagged(self):
        a = np.arange(1.0, 17.0)
        result = report(a, a[::-1])
        assert result.pcc == pytest.approx(-1.0)
        assert result.pcc_negative
        assert result.to_dict()["pcc_negative"] is True

    def test_window_shrinks_to_grid(self, rng):
        result = report(rng.uniform(0.1, 1, size=16), rng.uniform(0.1, 1, size=16))
        assert result.config["window"] == 3
        assert result.config["grid"] == [4, 4]
        assert result.ssim is not None

    def test_tiny_grid_leaves_ssim_empty(self, caplog):
        with caplog.at_level(logging.WARNING):
            result = report([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0])
        assert result.ssim is None
        assert "too small" in caplog.text

    def test_image_range_checked(self):
        with pytest.raises(ValueError):
            report(np.full(16, 1.5), np.full(16, 0.5), kind="image")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            report(np.ones(16), np.ones(16), kind="volume")

    def test_negative_map_rejected(self):
        with pytest.raises(DegenerateMapError):
            report(np.array([1.0, -1.0, 2.0, 2.0]), np.ones(4))

    def test_mse_triangle_inequality(self, rng):
        a, b, c = (rng.uniform(0, 1, size=16) for _ in range(3))
        ab = np.sqrt(report(a, b, kind="image").mse)
        bc = np.sqrt(report(b, c, kind="image").mse)
        ac = np.sqrt(report(a, c, kind="image").mse)
        assert ac <= ab + bc + 1e-12
