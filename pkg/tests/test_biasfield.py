"""Bias field estimation against phantoms with known injected fields."""

import numpy as np
import pytest

from neurofuse.biasfield import (
    BiasFieldModel,
    BiasFieldParams,
    DegenerateHistogram,
    EmptyMask,
    GridOutsideDomain,
    NonPositiveIntensity,
    _eval_dense,
    _axis_matrix,
    _refine,
    correct,
    estimate_bias,
    evaluate_field,
    otsu_threshold,
)
from neurofuse.volio import GridSpec, Volume3D

DIMS = (24, 28, 24)

FAST = BiasFieldParams(
    control_spacing=40.0, levels=4, iterations=50, convergence_tol=2e-4
)


def two_tissue_phantom(dims=DIMS, noise=0.0, seed=0):
    """Ellipsoid head: inner tissue 1.0, outer shell 0.6, background 0."""
    rng = np.random.default_rng(seed)
    c = (np.asarray(dims) - 1) / 2.0
    i, j, k = np.meshgrid(*[np.arange(d) for d in dims], indexing="ij")
    r = np.sqrt(
        ((i - c[0]) / (0.45 * dims[0])) ** 2
        + ((j - c[1]) / (0.45 * dims[1])) ** 2
        + ((k - c[2]) / (0.45 * dims[2])) ** 2
    )
    data = np.zeros(dims, np.float32)
    data[r <= 1.0] = 0.6
    data[r <= 0.7] = 1.0
    if noise > 0:
        inside = data > 0
        data[inside] += rng.normal(0, noise, int(inside.sum())).astype(np.float32)
        data[inside] = np.maximum(data[inside], 1e-3)
    mask = (data > 0).astype(np.float32)
    vol = Volume3D.from_array(data)
    return vol, vol.with_data(mask)


def injected_log_field(dims, amplitude=0.2):
    """Half-period sine bias along x, the classic smooth shading pattern."""
    x = np.arange(dims[0]) / (dims[0] - 1)
    return (amplitude * np.sin(np.pi * x))[:, None, None] * np.ones(dims)


def masked_rms(a, mask):
    return float(np.sqrt(np.mean(a[mask] ** 2)))


class TestSplineMachinery:
    def test_zero_coefficients_give_unit_field(self):
        grid = GridSpec.isotropic((10, 10, 10))
        model = BiasFieldModel(np.zeros((4, 4, 4)), (9.0, 9.0, 9.0), grid)
        field = evaluate_field(model, grid)
        np.testing.assert_allclose(field.data, 1.0, atol=1e-7)

    def test_single_coefficient_center_weight(self):
        # knot aligned with a voxel: center basis weight is 2/3
        grid = GridSpec.isotropic((17, 17, 17))
        coeff = np.zeros((7, 7, 7))  # 4 intervals/axis over 16 mm -> knots every 4 mm
        coeff[3, 3, 3] = 0.9  # control point at (8, 8, 8) mm
        model = BiasFieldModel(coeff, (4.0, 4.0, 4.0), grid)
        field = evaluate_field(model, grid)
        assert field.data[8, 8, 8] == pytest.approx(np.exp(0.9 * (2 / 3) ** 3), rel=1e-6)

    def test_partition_of_unity(self):
        grid = GridSpec.isotropic((13, 11, 9))
        coeff = np.ones((6, 5, 4))
        model = BiasFieldModel(coeff, (3.0, 2.5, 4.0), grid)
        field = evaluate_field(model, grid)
        np.testing.assert_allclose(field.data, np.e, rtol=1e-6)

    def test_refinement_is_exact(self):
        rng = np.random.default_rng(4)
        coeff = rng.standard_normal((6, 5, 7))
        fine = _refine(coeff)
        assert fine.shape == (9, 7, 11)
        axes_mm = [np.linspace(0, 10, 23), np.linspace(0, 8, 17), np.linspace(0, 12, 29)]
        coarse_mats = [
            _axis_matrix(axes_mm[a], [10, 8, 12][a], coeff.shape[a] - 3) for a in range(3)
        ]
        fine_mats = [
            _axis_matrix(axes_mm[a], [10, 8, 12][a], fine.shape[a] - 3) for a in range(3)
        ]
        np.testing.assert_allclose(
            _eval_dense(coeff, *coarse_mats), _eval_dense(fine, *fine_mats), atol=1e-10
        )

    def test_field_is_c2_smooth(self):
        rng = np.random.default_rng(8)
        grid = GridSpec.isotropic((33, 33, 33))
        coeff = rng.uniform(-0.3, 0.3, (7, 7, 7))
        model = BiasFieldModel(coeff, (8.0, 8.0, 8.0), grid)
        log_field = np.log(evaluate_field(model, grid).data.astype(np.float64))
        cmax = np.abs(coeff).max()
        s = 8.0  # control spacing in voxels
        bound = 8.0 * cmax / s**2
        for axis in range(3):
            second = np.abs(np.diff(log_field, n=2, axis=axis))
            assert second.max() <= bound

    def test_strictly_positive_field(self):
        rng = np.random.default_rng(2)
        grid = GridSpec.isotropic((12, 12, 12))
        coeff = rng.uniform(-3, 3, (5, 5, 5))
        field = evaluate_field(BiasFieldModel(coeff, (11 / 2,) * 3, grid), grid)
        assert np.all(field.data > 0)


class TestEstimateBias:
    def test_bias_free_phantom_yields_unit_field(self):
        vol, mask = two_tissue_phantom()
        model = estimate_bias(vol, mask, FAST)
        field = evaluate_field(model, vol.grid).data
        inside = mask.data > 0.5
        assert field[inside].min() >= 0.98
        assert field[inside].max() <= 1.02

    def test_recovers_injected_sine_field(self):
        vol, mask = two_tissue_phantom()
        logf = injected_log_field(DIMS, amplitude=0.2)
        biased = vol.with_data(vol.data * np.exp(logf).astype(np.float32))
        model = estimate_bias(biased, mask, FAST)
        rec = np.log(evaluate_field(model, vol.grid).data.astype(np.float64))
        inside = mask.data > 0.5
        true_c = logf - logf[inside].mean()
        rec_c = rec - rec[inside].mean()
        err = masked_rms(rec_c - true_c, inside)
        baseline = masked_rms(true_c, inside)
        assert err <= 0.2 * baseline, f"log-field RMS error {err:.4f} vs baseline {baseline:.4f}"

    def test_constant_image_times_field_low_cov(self):
        dims = DIMS
        data = np.full(dims, 2.0, np.float32)
        logf = injected_log_field(dims, amplitude=0.2)
        mask_arr = np.zeros(dims, np.float32)
        mask_arr[2:-2, 2:-2, 2:-2] = 1.0
        vol = Volume3D.from_array(data * np.exp(logf).astype(np.float32))
        mask = vol.with_data(mask_arr)
        model = estimate_bias(vol, mask, FAST)
        fixed = correct(vol, model).data
        inside = mask_arr > 0.5
        cov = float(fixed[inside].std() / fixed[inside].mean())
        assert cov <= 0.02

    def test_mean_intensity_preserved(self):
        vol, mask = two_tissue_phantom(noise=0.02, seed=3)
        logf = injected_log_field(DIMS, amplitude=0.2)
        biased = vol.with_data(vol.data * np.exp(logf).astype(np.float32))
        model = estimate_bias(biased, mask, FAST)
        fixed = correct(biased, model)
        inside = mask.data > 0.5
        before = float(biased.data[inside].mean())
        after = float(fixed.data[inside].mean())
        assert abs(after - before) / before < 0.01

    def test_sharpening_reduces_entropy(self):
        vol, mask = two_tissue_phantom(noise=0.02, seed=5)
        logf = injected_log_field(DIMS, amplitude=0.2)
        biased = vol.with_data(vol.data * np.exp(logf).astype(np.float32))
        fixed = correct(biased, estimate_bias(biased, mask, FAST))
        inside = mask.data > 0.5

        def entropy(img):
            hist, _ = np.histogram(np.log(img[inside]), bins=128)
            p = hist[hist > 0] / hist.sum()
            return float(-(p * np.log(p)).sum())

        assert entropy(fixed.data) <= entropy(biased.data)

    def test_idempotent_at_convergence(self):
        vol, mask = two_tissue_phantom(noise=0.02, seed=7)
        logf = injected_log_field(DIMS, amplitude=0.2)
        biased = vol.with_data(vol.data * np.exp(logf).astype(np.float32))
        once = correct(biased, estimate_bias(biased, mask, FAST))
        twice = correct(once, estimate_bias(once, mask, FAST))
        inside = mask.data > 0.5
        first_change = masked_rms(once.data - biased.data, inside)
        second_change = masked_rms(twice.data - once.data, inside)
        assert second_change < 0.01 * first_change + 1e-12

    def test_default_mask_is_otsu_foreground(self):
        vol, _ = two_tissue_phantom()
        model = estimate_bias(vol, None, FAST)
        field = evaluate_field(model, vol.grid).data
        inside = vol.data > 0
        assert field[inside].min() >= 0.95
        assert field[inside].max() <= 1.05

    def test_nonpositive_intensity_rejected(self):
        vol, mask = two_tissue_phantom()
        data = vol.data.copy()
        data[12, 14, 12] = -1.0
        with pytest.raises(NonPositiveIntensity):
            estimate_bias(vol.with_data(data), mask, FAST)

    def test_empty_mask_rejected(self):
        vol, mask = two_tissue_phantom()
        with pytest.raises(EmptyMask):
            estimate_bias(vol, mask.with_data(np.zeros(DIMS)), FAST)

    def test_degenerate_histogram_rejected(self):
        vol, mask = two_tissue_phantom()
        with pytest.raises(DegenerateHistogram):
            estimate_bias(vol.with_data(np.full(DIMS, 3.0)), mask, FAST)


class TestCorrect:
    def test_zero_model_is_identity(self):
        vol, _ = two_tissue_phantom()
        model = BiasFieldModel(
            np.zeros((4, 4, 4)), tuple((d - 1.0) for d in DIMS), vol.grid
        )
        out = correct(vol, model)
        np.testing.assert_array_equal(out.data, vol.data)

    def test_correct_is_linear_in_image(self):
        vol, mask = two_tissue_phantom(noise=0.02, seed=9)
        model = estimate_bias(vol, mask, FAST)
        one = correct(vol, model)
        two = correct(vol.with_data(2.0 * vol.data), model)
        np.testing.assert_allclose(two.data, 2.0 * one.data, rtol=1e-6)

    def test_recovers_original_up_to_scale(self):
        vol, mask = two_tissue_phantom()
        logf = injected_log_field(DIMS, amplitude=0.2)
        biased = vol.with_data(vol.data * np.exp(logf).astype(np.float32))
        fixed = correct(biased, estimate_bias(biased, mask, FAST))
        inside = mask.data > 0.5
        scale = float(fixed.data[inside].mean() / vol.data[inside].mean())
        nrmse = masked_rms(fixed.data / scale - vol.data, inside) / float(
            vol.data[inside].mean()
        )
        assert nrmse <= 0.05

    def test_grid_outside_domain_rejected(self):
        vol, _ = two_tissue_phantom()
        model = BiasFieldModel(np.zeros((4, 4, 4)), tuple((d - 1.0) for d in DIMS), vol.grid)
        big = GridSpec.isotropic((64, 64, 64))
        with pytest.raises(GridOutsideDomain):
            evaluate_field(model, big)


def test_otsu_separates_two_populations():
    rng = np.random.default_rng(0)
    lo = rng.normal(0.1, 0.02, 4000)
    hi = rng.normal(1.0, 0.1, 2000)
    t = otsu_threshold(np.concatenate([lo, hi]))
    correct_rate = (np.sum(lo <= t) + np.sum(hi > t)) / 6000
    assert correct_rate >= 0.99
