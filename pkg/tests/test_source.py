import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mffm.source import (
    ResidualStats,
    SourceSpec,
    compute_residual_stats,
    gaussian_blur_depthwise,
    gaussian_kernel,
    level_residual,
    sample_source,
    standardized_blur_noise,
    stationary_blur_noise,
    transport_scale_estimate,
)
from mffm.tensor_core import DimensionError, prolong_bilinear


def test_stats_floor_and_immutability():
    s = ResidualStats(0, np.array([[[0.0, 2.0]]]))
    assert s.sigma2[0, 0, 0] == 1e-8 and s.sigma2[0, 0, 1] == 2.0
    with pytest.raises(ValueError):
        s.sigma2[0, 0, 0] = 1.0
    np.testing.assert_allclose(s.sigma, np.sqrt(s.sigma2))


def test_level_residual_and_population_variance():
    rng = np.random.default_rng(0)
    coarse = rng.standard_normal((5, 1, 4, 4))
    fine = rng.standard_normal((5, 1, 8, 8))
    r = level_residual(fine, coarse)
    np.testing.assert_array_equal(r, fine - prolong_bilinear(coarse, 8))
    st_ = compute_residual_stats(r, level=1)
    np.testing.assert_allclose(st_.sigma2, np.mean((r - r.mean(0)) ** 2, axis=0))
    with pytest.raises(DimensionError):
        level_residual(fine, rng.standard_normal((5, 2, 4, 4)))


def test_kernel_is_normalized_with_three_sigma_radius():
    k = gaussian_kernel(1.5)
    assert k.size == 2 * 5 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel(0.0)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-1e3, 1e3, allow_nan=False), tau=st.floats(0.3, 2.5))
def test_blur_preserves_constants(c, tau):
    f = np.full((1, 16, 16), c)
    np.testing.assert_allclose(gaussian_blur_depthwise(f, tau), f, rtol=0, atol=1e-12 * max(1.0, abs(c)))


def test_blur_matches_direct_convolution_oracle():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((2, 12, 12))
    k = gaussian_kernel(1.0)
    r = k.size // 2
    g = np.pad(f, ((0, 0), (r, r), (r, r)), mode="reflect")
    want = np.zeros_like(f)
    for i in range(k.size):
        for j in range(k.size):
            want += k[i] * k[j] * g[:, i:i + 12, j:j + 12]
    np.testing.assert_allclose(gaussian_blur_depthwise(f, 1.0), want, atol=1e-12)
    with pytest.raises(DimensionError):
        gaussian_blur_depthwise(np.zeros((1, 4, 4)), 3.0)


def test_blur_impulse_and_variance_reduction():
    f = np.zeros((1, 15, 15))
    f[0, 7, 7] = 1.0
    k = gaussian_kernel(1.0)
    assert gaussian_blur_depthwise(f, 1.0)[0, 7, 7] == pytest.approx(k[k.size // 2] ** 2, rel=1e-14)
    z = np.random.default_rng(9).standard_normal((1, 64, 64))
    assert gaussian_blur_depthwise(z, 1.5).var() < z.var()


def test_standardized_noise_has_unit_samplewise_std():
    z = standardized_blur_noise((50, 1, 16, 16), 1.5, 1e-8, np.random.default_rng(2))
    np.testing.assert_allclose(z.std(axis=(1, 2, 3)), 1.0, atol=1e-6)


def test_calibrated_source_variance_at_interior_and_boundary_coordinates():
    stats = ResidualStats(0, np.full((1, 32, 32), 4.0))
    eps = sample_source(stats, SourceSpec(), np.random.default_rng(3), n_samples=10000)
    var = eps.var(axis=0)[0]
    for ij in [(16, 16), (0, 0), (0, 16), (31, 5)]:
        assert var[ij] == pytest.approx(4.0, rel=0.06), ij
    single = sample_source(stats, SourceSpec(), np.random.default_rng(3))
    assert single.shape == (1, 32, 32)


def test_blurred_noise_is_stationary():
    z = stationary_blur_noise((4000, 1, 12, 12), 1.5, np.random.default_rng(7))
    var = z.var(axis=0)[0]
    k = gaussian_kernel(1.5)
    expected = (k ** 2).sum() ** 2
    np.testing.assert_allclose(var, expected, rtol=0.1)
    # edges are not inflated relative to the centre
    assert var[0].mean() == pytest.approx(var[6].mean(), rel=0.05)


def test_floor_variance_source_is_tiny():
    stats = ResidualStats(0, np.zeros((1, 8, 8)))
    eps = sample_source(stats, SourceSpec(), np.random.default_rng(8), n_samples=10)
    z = standardized_blur_noise((10, 1, 8, 8), 1.5, 1e-8, np.random.default_rng(8))
    assert np.abs(eps).max() <= 1e-4 * np.abs(z).max() * (1 + 1e-12)


def test_source_kinds():
    sigma2 = np.linspace(1.0, 9.0, 16).reshape(1, 4, 4)
    stats = ResidualStats(0, sigma2)
    rng = np.random.default_rng(4)
    diag = sample_source(stats, SourceSpec("diagonal"), rng, n_samples=20000)
    np.testing.assert_allclose(diag.var(axis=0), sigma2, rtol=0.06)
    iid = sample_source(stats, SourceSpec("iid_matched"), rng, n_samples=20000)
    np.testing.assert_allclose(iid.var(axis=0), sigma2.mean(), rtol=0.06)
    with pytest.raises(ValueError):
        SourceSpec("laplace")
    with pytest.raises(ValueError):
        SourceSpec(tau=-1.0)


def test_blurred_source_is_spatially_correlated():
    stats = ResidualStats(0, np.ones((1, 16, 16)))
    rng = np.random.default_rng(5)
    blur = sample_source(stats, SourceSpec(), rng, n_samples=500)
    diag = sample_source(stats, SourceSpec("diagonal"), rng, n_samples=500)

    def neighbour_corr(x):
        return np.corrcoef(x[..., :, :-1].ravel(), x[..., :, 1:].ravel())[0, 1]

    assert neighbour_corr(blur) > 0.7
    assert abs(neighbour_corr(diag)) < 0.05


def test_transport_estimate_for_independent_source():
    rng = np.random.default_rng(6)
    sigma2 = np.linspace(0.5, 2.0, 64).reshape(1, 8, 8)
    residuals = np.sqrt(sigma2) * rng.standard_normal((4000, 1, 8, 8))
    stats = compute_residual_stats(residuals)
    est = transport_scale_estimate(residuals, stats, SourceSpec("diagonal"), 20000, rng)
    assert est / (2 * stats.sigma2.sum()) == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        transport_scale_estimate(residuals, stats, SourceSpec("iid_matched"), 10, rng)
