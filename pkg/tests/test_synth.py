import math

import numpy as np
import pytest

from covfield.core import NoiseSpec, SeedSpec
from covfield.postrisk import gauss_legendre_01
from covfield.synth import (
    AnisotropicSmoothTruth,
    SpectralCoefficients,
    TensorSobolevTruth,
    TruthSpec,
    basis_eval,
    basis_matrix,
    eval_tensor_cov,
    generate_dataset,
    make_psd_coeffs,
    rkhs_norm_sq,
    sample_paths_kl,
)

from conftest import single_mode_coeffs

SQRT2 = math.sqrt(2.0)


def test_basis_constant():
    assert basis_eval(1, 0.73) == 1.0


def test_basis_cosine_at_zero():
    assert basis_eval(2, 0.0) == pytest.approx(SQRT2, abs=1e-12)


def test_basis_sine_quarter():
    assert basis_eval(3, 0.25) == pytest.approx(SQRT2, abs=1e-12)


def test_basis_orthonormality_quadrature():
    x, w = gauss_legendre_01(256)
    B = basis_matrix(7, x)
    gram = B.T @ (B * w[:, None])
    assert np.max(np.abs(gram - np.eye(7))) < 1e-10


def test_tensor_cov_constant_kernel():
    coeffs = single_mode_coeffs(1, 1.0, J=3)
    for s, t in [(0.1, 0.9), (0.5, 0.5), (0.0, 1.0)]:
        assert eval_tensor_cov(coeffs, s, t) == pytest.approx(1.0, abs=1e-14)


def test_tensor_cov_cosine_zero():
    coeffs = single_mode_coeffs(2, 0.5)
    assert eval_tensor_cov(coeffs, 0.25, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_tensor_cov_cosine_at_origin():
    coeffs = single_mode_coeffs(2, 0.5)
    assert eval_tensor_cov(coeffs, 0.0, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_tensor_cov_exact_symmetry():
    coeffs = make_psd_coeffs(2.0, 7, 2.0, SeedSpec(5))
    rng = np.random.default_rng(1)
    s = rng.uniform(size=500)
    t = rng.uniform(size=500)
    assert np.array_equal(eval_tensor_cov(coeffs, s, t), eval_tensor_cov(coeffs, t, s))


def test_tensor_cov_psd_function():
    coeffs = make_psd_coeffs(2.0, 6, 2.0, SeedSpec(9))
    pts = np.random.default_rng(2).uniform(size=40)
    gram = eval_tensor_cov(coeffs, np.repeat(pts, 40), np.tile(pts, 40)).reshape(40, 40)
    assert np.linalg.eigvalsh(0.5 * (gram + gram.T)).min() >= -1e-8


def test_rkhs_norm_constant_mode():
    assert rkhs_norm_sq(single_mode_coeffs(1, 1.0)) == pytest.approx(1.0)


def test_rkhs_norm_cosine_mode():
    # c_22 = 0.5 with alpha = 1: 0.25 * (2 pi)^4
    coeffs = single_mode_coeffs(2, 0.5, alpha=1.0)
    assert rkhs_norm_sq(coeffs) == pytest.approx(0.25 * (2 * np.pi) ** 4, rel=1e-12)


def test_rkhs_norm_zero_matrix():
    assert rkhs_norm_sq(SpectralCoefficients(2.0, np.zeros((4, 4)))) == 0.0


def test_make_psd_coeffs_dimension_one():
    coeffs = make_psd_coeffs(2.0, 1, 0.7, SeedSpec(3))
    assert coeffs.c[0, 0] == pytest.approx(0.7, rel=1e-12)


def test_make_psd_coeffs_psd_and_norm():
    for master in range(5):
        coeffs = make_psd_coeffs(2.0, 8, 2.5, SeedSpec(master))
        assert np.linalg.eigvalsh(coeffs.c).min() >= -1e-10
        assert rkhs_norm_sq(coeffs) == pytest.approx(2.5**2, abs=1e-9)


def test_sample_paths_constant_mode():
    coeffs = single_mode_coeffs(1, 1.0)
    paths = sample_paths_kl(coeffs, 500, SeedSpec(4))
    ts = np.linspace(0, 1, 7)
    vals = np.array([p(ts) for p in paths])
    # every path is constant in t
    assert np.max(np.abs(vals - vals[:, :1])) == 0.0
    # constants are standard normal draws
    assert abs(vals[:, 0].mean()) < 3 / math.sqrt(500)
    assert abs(vals[:, 0].std() - 1.0) < 0.15


def test_sample_paths_empty():
    assert sample_paths_kl(single_mode_coeffs(1, 1.0), 0, SeedSpec(4)) == []


def test_sample_paths_rejects_non_psd():
    c = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
    with pytest.raises(ValueError, match="not PSD"):
        sample_paths_kl(SpectralCoefficients(2.0, c), 3, SeedSpec(0))


def test_score_covariance_monte_carlo():
    coeffs = make_psd_coeffs(2.0, 4, 1.5, SeedSpec(21))
    n = 10_000
    paths = sample_paths_kl(coeffs, n, SeedSpec(22))
    # recover scores by evaluating at basis-friendly points: use projection
    # via dense quadrature of X(t) psi_j(t)
    x, w = gauss_legendre_01(64)
    B = basis_matrix(4, x)
    vals = np.array([p(x) for p in paths])
    scores = (vals * w) @ B
    emp = scores.T @ scores / n
    se = np.sqrt((np.outer(np.diag(coeffs.c), np.diag(coeffs.c)) + coeffs.c**2) / n)
    assert np.all(np.abs(emp - coeffs.c) <= 3.0 * se + 1e-12)


def test_generate_constant_paths_no_noise():
    truth = TruthSpec(TensorSobolevTruth(single_mode_coeffs(1, 1.0)))
    ds = generate_dataset(truth, 10, 5, NoiseSpec(sigma=0.0), SeedSpec(6))
    assert np.max(np.abs(ds.values - ds.values[:, :1])) < 1e-12


def test_generate_deterministic():
    truth = TruthSpec(TensorSobolevTruth(make_psd_coeffs(2.0, 4, 1.0, SeedSpec(1))))
    a = generate_dataset(truth, 20, 4, NoiseSpec(sigma=0.5), SeedSpec(8))
    b = generate_dataset(truth, 20, 4, NoiseSpec(sigma=0.5), SeedSpec(8))
    assert np.array_equal(a.locations, b.locations)
    assert np.array_equal(a.values, b.values)


def test_generate_pooled_variance():
    # Var(Y) = Var(Z_1) + sigma^2 = 1.25 for the constant-mode truth
    truth = TruthSpec(TensorSobolevTruth(single_mode_coeffs(1, 1.0)))
    ds = generate_dataset(truth, 200, 10, NoiseSpec(sigma=0.5), SeedSpec(13))
    pooled = float(np.mean(ds.values**2))
    per_subject = np.mean(ds.values**2, axis=1)
    se = float(np.std(per_subject, ddof=1) / math.sqrt(ds.n))
    assert abs(pooled - 1.25) <= 3.0 * se


def test_products_unbiased_for_truth():
    # E[Y_ij Y_ik | T] = K(T_ij, T_ik) for j != k
    coeffs = make_psd_coeffs(2.0, 5, 1.5, SeedSpec(31))
    truth = TruthSpec(TensorSobolevTruth(coeffs))
    ds = generate_dataset(truth, 4000, 2, NoiseSpec(sigma=0.5), SeedSpec(32))
    fld = truth.field()
    prods = ds.values[:, 0] * ds.values[:, 1]
    kvals = fld.eval_pairs(ds.locations[:, 0, :], ds.locations[:, 1, :])
    diff = prods - kvals
    se = float(np.std(diff, ddof=1) / math.sqrt(ds.n))
    assert abs(float(diff.mean())) <= 3.0 * se


def test_smooth_truth_field_and_paths():
    truth = AnisotropicSmoothTruth(length_scales=(0.3, 0.6), variance=2.0)
    fld = truth.field()
    assert fld.d == 2
    assert fld((0.2, 0.4), (0.2, 0.4)) == pytest.approx(2.0)
    s, t = np.array([[0.1, 0.9]]), np.array([[0.7, 0.2]])
    assert fld.eval_pairs(s, t)[0] == fld.eval_pairs(t, s)[0]
    ds = generate_dataset(TruthSpec(truth), 40, 6, NoiseSpec(sigma=0.0), SeedSpec(14))
    assert ds.d == 2 and ds.values.shape == (40, 6)
