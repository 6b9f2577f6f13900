import numpy as np
import pytest

from covfield.core import CovarianceField, FunctionalDataset, NoiseSpec, SeedSpec
from covfield.synth import (
    SpectralCoefficients,
    TensorSobolevTruth,
    TruthSpec,
    generate_dataset,
    make_psd_coeffs,
)


def psi_product_field(j: int, k: int, scale: float = 1.0) -> CovarianceField:
    """scale * psi_j (x) psi_k as a covariance-field-like object (j == k only
    is symmetric; tests use symmetric choices)."""
    from covfield.synth import basis_eval

    def fn(s, t):
        return scale * basis_eval(j, s[:, 0]) * basis_eval(k, t[:, 0])

    return CovarianceField(fn, d=1, bound=2.0 * abs(scale) + 1e-9, name=f"psi{j}{k}")


def single_mode_coeffs(j: int, value: float, J: int | None = None, alpha: float = 2.0):
    J = J or max(j, 1)
    c = np.zeros((J, J))
    c[j - 1, j - 1] = value
    return SpectralCoefficients(alpha, c)


@pytest.fixture
def small_dataset():
    coeffs = make_psd_coeffs(2.0, 4, 1.5, SeedSpec(11))
    truth = TruthSpec(TensorSobolevTruth(coeffs))
    return generate_dataset(truth, 8, 4, NoiseSpec(sigma=0.4), SeedSpec(12))


def random_dataset(seed: int, n: int, m: int, sigma: float = 0.4) -> FunctionalDataset:
    rng = np.random.default_rng(seed)
    locations = rng.uniform(size=(n, m, 1))
    values = rng.standard_normal((n, m))
    return FunctionalDataset(locations, values)
