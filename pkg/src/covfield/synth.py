"""Ground-truth covariance families and the repeated-measurement data generator.

Two families are shipped:

* ``TensorSobolevTruth`` (d=1): a truncated tensor-product Fourier expansion
  K(s,t) = sum_{j,k} c_jk psi_j(s) psi_k(t) with a symmetric PSD coefficient
  matrix c; sample paths come from the truncated expansion with Gaussian
  score vectors Z ~ N(0, c).
* ``AnisotropicSmoothTruth`` (any d): a closed-form product kernel with one
  length-scale per coordinate; sample values come from per-subject Gram
  Cholesky factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CovarianceField, FunctionalDataset, NoiseSpec, SeedSpec, derive_stream

SQRT2 = math.sqrt(2.0)


def basis_frequency(j: int) -> int:
    """Frequency of the j-th rearranged Fourier basis function (j >= 1)."""
    return j // 2


def basis_eval(j: int, t):
    """Rearranged Fourier basis on [0,1]: psi_1 = 1, psi_{2f} = sqrt(2)cos(2 pi f t),
    psi_{2f+1} = sqrt(2)sin(2 pi f t)."""
    if j < 1:
        raise ValueError("basis index starts at 1")
    t = np.asarray(t, dtype=float)
    f = j // 2
    if j == 1:
        out = np.ones_like(t)
    elif j % 2 == 0:
        out = SQRT2 * np.cos(2.0 * np.pi * f * t)
    else:
        out = SQRT2 * np.sin(2.0 * np.pi * f * t)
    return out if out.ndim else float(out)


def basis_matrix(J: int, t) -> np.ndarray:
    """Matrix of the first J basis functions at points t, shape (len(t), J)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty((t.size, J))
    out[:, 0] = 1.0
    for j in range(2, J + 1):
        f = j // 2
        ang = 2.0 * np.pi * f * t
        out[:, j - 1] = SQRT2 * (np.cos(ang) if j % 2 == 0 else np.sin(ang))
    return out


def eigenvalues(alpha: float, J: int) -> np.ndarray:
    """Sobolev kernel eigenvalues in the rearranged order: rho_1 = 1,
    rho_j = (2 pi floor(j/2))^(-2 alpha) for j >= 2."""
    rho = np.ones(J)
    for j in range(2, J + 1):
        rho[j - 1] = (2.0 * np.pi * (j // 2)) ** (-2.0 * alpha)
    return rho


@dataclass(frozen=True)
class SpectralCoefficients:
    """Symmetric PSD coefficient matrix on the first J basis functions.

    ``c[j-1, k-1]`` holds the coefficient of psi_j(s) psi_k(t); ``rho`` are
    the Sobolev eigenvalues used by the RKHS norm.
    """

    alpha: float
    c: np.ndarray
    rho: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        c = np.ascontiguousarray(self.c, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("c must be a square matrix")
        if not np.array_equal(c, c.T):
            c = 0.5 * (c + c.T)
        c.flags.writeable = False
        object.__setattr__(self, "c", c)
        rho = self.rho
        if rho is None:
            rho = eigenvalues(self.alpha, c.shape[0])
        rho = np.ascontiguousarray(rho, dtype=float)
        if rho.shape != (c.shape[0],) or np.any(rho <= 0):
            raise ValueError("rho must be positive with one entry per basis function")
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)

    @property
    def J(self) -> int:
        return self.c.shape[0]


def rkhs_norm_sq(coeffs: SpectralCoefficients) -> float:
    """Squared tensor-RKHS norm sum_{j,k} c_jk^2 / (rho_j rho_k)."""
    inv = 1.0 / coeffs.rho
    return float(np.sum((coeffs.c * np.outer(inv, inv)) * coeffs.c))


def eval_tensor_cov(coeffs: SpectralCoefficients, s, t):
    """Evaluate sum_{j,k <= J} c_jk psi_j(s) psi_k(t); exact symmetry in (s,t).

    The value is computed as the symmetrized bilinear form
    (psi(s)' C psi(t) + psi(t)' C psi(s)) / 2, which makes swapping the
    arguments bit-identical even in floating point.
    """
    s_arr = np.atleast_1d(np.asarray(s, dtype=float)).ravel()
    t_arr = np.atleast_1d(np.asarray(t, dtype=float)).ravel()
    ps = basis_matrix(coeffs.J, s_arr)
    pt = basis_matrix(coeffs.J, t_arr)
    cs = ps @ coeffs.c
    ct = pt @ coeffs.c
    vals = 0.5 * (np.sum(cs * pt, axis=1) + np.sum(ct * ps, axis=1))
    return vals if np.ndim(s) or np.ndim(t) else float(vals[0])


def coeff_sup_bound(coeffs: SpectralCoefficients) -> float:
    """Upper bound on sup |K| via sum |c_jk| sup|psi_j| sup|psi_k|."""
    sup = np.full(coeffs.J, SQRT2)
    sup[0] = 1.0
    return float(np.sum(np.abs(coeffs.c) * np.outer(sup, sup)))


def make_psd_coeffs(
    alpha: float,
    J: int,
    target_norm: float,
    seed: SeedSpec,
    freq_decay: float = 1.0,
) -> SpectralCoefficients:
    """Random PSD member of the tensor-Sobolev ball with exact RKHS norm.

    Draws c = G diag(w) G' with G = diag(sqrt(rho_j) (1+f_j)^(-freq_decay)) Q
    for a random orthogonal Q and positive weights w, then rescales so that
    rkhs_norm_sq equals target_norm^2 exactly. PSD by construction;
    freq_decay shifts coefficient mass toward low frequencies.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    if target_norm <= 0:
        raise ValueError("target_norm must be positive")
    rng = derive_stream(seed, "psd-coeffs", 0)
    q, _ = np.linalg.qr(rng.standard_normal((J, J)))
    w = np.sort(rng.exponential(size=J))[::-1] + 1e-3
    rho = eigenvalues(alpha, J)
    freqs = np.array([j // 2 for j in range(1, J + 1)], dtype=float)
    scale = np.sqrt(rho) * (1.0 + freqs) ** (-freq_decay)
    g = scale[:, None] * q
    c = (g * w) @ g.T
    c = 0.5 * (c + c.T)
    norm = math.sqrt(rkhs_norm_sq(SpectralCoefficients(alpha, c, rho)))
    c = c * (target_norm / norm)
    return SpectralCoefficients(alpha, c, rho)


def tensor_cov_field(coeffs: SpectralCoefficients, bound: float | None = None) -> CovarianceField:
    """CovarianceField view of a coefficient matrix (d = 1)."""
    if bound is None:
        bound = max(coeff_sup_bound(coeffs), 1e-12)

    def fn(s, t):
        return eval_tensor_cov(coeffs, s[:, 0], t[:, 0])

    return CovarianceField(fn, d=1, bound=bound, name="tensor_sobolev")


def sample_paths_kl(coeffs: SpectralCoefficients, n: int, seed: SeedSpec):
    """n truncated Karhunen-Loeve paths X_i(t) = sum_j Z_ij psi_j(t), Z ~ N(0, c).

    Returns a list of closures; each path is a deterministic function of its
    drawn score vector.
    """
    factor = score_cholesky(coeffs)
    if n == 0:
        return []
    rng = derive_stream(seed, "kl-scores", 0)
    scores = rng.standard_normal((n, coeffs.J)) @ factor.T

    def make_path(z):
        return lambda t: basis_matrix(coeffs.J, t) @ z if np.ndim(t) else float(
            basis_matrix(coeffs.J, t) @ z
        )

    return [make_path(scores[i]) for i in range(n)]


def score_cholesky(coeffs: SpectralCoefficients, jitter: float = 1e-10) -> np.ndarray:
    """Cholesky factor of c + jitter I; raises if c is not PSD."""
    try:
        return np.linalg.cholesky(coeffs.c + jitter * np.eye(coeffs.J))
    except np.linalg.LinAlgError as exc:
        raise ValueError("coefficients not PSD") from exc


@dataclass(frozen=True)
class TensorSobolevTruth:
    """Tensor-product Fourier truth (d = 1) with Gaussian KL scores."""

    coeffs: SpectralCoefficients

    kind = "tensor_sobolev"
    d = 1

    def field(self) -> CovarianceField:
        return tensor_cov_field(self.coeffs)

    def path_values(self, locations: np.ndarray, seed: SeedSpec) -> np.ndarray:
        """X_i(T_ij) for locations of shape (n, m, 1)."""
        n, m, _ = locations.shape
        factor = score_cholesky(self.coeffs)
        rng = derive_stream(seed, "kl-scores", 0)
        scores = rng.standard_normal((n, self.coeffs.J)) @ factor.T
        psi = basis_matrix(self.coeffs.J, locations[:, :, 0].ravel())
        vals = np.einsum("ij,ij->i", psi, np.repeat(scores, m, axis=0))
        return vals.reshape(n, m)


@dataclass(frozen=True)
class AnisotropicSmoothTruth:
    """Closed-form product kernel with per-coordinate length-scales.

    K(s,t) = variance * prod_a exp(-(s_a - t_a)^2 / (2 l_a^2)). Symmetric,
    PSD, and C-infinity; it stands in for anisotropic smoothness classes
    whose membership has no finite-dimensional certificate.
    """

    length_scales: tuple
    variance: float = 1.0

    kind = "anisotropic_smooth"

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        if any(v <= 0 for v in ls) or self.variance <= 0:
            raise ValueError("length scales and variance must be positive")
        object.__setattr__(self, "length_scales", ls)

    @property
    def d(self) -> int:
        return len(self.length_scales)

    def field(self) -> CovarianceField:
        ls = np.asarray(self.length_scales)
        v = self.variance

        def fn(s, t):
            z = (s - t) / ls
            return v * np.exp(-0.5 * np.sum(z * z, axis=1))

        return CovarianceField(fn, d=self.d, bound=v, name="anisotropic_smooth")

    def path_values(self, locations: np.ndarray, seed: SeedSpec, jitter: float = 1e-10) -> np.ndarray:
        """Exact Gaussian-process draws at each subject's own locations."""
        n, m, _ = locations.shape
        fld = self.field()
        rng = derive_stream(seed, "gp-paths", 0)
        z = rng.standard_normal((n, m))
        out = np.empty((n, m))
        eye = np.eye(m)
        for i in range(n):
            pts = locations[i]
            gram = fld.eval_pairs(np.repeat(pts, m, axis=0), np.tile(pts, (m, 1)))
            gram = gram.reshape(m, m)
            chol = np.linalg.cholesky(gram + jitter * eye)
            out[i] = chol @ z[i]
        return out


@dataclass(frozen=True)
class TruthSpec:
    """A ground-truth family instance: evaluatable field plus path sampler."""

    family: TensorSobolevTruth | AnisotropicSmoothTruth

    @property
    def d(self) -> int:
        return self.family.d

    @property
    def kind(self) -> str:
        return self.family.kind

    def field(self) -> CovarianceField:
        return self.family.field()


def generate_dataset(
    truth: TruthSpec,
    n: int,
    m: int,
    noise: NoiseSpec,
    seed: SeedSpec,
) -> FunctionalDataset:
    """Draw a dataset from the repeated-measurement model.

    Locations are i.i.d. uniform on [0,1]^d and independent of the paths;
    values are path evaluations plus independent centered Gaussian noise.
    Bit-deterministic given (truth, n, m, noise, seed).
    """
    if n < 1 or m < 2:
        raise ValueError("need n >= 1 and m >= 2")
    d = truth.d
    loc_rng = derive_stream(seed, "locations", 0)
    locations = loc_rng.uniform(size=(n, m, d))
    values = truth.family.path_values(locations, seed)
    if noise.sigma > 0:
        noise_rng = derive_stream(seed, "noise", 0)
        values = values + noise.sigma * noise_rng.standard_normal((n, m))
    return FunctionalDataset(locations, values)
