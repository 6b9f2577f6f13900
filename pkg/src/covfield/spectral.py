"""Truncated tensor-product Fourier least squares over a hyperbolic cross.

The model class is span{psi_j(s) psi_k(t) : j*k <= M}; coefficients are fit
to the pairwise products Y_ij' Y_ik' by ridge-stabilized normal equations.
The normal-equation blocks are accumulated per subject in factorized form
(cost O(m M^2 + |I_M|^2) per subject instead of O(m^2 |I_M|)), which keeps
dense-m sweeps cheap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import CovarianceField, FunctionalDataset
from .synth import SQRT2, basis_matrix


@dataclass(frozen=True)
class IndexSetM:
    """Hyperbolic cross {(j,k) : j*k <= M, j,k >= 1}, sorted lexicographically."""

    M: int
    pairs: tuple

    @property
    def size(self) -> int:
        return len(self.pairs)


def enumerate_index_set(M: int) -> IndexSetM:
    if M < 1:
        raise ValueError("M must be >= 1")
    pairs = tuple((j, k) for j in range(1, M + 1) for k in range(1, M // j + 1))
    return IndexSetM(M=M, pairs=pairs)


@dataclass(frozen=True)
class SpectralFit:
    """Estimated coefficients on a hyperbolic cross; chat is symmetric."""

    index_set: IndexSetM
    chat: np.ndarray  # (M, M) dense, zero off the index set
    ridge: float

    def coefficient(self, j: int, k: int) -> float:
        return float(self.chat[j - 1, k - 1])


def _accumulate_normal_eq(data: FunctionalDataset, idx: IndexSetM):
    """Factorized G'G and G'R over all ordered pairs j' != k' of every subject."""
    M = idx.M
    p = idx.size
    a_idx = np.array([j - 1 for j, _ in idx.pairs])
    b_idx = np.array([k - 1 for _, k in idx.pairs])

    n, m = data.n, data.m
    flat_t = data.locations[:, :, 0].ravel()
    psi = basis_matrix(M, flat_t).reshape(n, m, M)
    y = data.values

    # Per-subject inner products: A_i = Psi_i' Psi_i, g_i = Psi_i' y_i.
    A = np.einsum("ija,ijb->iab", psi, psi)
    g = np.einsum("ija,ij->ia", psi, y)

    # Sum over ordered pairs factorizes into full products minus the diagonal.
    gram = np.einsum("iac,ibd->abcd", A, A)[a_idx[:, None], b_idx[:, None], a_idx[None, :], b_idx[None, :]]
    q = psi.reshape(n * m, M)
    qp = q[:, a_idx] * q[:, b_idx]  # (n*m, p) products psi_a psi_b at each point
    gram -= qp.T @ qp

    rhs = g[:, a_idx] * g[:, b_idx]  # (n, p)
    rhs = rhs.sum(axis=0)
    rhs -= qp.T @ (y.ravel() ** 2)
    return gram, rhs, p


def fit_spectral(data: FunctionalDataset, M: int, ridge: float | None = None) -> SpectralFit:
    """Least-squares coefficients over the hyperbolic cross I_M.

    Minimizes the sum over subjects and ordered pairs j' != k' of
    (Y_ij' Y_ik' - sum_{(j,k) in I_M} c_jk psi_j(T_ij') psi_k(T_ik'))^2
    plus ridge * ||c||^2, then symmetrizes the estimate. ridge defaults to
    1e-8 times the pseudo-observation count.
    """
    if data.d != 1:
        raise ValueError("spectral estimator requires d=1")
    if data.m < 2:
        raise ValueError("need at least two measurements")
    rows = data.n * data.m * (data.m - 1)
    if ridge is None:
        ridge = 1e-8 * rows
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    idx = enumerate_index_set(M)
    gram, rhs, p = _accumulate_normal_eq(data, idx)
    system = gram + ridge * np.eye(p)
    try:
        chol = np.linalg.cholesky(system)
    except np.linalg.LinAlgError as exc:
        raise ValueError("rank-deficient design; increase ridge or data") from exc
    coef = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    chat = np.zeros((M, M))
    for (j, k), v in zip(idx.pairs, coef):
        chat[j - 1, k - 1] = v
    chat = 0.5 * (chat + chat.T)
    return SpectralFit(index_set=idx, chat=chat, ridge=float(ridge))


def spectral_field(fit: SpectralFit, bound: float | None = None) -> CovarianceField:
    """Evaluatable field sum c_jk psi_j(s) psi_k(t), clipped to the bound.

    Exactly symmetric: the coefficient matrix is symmetric and evaluation
    uses the symmetrized bilinear form.
    """
    M = fit.index_set.M
    c = fit.chat
    if bound is None:
        sup = np.full(M, SQRT2)
        sup[0] = 1.0
        bound = max(float(np.sum(np.abs(c) * np.outer(sup, sup))), 1e-12)
        clip_output = False
    else:
        clip_output = True

    def fn(s, t):
        ps = basis_matrix(M, s[:, 0])
        pt = basis_matrix(M, t[:, 0])
        return 0.5 * (np.sum((ps @ c) * pt, axis=1) + np.sum((pt @ c) * ps, axis=1))

    return CovarianceField(fn, d=1, bound=bound, clip_output=clip_output, name="spectral")


def m_from_theory(n: int, m: int, alpha: float, c_M: float = 1.0) -> int:
    """Truncation level M = max(1, round(c_M (n floor(m/2))^(1/(2 alpha + 1)))).

    Rounding is half-up so the map is monotone in its inputs.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    base = (n * (m // 2)) ** (1.0 / (2.0 * alpha + 1.0))
    return max(1, int(math.floor(c_M * base + 0.5)))


def fit_to_json(fit: SpectralFit) -> str:
    entries = [
        [j, k, fit.chat[j - 1, k - 1]] for (j, k) in fit.index_set.pairs
    ]
    return json.dumps(
        {"M": fit.index_set.M, "ridge": fit.ridge, "entries": entries},
        sort_keys=True,
    )


def fit_from_json(text: str) -> SpectralFit:
    doc = json.loads(text)
    idx = enumerate_index_set(int(doc["M"]))
    chat = np.zeros((idx.M, idx.M))
    for j, k, v in doc["entries"]:
        chat[int(j) - 1, int(k) - 1] = float(v)
    chat = 0.5 * (chat + chat.T)
    return SpectralFit(index_set=idx, chat=chat, ridge=float(doc["ridge"]))
