"""Local linear smoothing of pairwise products on [0,1]^2 (d = 1 only).

Fits beta0 of the weighted least squares R ~ (1, T_j - s, T_k - t) with
Epanechnikov product weights over all ordered within-subject pairs j != k.
The pair sums factorize per subject, so no pair array is ever materialized;
a fit at one point costs O(n m).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from threading import Lock

import numpy as np

from .core import CovarianceField, FunctionalDataset, SeedSpec, canonical_pair_order, derive_stream
from .pairloss import full_pair_loss


@dataclass(frozen=True)
class LoclinConfig:
    """Bandwidth and solver settings for the local linear surface fit."""

    bandwidth: float
    kernel: str = "epanechnikov"
    ridge: float = 1e-10
    grid_size: int = 65

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.kernel != "epanechnikov":
            raise ValueError("only the epanechnikov kernel is shipped")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")


def _epanechnikov(u: np.ndarray, h: float) -> np.ndarray:
    z = u / h
    w = 1.0 - z * z
    return np.where(np.abs(z) < 1.0, 0.75 * w / h, 0.0)


def _wls_moments(data: FunctionalDataset, h: float, s: float, t: float):
    """3x3 normal matrix and rhs of the local WLS at (s, t).

    With a_j = K_h(T_ij - s) and b_k = K_h(T_ik - t), every ordered-pair sum
    splits as (sum_j a_j f_j)(sum_k b_k g_k) - sum_j a_j b_j f_j g_j.
    """
    T = data.locations[:, :, 0]
    Y = data.values
    u = T - s
    v = T - t
    a = _epanechnikov(u, h)
    b = _epanechnikov(v, h)

    au = (a, a * u, a * (u * u))
    bv = (b, b * v, b * (v * v))
    ay = (a * Y, a * Y * u)
    by = (b * Y, b * Y * v)

    def cross(left, right, same):
        # sum over ordered pairs j != k of left_j * right_k
        full = float(np.sum(left.sum(axis=1) * right.sum(axis=1)))
        return full - float(np.sum(same))

    A = np.empty((3, 3))
    A[0, 0] = cross(au[0], bv[0], a * b)
    A[0, 1] = cross(au[1], bv[0], a * b * u)
    A[0, 2] = cross(au[0], bv[1], a * b * v)
    A[1, 1] = cross(au[2], bv[0], a * b * u * u)
    A[1, 2] = cross(au[1], bv[1], a * b * u * v)
    A[2, 2] = cross(au[0], bv[2], a * b * v * v)
    A[1, 0] = A[0, 1]
    A[2, 0] = A[0, 2]
    A[2, 1] = A[1, 2]

    rhs = np.empty(3)
    rhs[0] = cross(ay[0], by[0], a * b * Y * Y)
    rhs[1] = cross(ay[1], by[0], a * b * Y * Y * u)
    rhs[2] = cross(ay[0], by[1], a * b * Y * Y * v)
    return A, rhs


def _solve_wls(A: np.ndarray, rhs: np.ndarray, ridge: float) -> float:
    system = A + ridge * np.eye(3)
    try:
        beta = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("insufficient local data; increase h or set ridge") from None
    if not np.all(np.isfinite(beta)):
        raise ValueError("insufficient local data; increase h or set ridge")
    return float(beta[0])


def loclin_fit_at(data: FunctionalDataset, cfg: LoclinConfig, s: float, t: float) -> float:
    """Local linear estimate of the covariance surface at a single point."""
    if data.d != 1:
        raise ValueError("loclin requires d=1")
    A, rhs = _wls_moments(data, cfg.bandwidth, float(s), float(t))
    return _solve_wls(A, rhs, cfg.ridge)


def loclin_fit_points(first, second, responses, cfg: LoclinConfig, s: float, t: float) -> float:
    """Local linear fit at (s, t) from explicit pseudo-observations.

    first/second are the pseudo-point coordinates and responses the values
    regressed on (1, first - s, second - t) with product Epanechnikov
    weights. This is the same estimator as loclin_fit_at applied to the
    ordered-pair triples (T_ij, T_ik, Y_ij Y_ik).
    """
    u = np.asarray(first, dtype=float) - s
    v = np.asarray(second, dtype=float) - t
    r = np.asarray(responses, dtype=float)
    w = _epanechnikov(u, cfg.bandwidth) * _epanechnikov(v, cfg.bandwidth)
    design = np.stack([np.ones_like(u), u, v], axis=1)
    A = design.T @ (design * w[:, None])
    rhs = design.T @ (w * r)
    return _solve_wls(A, rhs, cfg.ridge)


class LoclinField(CovarianceField):
    """Lazy memoized grid of local linear fits with bilinear interpolation.

    Node fits are cached write-once (mirror pairs share one entry); off-grid
    queries interpolate the four surrounding nodes. Pairs are canonicalized
    before lookup, so evaluation is exactly symmetric.
    """

    def __init__(self, data: FunctionalDataset, cfg: LoclinConfig, bound: float):
        if data.d != 1:
            raise ValueError("loclin requires d=1")
        self._data = data
        self._cfg = cfg
        self._axis = np.linspace(0.0, 1.0, cfg.grid_size)
        self._memo: dict = {}
        self._lock = Lock()
        super().__init__(self._eval_pairs_impl, d=1, bound=bound, clip_output=True, name="loclin")

    def _node_value(self, i: int, j: int) -> float:
        key = (i, j) if i <= j else (j, i)
        val = self._memo.get(key)
        if val is None:
            with self._lock:
                val = self._memo.get(key)
                if val is None:
                    val = loclin_fit_at(
                        self._data, self._cfg, self._axis[key[0]], self._axis[key[1]]
                    )
                    self._memo[key] = val
        return val

    def _eval_pairs_impl(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        s, t = canonical_pair_order(s, t)
        g = self._axis.size
        step = 1.0 / (g - 1)
        si = np.minimum((np.clip(s[:, 0], 0.0, 1.0) / step).astype(int), g - 2)
        ti = np.minimum((np.clip(t[:, 0], 0.0, 1.0) / step).astype(int), g - 2)
        fs = s[:, 0] / step - si
        ft = t[:, 0] / step - ti
        needed = set(zip(si.tolist(), ti.tolist()))
        nodes = {}
        for i, j in sorted(needed):
            for di in (0, 1):
                for dj in (0, 1):
                    key = (i + di, j + dj)
                    if key not in nodes:
                        nodes[key] = self._node_value(*key)
        v00 = np.array([nodes[(i, j)] for i, j in zip(si, ti)])
        v10 = np.array([nodes[(i + 1, j)] for i, j in zip(si, ti)])
        v01 = np.array([nodes[(i, j + 1)] for i, j in zip(si, ti)])
        v11 = np.array([nodes[(i + 1, j + 1)] for i, j in zip(si, ti)])
        return (
            v00 * (1 - fs) * (1 - ft)
            + v10 * fs * (1 - ft)
            + v01 * (1 - fs) * ft
            + v11 * fs * ft
        )


def loclin_field(data: FunctionalDataset, cfg: LoclinConfig, bound: float = 10.0) -> LoclinField:
    """Covariance field backed by memoized local linear fits, clipped to bound."""
    return LoclinField(data, cfg, bound)


def bandwidth_from_theory(n: int, m: int, c_h: float = 1.0) -> float:
    """Plug-in bandwidth of order (n m (m-1))^(-1/6), clamped to [0.02, 0.5]."""
    h = c_h * (n * m * (m - 1)) ** (-1.0 / 6.0)
    return float(min(0.5, max(0.02, h)))


def select_bandwidth(
    data: FunctionalDataset,
    candidates,
    folds: int,
    seed: SeedSpec,
    bound: float = 10.0,
    grid_size: int = 33,
) -> float:
    """Subject-level K-fold CV over bandwidths, scored by held-out pair loss.

    Ties break toward the larger bandwidth; candidates whose fits fail on any
    fold are skipped, and an error is raised if none survive.
    """
    candidates = sorted(float(h) for h in candidates)
    if not candidates:
        raise ValueError("candidates must be nonempty")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if data.n < folds:
        raise ValueError("need at least one subject per fold")
    rng = derive_stream(seed, "cv-folds", 0)
    perm = rng.permutation(data.n)
    fold_of = np.empty(data.n, dtype=int)
    for pos, subj in enumerate(perm):
        fold_of[subj] = pos % folds

    best_h, best_score = None, math.inf
    for h in candidates:
        cfg = LoclinConfig(bandwidth=h, grid_size=grid_size)
        score = 0.0
        try:
            for f in range(folds):
                train_idx = np.nonzero(fold_of != f)[0]
                test_idx = np.nonzero(fold_of == f)[0]
                fld = loclin_field(data.subset(train_idx), cfg, bound=bound)
                score += full_pair_loss(data.subset(test_idx), fld).value
        except ValueError:
            continue
        if score < best_score - 1e-12 or (abs(score - best_score) <= 1e-12 and best_h is not None):
            best_h, best_score = h, min(score, best_score)
    if best_h is None:
        raise ValueError("no bandwidth candidate produced a usable fit")
    return best_h
