"""Shared domain types: datasets, evaluatable covariance fields, seeded streams.

Everything here is immutable after construction and safe to share across
threads; all operations are pure functions of their arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (multiply-xor-shift on 64 bits)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeedSpec:
    """Master seed for an experiment; all randomness is derived from it.

    Streams are labeled by a purpose tag and a replicate index, so any
    component can be re-run in isolation and reproduce its draws bit-exactly.
    """

    master: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master) <= _MASK64:
            raise ValueError("master seed must fit in 64 bits")


def stream_key(seed: SeedSpec, tag: str, replicate: int) -> int:
    """64-bit key for (master, tag, replicate), via a documented mixer.

    The mixing function is fixed so that any implementation can reproduce it:

        key = splitmix64(master)
        for each 8-byte little-endian chunk w of utf8(tag), zero padded:
            key = splitmix64(key ^ w)
        key = splitmix64(key ^ byte_length(utf8(tag)))
        key = splitmix64(key ^ (replicate mod 2^64))

    where splitmix64 is the standard multiply-xor-shift finalizer.
    """
    raw = tag.encode("utf-8")
    key = splitmix64(int(seed.master) & _MASK64)
    for off in range(0, len(raw), 8):
        chunk = raw[off : off + 8].ljust(8, b"\x00")
        key = splitmix64(key ^ int.from_bytes(chunk, "little"))
    key = splitmix64(key ^ len(raw))
    key = splitmix64(key ^ (int(replicate) & _MASK64))
    return key


def derive_stream(seed: SeedSpec, tag: str, replicate: int = 0) -> np.random.Generator:
    """Deterministic random stream for (seed, tag, replicate).

    The mixed 64-bit key (see ``stream_key``) seeds a counter-based Philox
    engine, so identical labels yield bit-identical streams and distinct
    labels yield statistically independent ones.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, replicate)))


def clip(x, beta: float):
    """Clip to [-beta, beta]; identity inside the band.

    Scalar in, scalar out; arrays are clipped elementwise.
    """
    if beta <= 0:
        raise ValueError("clip level beta must be positive")
    if np.isscalar(x):
        return float(min(beta, max(-beta, x)))
    return np.clip(np.asarray(x, dtype=float), -beta, beta)


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement-noise law. Only centered Gaussian is shipped."""

    sigma: float = 0.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


class FunctionalDataset:
    """n subjects, each observed at m random locations in [0,1]^d with noise.

    locations has shape (n, m, d) and values shape (n, m). Arrays are
    locked read-only on construction.
    """

    __slots__ = ("d", "n", "m", "locations", "values")

    def __init__(self, locations, values):
        locations = np.ascontiguousarray(locations, dtype=float)
        values = np.ascontiguousarray(values, dtype=float)
        if locations.ndim != 3:
            raise ValueError("locations must have shape (n, m, d)")
        n, m, d = locations.shape
        if values.shape != (n, m):
            raise ValueError("values must have shape (n, m)")
        if n < 1 or m < 2 or d < 1:
            raise ValueError("need n >= 1, m >= 2, d >= 1")
        if locations.min() < 0.0 or locations.max() > 1.0:
            raise ValueError("all location coordinates must lie in [0, 1]")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        locations.flags.writeable = False
        values.flags.writeable = False
        self.d = d
        self.n = n
        self.m = m
        self.locations = locations
        self.values = values

    def subset(self, subjects) -> "FunctionalDataset":
        """New dataset restricted to the given subject indices."""
        idx = np.asarray(subjects, dtype=int)
        return FunctionalDataset(self.locations[idx], self.values[idx])

    def __repr__(self):
        return f"FunctionalDataset(n={self.n}, m={self.m}, d={self.d})"


class CovarianceField:
    """Evaluatable symmetric function on [0,1]^d x [0,1]^d with a sup bound.

    Wraps a vectorized pair function fn(S, T) -> values, where S and T are
    (N, d) arrays of points. Every concrete field in this package is exactly
    symmetric: fn(S, T) and fn(T, S) return bit-identical values.
    """

    def __init__(self, fn, d: int, bound: float, clip_output: bool = False, name: str = ""):
        if bound <= 0 or not np.isfinite(bound):
            raise ValueError("bound must be positive and finite")
        self._fn = fn
        self.d = int(d)
        self.bound = float(bound)
        self.clip_output = bool(clip_output)
        self.name = name

    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            # A bare vector is a batch of scalars when d == 1, else one point.
            x = x[:, None] if self.d == 1 else x[None, :]
        if x.shape[-1] != self.d:
            raise ValueError(f"points must have {self.d} coordinates")
        return x

    def eval_pairs(self, s, t) -> np.ndarray:
        """Evaluate at paired points; s, t are (N, d) (broadcast from scalars)."""
        s = self._as_points(s)
        t = self._as_points(t)
        if s.shape != t.shape:
            s, t = np.broadcast_arrays(s, t)
        vals = np.asarray(self._fn(s, t), dtype=float)
        if self.clip_output:
            vals = np.clip(vals, -self.bound, self.bound)
        return vals

    def __call__(self, s, t) -> float:
        return float(self.eval_pairs(s, t)[0])

    def __repr__(self):
        tag = self.name or "field"
        return f"CovarianceField({tag}, d={self.d}, bound={self.bound:g})"


def constant_field(value: float, d: int = 1, bound: float | None = None) -> CovarianceField:
    """Field that is identically `value`; handy for tests and baselines."""
    if bound is None:
        bound = max(abs(value), 1e-12)
    return CovarianceField(
        lambda s, t, v=float(value): np.full(s.shape[0], v), d=d, bound=bound, name="constant"
    )


def canonical_pair_order(s: np.ndarray, t: np.ndarray):
    """Reorder each pair (s_i, t_i) so the lexicographically smaller point is first.

    Fields backed by inherently symmetric data (grids, WLS fits) evaluate on
    the canonical order, which makes their symmetry exact in floating point.
    """
    swap = np.zeros(s.shape[0], dtype=bool)
    undecided = np.ones(s.shape[0], dtype=bool)
    for a in range(s.shape[1]):
        gt = undecided & (s[:, a] > t[:, a])
        lt = undecided & (s[:, a] < t[:, a])
        swap |= gt
        undecided &= ~(gt | lt)
    if not swap.any():
        return s, t
    s2 = np.where(swap[:, None], t, s)
    t2 = np.where(swap[:, None], s, t)
    return s2, t2


def field_difference_sup(a: CovarianceField, b: CovarianceField, grid) -> float:
    """Max of |a - b| over all pairs from a grid of points (a sup-norm lower bound)."""
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.size == 0:
        raise ValueError("grid must be nonempty")
    g = pts.shape[0]
    ss = np.repeat(pts, g, axis=0)
    tt = np.tile(pts, (g, 1))
    diff = a.eval_pairs(ss, tt) - b.eval_pairs(ss, tt)
    return float(np.max(np.abs(diff)))
