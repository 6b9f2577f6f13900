"""Symmetrized ReLU network covariance model with hand-rolled training.

The network maps a concatenated pair (s, t) in [0,1]^(2d) to a scalar
through L hidden layers of common width W; the covariance model is the
symmetrization (h(s,t) + h(t,s)) / 2, which is exactly symmetric by
construction. Training minimizes the pairwise least-squares loss with
full-batch gradient descent plus momentum; a split-pair re-pairing scheme
gives an unbiased cheap gradient when the pair count is large.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import CovarianceField, FunctionalDataset, SeedSpec, derive_stream
from .pairloss import _ordered_pair_index

CHECKPOINT_MAGIC = b"COVFMLP\x00"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training loss exploded; carries the loss trajectory seen so far."""

    def __init__(self, message: str, trajectory):
        super().__init__(message)
        self.trajectory = list(trajectory)


@dataclass
class MlpParams:
    """Weights and biases of a depth-L, width-W ReLU network on R^(2d).

    weights[0] is (W, 2d), weights[1..L-1] are (W, W), weights[L] is (1, W).
    biases[l] (length W) feeds the activation after weights[l]; the final
    activation uses the scalar bias_last broadcast across the layer.
    """

    depth: int
    width: int
    d: int
    weights: list
    biases: list
    bias_last: float = 0.0

    def __post_init__(self):
        L, W, din = self.depth, self.width, 2 * self.d
        if L < 1 or W < 1 or self.d < 1:
            raise ValueError("need depth >= 1, width >= 1, d >= 1")
        shapes = [(W, din)] + [(W, W)] * (L - 1) + [(1, W)]
        if len(self.weights) != L + 1 or [w.shape for w in self.weights] != shapes:
            raise ValueError("weight shapes inconsistent with (L, W, d)")
        if len(self.biases) != L - 1 or any(b.shape != (W,) for b in self.biases):
            raise ValueError("bias shapes inconsistent with (L, W)")
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite weight")

    def copy(self) -> "MlpParams":
        return MlpParams(
            depth=self.depth,
            width=self.width,
            d=self.d,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bias_last=self.bias_last,
        )

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases) + 1


def init_params(L: int, W: int, d: int, seed: SeedSpec, zero: bool = False) -> MlpParams:
    """He-style initialization: weights ~ N(0, 2/fan_in), biases zero.

    zero=True returns the all-zero network (useful as a degenerate baseline).
    """
    rng = derive_stream(seed, "dnn-init", 0)
    din = 2 * d
    shapes = [(W, din)] + [(W, W)] * (L - 1) + [(1, W)]
    weights = []
    for shape in shapes:
        if zero:
            weights.append(np.zeros(shape))
        else:
            weights.append(rng.standard_normal(shape) * math.sqrt(2.0 / shape[1]))
    biases = [np.zeros(W) for _ in range(L - 1)]
    return MlpParams(depth=L, width=W, d=d, weights=weights, biases=biases, bias_last=0.0)


def _forward_batch(params: MlpParams, x: np.ndarray, keep_cache: bool = False):
    """Network values for rows of x (N, 2d); optionally keep activations."""
    L = params.depth
    h = x @ params.weights[0].T
    pre = [h] if keep_cache else None
    acts = [x] if keep_cache else None
    for l in range(1, L + 1):
        b = params.biases[l - 1] if l < L else params.bias_last
        a = np.maximum(h - b, 0.0)
        if keep_cache:
            acts.append(a)
        h = a @ params.weights[l].T
        if keep_cache and l < L:
            pre.append(h)
    out = h[:, 0]
    if keep_cache:
        return out, pre, acts
    return out


def forward(params: MlpParams, x) -> float:
    """Scalar network value at a single input of length 2d."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != 2 * params.d:
        raise ValueError("input must have length 2d")
    return float(_forward_batch(params, x))


def sym_eval(params: MlpParams, s, t):
    """Symmetrized value (h(s,t) + h(t,s)) / 2; exact under argument swap."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    t = np.atleast_2d(np.asarray(t, dtype=float))
    fwd = _forward_batch(params, np.concatenate([s, t], axis=1))
    rev = _forward_batch(params, np.concatenate([t, s], axis=1))
    vals = 0.5 * (fwd + rev)
    return vals if vals.size > 1 else float(vals[0])


def _zero_like(params: MlpParams):
    return (
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        0.0,
    )


def _backprop(params: MlpParams, x: np.ndarray, dout: np.ndarray):
    """Gradient of sum_p dout_p * F(x_p) with respect to all parameters."""
    L = params.depth
    _, pre, acts = _forward_batch(params, x, keep_cache=True)
    gw = [None] * (L + 1)
    gb = [np.zeros_like(b) for b in params.biases]
    gb_last = 0.0
    delta = dout[:, None]  # gradient w.r.t. layer output h_l
    for l in range(L, 0, -1):
        gw[l] = delta.T @ acts[l]
        da = delta @ params.weights[l]
        b = params.biases[l - 1] if l < L else params.bias_last
        mask = (pre[l - 1] - b) > 0.0  # subgradient 0 at the kink
        dpre = da * mask
        dbias = -dpre.sum(axis=0)
        if l < L:
            gb[l - 1] = dbias
        else:
            gb_last = float(dbias.sum())
        delta = dpre
    gw[0] = delta.T @ acts[0]
    return gw, gb, gb_last


def _pair_tensors(data: FunctionalDataset):
    jdx, kdx = _ordered_pair_index(data.m)
    loc = data.locations
    s = loc[:, jdx, :].reshape(-1, data.d)
    t = loc[:, kdx, :].reshape(-1, data.d)
    x = np.concatenate([s, t], axis=1)
    prod = (data.values[:, jdx] * data.values[:, kdx]).ravel()
    # position of the reversed ordered pair within a subject block
    pos = {(a, b): idx for idx, (a, b) in enumerate(zip(jdx, kdx))}
    swap_block = np.array([pos[(b, a)] for a, b in zip(jdx, kdx)])
    npairs = jdx.size
    swap = (
        np.repeat(np.arange(data.n) * npairs, npairs) + np.tile(swap_block, data.n)
    )
    return x, prod, swap


def loss_and_gradient(params: MlpParams, data: FunctionalDataset):
    """Pairwise LS loss of the symmetrized network and its exact gradient.

    The loss agrees with pairloss.full_pair_loss on the unclipped symmetrized
    field; the gradient is reverse-mode through the network with ReLU
    subgradient 0 at kinks.
    """
    if data.m < 2:
        raise ValueError("need at least two measurements")
    x, prod, swap = _pair_tensors(data)
    return _loss_grad_on_pairs(params, x, prod, swap, data.n * data.m * (data.m - 1))


def _loss_grad_on_pairs(params: MlpParams, x, prod, swap, count):
    fvals = _forward_batch(params, x)
    kvals = 0.5 * (fvals + fvals[swap]) if swap is not None else fvals
    resid = prod - kvals
    loss = float(np.sum(resid * resid)) / count
    if not np.isfinite(loss):
        raise DivergenceError("numerical overflow; reduce step size", [])
    # d loss / d F_p = -2/count * resid_p (residuals are swap-symmetric)
    dout = (-2.0 / count) * resid
    gw, gb, gb_last = _backprop(params, x, dout)
    return loss, (gw, gb, gb_last)


@dataclass(frozen=True)
class TrainConfig:
    """First-order training configuration for the network covariance model."""

    step_size: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    step_decay: float = 0.995
    batch: str = "auto"  # full | split | auto
    bound: float = 10.0
    seed: SeedSpec = field(default_factory=SeedSpec)
    track_best: bool = True
    divergence_limit: float = 1e12
    auto_split_threshold: int = 200_000

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch not in ("full", "split", "auto"):
            raise ValueError("batch must be full, split, or auto")


class DnnField(CovarianceField):
    """Trained network as a covariance field; keeps params and trajectory."""

    def __init__(self, params: MlpParams, bound: float, trajectory=None, train_loss=None):
        self.params = params
        self.trajectory = list(trajectory or [])
        self.train_loss = train_loss

        def fn(s, t):
            return np.atleast_1d(sym_eval(params, s, t))

        super().__init__(fn, d=params.d, bound=bound, clip_output=True, name="dnn")


def train(data: FunctionalDataset, arch, cfg: TrainConfig) -> DnnField:
    """Fit the symmetrized network by momentum gradient descent.

    Returns the best iterate seen (lowest recorded training loss), wrapped as
    a clipped CovarianceField. Deterministic given (data, arch, cfg).
    """
    L, W = arch
    params = init_params(L, W, data.d, cfg.seed)
    use_split = cfg.batch == "split" or (
        cfg.batch == "auto" and data.n * data.m * (data.m - 1) > cfg.auto_split_threshold
    )
    if not use_split:
        x, prod, swap = _pair_tensors(data)
        count = data.n * data.m * (data.m - 1)
    else:
        perm_rng = derive_stream(cfg.seed, "dnn-batch", 0)
        half = data.m // 2

    vel_w, vel_b, vel_bl = _zero_like(params)
    best = params.copy()
    best_loss = math.inf
    trajectory = []
    lr = cfg.step_size
    for epoch in range(cfg.epochs):
        if use_split:
            orders = np.argsort(perm_rng.random((data.n, data.m)), axis=1)
            rows = np.arange(data.n)[:, None]
            left, right = orders[:, :half], orders[:, half : 2 * half]
            s = data.locations[rows, left, :].reshape(-1, data.d)
            t = data.locations[rows, right, :].reshape(-1, data.d)
            prod = (data.values[rows, left] * data.values[rows, right]).ravel()
            # use both orderings so the stochastic objective is symmetric too
            x = np.concatenate(
                [np.concatenate([s, t], axis=1), np.concatenate([t, s], axis=1)], axis=0
            )
            prod = np.concatenate([prod, prod])
            npair = s.shape[0]
            swap = np.concatenate([np.arange(npair) + npair, np.arange(npair)])
            count = x.shape[0]
        try:
            loss, (gw, gb, gbl) = _loss_grad_on_pairs(params, x, prod, swap, count)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), trajectory) from None
        trajectory.append(loss)
        if loss > cfg.divergence_limit:
            raise DivergenceError("training diverged; reduce step size", trajectory)
        if cfg.track_best and loss < best_loss:
            best_loss = loss
            best = params.copy()
        for l in range(L + 1):
            vel_w[l] = cfg.momentum * vel_w[l] - lr * gw[l]
            params.weights[l] = params.weights[l] + vel_w[l]
        for l in range(L - 1):
            vel_b[l] = cfg.momentum * vel_b[l] - lr * gb[l]
            params.biases[l] = params.biases[l] + vel_b[l]
        vel_bl = cfg.momentum * vel_bl - lr * gbl
        params.bias_last = params.bias_last + vel_bl
        lr *= cfg.step_decay
    # final iterate competes too
    try:
        final_loss, _ = _loss_grad_on_pairs(params, x, prod, swap, count)
        trajectory.append(final_loss)
        if not cfg.track_best or final_loss < best_loss:
            best_loss, best = final_loss, params.copy()
    except DivergenceError:
        pass
    return DnnField(best, bound=cfg.bound, trajectory=trajectory, train_loss=best_loss)


def arch_from_theory(
    n: int,
    m: int,
    beta_tilde: float | None = None,
    c_L: float = 1.0,
    c_W: float = 1.0,
    regime: str = "besov",
    alpha: float | None = None,
    include_log_factors: bool = False,
    max_L: int = 16,
    max_W: int = 512,
):
    """Depth and width scalings from the convergence-rate analysis.

    besov: L = ceil(c_L log N), W = ceil(c_W N^(1/(beta_tilde+1))) with
    N = n floor(m/2). tensor_sobolev: width exponent 1/(2 alpha + 1); with
    include_log_factors the depth picks up log^3 and the width log^5, which
    is far beyond desk scale and therefore off by default. Both are capped.
    """
    if m < 2 or n < 1:
        raise ValueError("need n >= 1, m >= 2")
    N = n * (m // 2)
    logN = math.log(max(N, 2))
    if regime == "besov":
        if beta_tilde is None or beta_tilde <= 0:
            raise ValueError("besov regime needs beta_tilde > 0")
        L = math.ceil(c_L * logN)
        W = math.ceil(c_W * N ** (1.0 / (beta_tilde + 1.0)))
    elif regime == "tensor_sobolev":
        if alpha is None or alpha <= 0:
            raise ValueError("tensor_sobolev regime needs alpha > 0")
        wbase = N ** (1.0 / (2.0 * alpha + 1.0))
        if include_log_factors:
            L = math.ceil(c_L * logN**3)
            W = math.ceil(c_W * wbase * logN**5)
        else:
            L = math.ceil(c_L * logN)
            W = math.ceil(c_W * wbase)
    else:
        raise ValueError("regime must be besov or tensor_sobolev")
    return max(1, min(L, max_L)), max(1, min(W, max_W))


def save_checkpoint(params: MlpParams, bound: float, path) -> None:
    """Versioned little-endian binary: magic, dims, then row-major f64 arrays."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, params.depth, params.width, params.d))
        fh.write(struct.pack("<d", bound))
        for w in params.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        for b in params.biases:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", params.bias_last))


def load_checkpoint(path):
    """Read a checkpoint; returns (MlpParams, bound)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a network checkpoint (bad magic)")
        version, L, W, d = struct.unpack("<IIII", fh.read(16))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (bound,) = struct.unpack("<d", fh.read(8))
        shapes = [(W, 2 * d)] + [(W, W)] * (L - 1) + [(1, W)]
        weights = []
        for shape in shapes:
            count = shape[0] * shape[1]
            weights.append(
                np.frombuffer(fh.read(8 * count), dtype="<f8").astype(float).reshape(shape)
            )
        biases = [
            np.frombuffer(fh.read(8 * W), dtype="<f8").astype(float) for _ in range(L - 1)
        ]
        (bias_last,) = struct.unpack("<d", fh.read(8))
    params = MlpParams(depth=L, width=W, d=d, weights=weights, biases=biases, bias_last=bias_last)
    return params, bound


def params_to_json(params: MlpParams, bound: float) -> str:
    doc = {
        "depth": params.depth,
        "width": params.width,
        "d": params.d,
        "bound": bound,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "bias_last": params.bias_last,
    }
    return json.dumps(doc, sort_keys=True)
