"""Experiment orchestration over (n, m) grids with slope and transition fits.

A plan runs every estimator on shared per-cell datasets across replicates,
measures squared L2 risk against the known truth, aggregates by median, and
fits log-log slopes plus a two-segment phase-transition detector. Reports
carry the theoretical exponents next to the empirical ones so they are
self-auditing. All randomness is derived from the plan's master seed, so a
rerun reproduces results.csv byte for byte (wall times go to a separate,
explicitly non-deterministic timings file).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import dnn, loclin, spectral
from .core import NoiseSpec, SeedSpec, stream_key
from .postrisk import l2_risk, node_risk, psd_project_weighted, gauss_legendre_01
from .synth import TruthSpec, generate_dataset

POLYLOG_NOTE = (
    "empirical slopes are compared against pure power laws; polylogarithmic "
    "factors in the theoretical bounds are invisible at this scale"
)


def child_seed(seed: SeedSpec, tag: str, replicate: int = 0) -> SeedSpec:
    """Derived master seed for a sub-experiment."""
    return SeedSpec(master=stream_key(seed, tag, replicate))


# ---------------------------------------------------------------------------
# Estimator specs


@dataclass(frozen=True)
class SpectralSpec:
    """Hyperbolic-cross Fourier LS; M from theory unless fixed."""

    alpha: float = 2.0
    c_M: float = 1.0
    M: int | None = None
    ridge: float | None = None

    name = "spectral"

    def fit(self, data, seed: SeedSpec, bound: float):
        M = self.M if self.M is not None else spectral.m_from_theory(
            data.n, data.m, self.alpha, self.c_M
        )
        fit = spectral.fit_spectral(data, M, ridge=self.ridge)
        return spectral.spectral_field(fit, bound=bound), {"M": M, "fit": fit}

    def theory_slope(self) -> float:
        return -2.0 * self.alpha / (2.0 * self.alpha + 1.0)

    def phase_exponent(self) -> float:
        return 1.0 / (2.0 * self.alpha)


@dataclass(frozen=True)
class LoclinSpec:
    """Local linear smoother; bandwidth fixed, plug-in order, or CV-selected."""

    bandwidth: float | None = None
    c_h: float = 1.0
    cv_candidates: tuple = ()
    cv_folds: int = 5
    grid_size: int = 65
    ridge: float = 1e-10

    name = "loclin"

    def fit(self, data, seed: SeedSpec, bound: float):
        if self.bandwidth is not None:
            h = self.bandwidth
        elif self.cv_candidates:
            h = loclin.select_bandwidth(
                data, self.cv_candidates, self.cv_folds, seed, bound=bound
            )
        else:
            h = loclin.bandwidth_from_theory(data.n, data.m, self.c_h)
        cfg = loclin.LoclinConfig(
            bandwidth=h, ridge=self.ridge, grid_size=self.grid_size
        )
        return loclin.loclin_field(data, cfg, bound=bound), {"bandwidth": h}

    def theory_slope(self) -> float:
        return -2.0 / 3.0

    def phase_exponent(self) -> float:
        # parametric regime once sqrt(n) = O(m^2)
        return 0.25


@dataclass(frozen=True)
class DnnSpec:
    """Symmetrized ReLU network trained on the pairwise loss; theory-sized."""

    regime: str = "tensor_sobolev"
    alpha: float | None = 2.0
    beta_tilde: float | None = None
    c_L: float = 1.0
    c_W: float = 1.0
    include_log_factors: bool = False
    max_L: int = 16
    max_W: int = 512
    step_size: float = 0.05
    momentum: float = 0.9
    epochs: int = 250
    step_decay: float = 0.995
    batch: str = "auto"

    name = "dnn"

    def arch(self, n: int, m: int):
        return dnn.arch_from_theory(
            n,
            m,
            beta_tilde=self.beta_tilde,
            c_L=self.c_L,
            c_W=self.c_W,
            regime=self.regime,
            alpha=self.alpha,
            include_log_factors=self.include_log_factors,
            max_L=self.max_L,
            max_W=self.max_W,
        )

    def fit(self, data, seed: SeedSpec, bound: float):
        L, W = self.arch(data.n, data.m)
        cfg = dnn.TrainConfig(
            step_size=self.step_size,
            momentum=self.momentum,
            epochs=self.epochs,
            step_decay=self.step_decay,
            batch=self.batch,
            bound=bound,
            seed=seed,
        )
        fld = dnn.train(data, (L, W), cfg)
        return fld, {"L": L, "W": W, "train_loss": fld.train_loss}

    def theory_slope(self) -> float:
        if self.regime == "tensor_sobolev":
            return -2.0 * self.alpha / (2.0 * self.alpha + 1.0)
        return -self.beta_tilde / (self.beta_tilde + 1.0)

    def phase_exponent(self) -> float:
        if self.regime == "tensor_sobolev":
            return 1.0 / (2.0 * self.alpha)
        return 1.0 / self.beta_tilde


# ---------------------------------------------------------------------------
# Plan and report


@dataclass(frozen=True)
class RiskConfig:
    nodes: int = 64
    compute_psd: bool = False


@dataclass(frozen=True)
class ExperimentPlan:
    truth: TruthSpec
    estimators: tuple
    n_grid: tuple
    m_grid: tuple
    replicates: int
    noise: NoiseSpec = NoiseSpec(sigma=0.5)
    seed: SeedSpec = dc_field(default_factory=SeedSpec)
    risk: RiskConfig = RiskConfig()
    bound_margin: float = 1.5

    def __post_init__(self):
        if not self.n_grid or not self.m_grid:
            raise ValueError("n and m grids must be nonempty")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")


@dataclass
class Row:
    n: int
    m: int
    replicate: int
    estimator: str
    risk: float
    risk_psd: float | None
    wall_time: float
    info: dict


@dataclass
class RateReport:
    rows: list
    failures: list
    medians: dict  # (estimator, n, m) -> median risk
    slopes: list  # dicts with empirical + theoretical exponents
    transitions: list

    def median(self, estimator: str, n: int, m: int) -> float:
        return self.medians[(estimator, n, m)]


def _risk_pair(field, truth_field, risk_cfg: RiskConfig, d: int):
    raw = l2_risk(field, truth_field, d=d, nodes=risk_cfg.nodes)
    psd = None
    if risk_cfg.compute_psd and d == 1:
        x, w = gauss_legendre_01(risk_cfg.nodes)
        pts = x[:, None]
        g = x.size
        ss = np.repeat(pts, g, axis=0)
        tt = np.tile(pts, (g, 1))
        est_vals = field.eval_pairs(ss, tt).reshape(g, g)
        tru_vals = truth_field.eval_pairs(ss, tt).reshape(g, g)
        projected = psd_project_weighted(est_vals, w)
        psd = node_risk(projected, tru_vals, w)
    return raw.value, psd


def run_plan(plan: ExperimentPlan, threads: int = 1) -> RateReport:
    """Execute the plan; estimator failures are recorded, never fatal."""
    truth_field = plan.truth.field()
    bound = plan.bound_margin * truth_field.bound
    d = plan.truth.d

    tasks = [
        (n, m, rep)
        for n in plan.n_grid
        for m in plan.m_grid
        for rep in range(plan.replicates)
    ]

    def run_task(task):
        n, m, rep = task
        data = generate_dataset(
            plan.truth, n, m, plan.noise,
            child_seed(plan.seed, f"data-n{n}-m{m}", rep),
        )
        out_rows, out_failures = [], []
        for est in plan.estimators:
            t0 = time.perf_counter()
            try:
                fld, info = est.fit(
                    data, child_seed(plan.seed, f"fit-{est.name}-n{n}-m{m}", rep), bound
                )
                risk, risk_psd = _risk_pair(fld, truth_field, plan.risk, d)
                wall = time.perf_counter() - t0
                out_rows.append(Row(n, m, rep, est.name, risk, risk_psd, wall, info))
            except Exception as exc:  # noqa: BLE001 - failures become report rows
                out_failures.append(
                    {"n": n, "m": m, "replicate": rep, "estimator": est.name, "error": str(exc)}
                )
        return out_rows, out_failures

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_task, tasks))
    else:
        results = [run_task(t) for t in tasks]

    rows, failures = [], []
    for out_rows, out_failures in results:
        rows.extend(out_rows)
        failures.extend(out_failures)

    medians = {}
    for est in plan.estimators:
        for n in plan.n_grid:
            for m in plan.m_grid:
                risks = [r.risk for r in rows if (r.estimator, r.n, r.m) == (est.name, n, m)]
                if risks:
                    medians[(est.name, n, m)] = float(np.median(risks))

    slopes = []
    for est in plan.estimators:
        for m in plan.m_grid:
            pts = [
                (n, medians[(est.name, n, m)])
                for n in plan.n_grid
                if (est.name, n, m) in medians and medians[(est.name, n, m)] > 0
            ]
            if len(pts) >= 3:
                slope, intercept, stderr = fit_slope(pts)
                slopes.append(
                    {
                        "estimator": est.name,
                        "fixed_m": m,
                        "versus": "n",
                        "slope": slope,
                        "intercept": intercept,
                        "stderr": stderr,
                        "theory_slope": est.theory_slope(),
                        "points": len(pts),
                    }
                )

    transitions = []
    for est in plan.estimators:
        for n in plan.n_grid:
            pts = [
                (m, medians[(est.name, n, m)])
                for m in plan.m_grid
                if (est.name, n, m) in medians and medians[(est.name, n, m)] > 0
            ]
            if len(pts) >= 6:
                m_star, pre, post = detect_phase_transition(pts, 1.0 / est.phase_exponent())
                transitions.append(
                    {
                        "estimator": est.name,
                        "n": n,
                        "m_star": m_star,
                        "pre_slope": pre,
                        "post_slope": post,
                        "predicted_m_star": float(n ** est.phase_exponent()),
                        "note": "prediction m* = n^(1/beta_tilde) up to constants",
                    }
                )

    return RateReport(rows=rows, failures=failures, medians=medians, slopes=slopes, transitions=transitions)


# ---------------------------------------------------------------------------
# Slope and transition fits


def fit_slope(points):
    """OLS of log(risk) on log(x); returns (slope, intercept, stderr of slope)."""
    pts = [(float(x), float(r)) for x, r in points]
    if len(pts) < 3:
        raise ValueError("need at least 3 points to fit a slope")
    if any(x <= 0 or r <= 0 for x, r in pts):
        raise ValueError("slope fit requires positive coordinates")
    lx = np.log([x for x, _ in pts])
    ly = np.log([r for _, r in pts])
    xbar = lx.mean()
    sxx = float(np.sum((lx - xbar) ** 2))
    slope = float(np.sum((lx - xbar) * (ly - ly.mean())) / sxx)
    intercept = float(ly.mean() - slope * xbar)
    resid = ly - (intercept + slope * lx)
    dof = len(pts) - 2
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    return slope, intercept, math.sqrt(sigma2 / sxx)


def _segment_ssr(lx, ly):
    if lx.size == 2:
        return 0.0, (ly[1] - ly[0]) / (lx[1] - lx[0])
    xbar = lx.mean()
    sxx = float(np.sum((lx - xbar) ** 2))
    slope = float(np.sum((lx - xbar) * (ly - ly.mean())) / sxx)
    intercept = float(ly.mean() - slope * xbar)
    resid = ly - (intercept + slope * lx)
    return float(resid @ resid), slope


def detect_phase_transition(risks, beta_tilde: float):
    """Two-segment log-log fit over (m, risk) at fixed n.

    The breakpoint minimizes total squared residual over splits with at
    least two points per segment; ties break toward the latest split, so a
    single clean power law reports its breakpoint at an endpoint. Returns
    (m_star, pre_slope, post_slope) with m_star the geometric midpoint of
    the straddling m values.
    """
    if beta_tilde <= 0:
        raise ValueError("beta_tilde must be positive")
    pts = sorted((float(m), float(r)) for m, r in risks)
    if len(pts) < 6:
        raise ValueError("need at least 6 m values to detect a transition")
    if any(m <= 0 or r <= 0 for m, r in pts):
        raise ValueError("transition detection requires positive coordinates")
    lx = np.log([m for m, _ in pts])
    ly = np.log([r for _, r in pts])
    best = None
    for k in range(2, len(pts) - 1):
        ssr1, s1 = _segment_ssr(lx[:k], ly[:k])
        ssr2, s2 = _segment_ssr(lx[k:], ly[k:])
        total = ssr1 + ssr2
        if best is None or total <= best[0] + 1e-9 * (1.0 + best[0]):
            best = (total, k, s1, s2)
    _, k, pre, post = best
    m_star = math.sqrt(pts[k - 1][0] * pts[k][0])
    return m_star, pre, post


# ---------------------------------------------------------------------------
# Report emission (schemas documented in docs/formats.md)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def results_csv_text(report: RateReport) -> str:
    """Deterministic long-format CSV of per-replicate risks."""
    lines = ["n,m,replicate,estimator,risk,risk_psd"]
    for r in report.rows:
        lines.append(f"{r.n},{r.m},{r.replicate},{r.estimator},{_fmt(r.risk)},{_fmt(r.risk_psd)}")
    for f in report.failures:
        lines.append(f"{f['n']},{f['m']},{f['replicate']},{f['estimator']},,")
    return "\n".join(lines) + "\n"


def timings_csv_text(report: RateReport) -> str:
    """Wall times per fit; this file is diagnostic and not deterministic."""
    lines = ["n,m,replicate,estimator,wall_time_s"]
    for r in report.rows:
        lines.append(f"{r.n},{r.m},{r.replicate},{r.estimator},{r.wall_time:.6f}")
    return "\n".join(lines) + "\n"


def slopes_document(report: RateReport) -> dict:
    return {"note": POLYLOG_NOTE, "slopes": report.slopes}


def transitions_document(report: RateReport) -> dict:
    return {"note": POLYLOG_NOTE, "transitions": report.transitions}
