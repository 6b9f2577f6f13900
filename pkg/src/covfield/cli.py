"""Command-line surface: simulate / fit / risk / sweep / import.

All commands are driven by a JSON config validated against a published
schema before any work starts. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical failure. File formats are documented in
docs/formats.md; every command is deterministic given its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import jsonschema
import numpy as np

from . import dnn, loclin, spectral, sweep
from .core import FunctionalDataset, NoiseSpec, SeedSpec
from .pairloss import full_pair_loss
from .postrisk import (
    gauss_legendre_01,
    l2_risk,
    node_risk,
    psd_project_weighted,
    to_grid,
)
from .synth import (
    AnisotropicSmoothTruth,
    SpectralCoefficients,
    TensorSobolevTruth,
    TruthSpec,
    generate_dataset,
    make_psd_coeffs,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATASET_KIND = "covfield-dataset"
ESTIMATOR_NAMES = ("dnn", "loclin", "spectral")

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "seed", "truth", "data"],
    "additionalProperties": True,
    "properties": {
        "schema_version": {"const": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "truth": {
            "type": "object",
            "required": ["family"],
            "properties": {
                "family": {"enum": ["tensor_sobolev", "anisotropic_smooth"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "J": {"type": "integer", "minimum": 1},
                "target_norm": {"type": "number", "exclusiveMinimum": 0},
                "coeff_seed": {"type": "integer", "minimum": 0},
                "freq_decay": {"type": "number"},
                "c": {"type": "array"},
                "length_scales": {"type": "array", "items": {"type": "number"}},
                "variance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "data": {
            "type": "object",
            "required": ["n", "m"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "m": {"type": "integer", "minimum": 2},
                "noise": {
                    "type": "object",
                    "properties": {
                        "kind": {"enum": ["gaussian"]},
                        "sigma": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "estimators": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name"],
                "properties": {"name": {"enum": list(ESTIMATOR_NAMES)}},
            },
        },
        "risk": {
            "type": "object",
            "properties": {
                "nodes": {"type": "integer", "minimum": 4},
                "grid": {"type": "integer", "minimum": 2},
                "compute_psd": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "required": ["n_grid", "m_grid", "replicates"],
            "properties": {
                "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "m_grid": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
                "replicates": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fail(message: str, code: int):
    raise CliError(message, code)


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        _fail(f"cannot read config: {exc}", EXIT_CONFIG)
    except json.JSONDecodeError as exc:
        _fail(f"config is not valid JSON: {exc}", EXIT_CONFIG)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        _fail(f"config schema violation at {exc.json_path}: {exc.message}", EXIT_CONFIG)
    return cfg


def build_truth(cfg: dict) -> TruthSpec:
    t = cfg["truth"]
    if t["family"] == "tensor_sobolev":
        alpha = float(t.get("alpha", 2.0))
        if "c" in t:
            coeffs = SpectralCoefficients(alpha, np.asarray(t["c"], dtype=float))
        else:
            coeffs = make_psd_coeffs(
                alpha,
                int(t.get("J", 21)),
                float(t.get("target_norm", 1.0)),
                SeedSpec(int(t.get("coeff_seed", cfg["seed"]))),
                freq_decay=float(t.get("freq_decay", 1.0)),
            )
        return TruthSpec(TensorSobolevTruth(coeffs))
    return TruthSpec(
        AnisotropicSmoothTruth(
            length_scales=tuple(t.get("length_scales", [0.25])),
            variance=float(t.get("variance", 1.0)),
        )
    )


def truth_digest(cfg: dict) -> str:
    blob = json.dumps(cfg["truth"], sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_noise(cfg: dict) -> NoiseSpec:
    noise = cfg["data"].get("noise", {})
    return NoiseSpec(sigma=float(noise.get("sigma", 0.0)), kind=noise.get("kind", "gaussian"))


def _estimator_cfg(cfg: dict, name: str) -> dict:
    for entry in cfg.get("estimators", []):
        if entry["name"] == name:
            return entry
    return {"name": name}


def build_estimator(entry: dict):
    name = entry["name"]
    if name == "spectral":
        return sweep.SpectralSpec(
            alpha=float(entry.get("alpha", 2.0)),
            c_M=float(entry.get("c_M", 1.0)),
            M=entry.get("M"),
            ridge=entry.get("ridge"),
        )
    if name == "loclin":
        return sweep.LoclinSpec(
            bandwidth=entry.get("bandwidth"),
            c_h=float(entry.get("c_h", 1.0)),
            cv_candidates=tuple(entry.get("cv_candidates", ())),
            cv_folds=int(entry.get("cv_folds", 5)),
            grid_size=int(entry.get("grid_size", 65)),
        )
    if name == "dnn":
        return sweep.DnnSpec(
            regime=entry.get("regime", "tensor_sobolev"),
            alpha=entry.get("alpha", 2.0),
            beta_tilde=entry.get("beta_tilde"),
            c_L=float(entry.get("c_L", 1.0)),
            c_W=float(entry.get("c_W", 1.0)),
            include_log_factors=bool(entry.get("include_log_factors", False)),
            max_L=int(entry.get("max_L", 16)),
            max_W=int(entry.get("max_W", 512)),
            step_size=float(entry.get("step_size", 0.05)),
            momentum=float(entry.get("momentum", 0.9)),
            epochs=int(entry.get("epochs", 250)),
            step_decay=float(entry.get("step_decay", 0.995)),
            batch=entry.get("batch", "auto"),
        )
    _fail(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATOR_NAMES)}", EXIT_CONFIG)


def _atomic_write(path: str, text: str):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        _fail(f"cannot write {path}: {exc}", EXIT_DATA)


# ---------------------------------------------------------------------------
# Dataset serialization (JSON-lines; see docs/formats.md)


def dataset_to_text(dataset: FunctionalDataset, header_extra: dict) -> str:
    header = {
        "kind": DATASET_KIND,
        "version": 1,
        "d": dataset.d,
        "n": dataset.n,
        "m": dataset.m,
    }
    header.update(header_extra)
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for i in range(dataset.n):
        rec = {
            "i": i,
            "t": [[float(c) for c in pt] for pt in dataset.locations[i]],
            "y": [float(v) for v in dataset.values[i]],
        }
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def parse_dataset_text(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        _fail("dataset file is empty", EXIT_DATA)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        _fail(f"dataset header is not valid JSON: {exc}", EXIT_DATA)
    if header.get("kind") != DATASET_KIND:
        _fail("not a dataset file (bad kind)", EXIT_DATA)
    n, m, d = header.get("n"), header.get("m"), header.get("d")
    if len(lines) - 1 != n:
        _fail(f"dataset has {len(lines) - 1} records, header says n={n}", EXIT_DATA)
    locations = np.empty((n, m, d))
    values = np.empty((n, m))
    for ln in lines[1:]:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            _fail(f"bad dataset record: {exc}", EXIT_DATA)
        i = rec["i"]
        t = np.asarray(rec["t"], dtype=float)
        y = np.asarray(rec["y"], dtype=float)
        if t.shape != (m, d) or y.shape != (m,):
            _fail(f"subject {i}: expected {m} locations of dim {d}", EXIT_DATA)
        locations[i] = t
        values[i] = y
    try:
        dataset = FunctionalDataset(locations, values)
    except ValueError as exc:
        _fail(f"invalid dataset: {exc}", EXIT_DATA)
    return dataset, header


def load_dataset(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        _fail(f"cannot read dataset: {exc}", EXIT_DATA)
    return parse_dataset_text(text)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    truth = build_truth(cfg)
    noise = build_noise(cfg)
    data_cfg = cfg["data"]
    dataset = generate_dataset(
        truth, int(data_cfg["n"]), int(data_cfg["m"]), noise, SeedSpec(int(cfg["seed"]))
    )
    text = dataset_to_text(
        dataset, {"seed": int(cfg["seed"]), "truth_digest": truth_digest(cfg)}
    )
    _atomic_write(args.out, text)
    print(f"wrote {args.out}: n={dataset.n} m={dataset.m} d={dataset.d}")
    return EXIT_OK


def _model_paths(out: str):
    return out, f"{out}.header.json"


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    dataset, _ = load_dataset(args.dataset)
    if args.estimator not in ESTIMATOR_NAMES:
        _fail(
            f"unknown estimator {args.estimator!r}; valid: {', '.join(ESTIMATOR_NAMES)}",
            EXIT_CONFIG,
        )
    if args.estimator in ("loclin", "spectral") and dataset.d != 1:
        _fail(f"{args.estimator} requires d=1", EXIT_DATA)
    spec = build_estimator(_estimator_cfg(cfg, args.estimator))
    truth = build_truth(cfg)
    bound = float(cfg.get("risk", {}).get("bound", 1.5 * truth.field().bound))
    seed = sweep.child_seed(SeedSpec(int(cfg["seed"])), f"fit-{args.estimator}", 0)
    t0 = time.perf_counter()
    try:
        fld, info = spec.fit(dataset, seed, bound)
        train_loss = full_pair_loss(dataset, fld).value
    except dnn.DivergenceError as exc:
        _fail(f"numerical failure during fit: {exc}", EXIT_NUMERIC)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        _fail(f"numerical failure during fit: {exc}", EXIT_NUMERIC)
    wall = time.perf_counter() - t0

    if args.estimator == "spectral":
        doc = json.loads(spectral.fit_to_json(info["fit"]))
        doc["kind"] = "covfield-spectral"
        doc["bound"] = bound
        _atomic_write(args.out, json.dumps(doc, sort_keys=True) + "\n")
    elif args.estimator == "dnn":
        dnn.save_checkpoint(fld.params, bound, args.out)
        if args.json_export:
            _atomic_write(args.json_export, dnn.params_to_json(fld.params, bound) + "\n")
    else:  # loclin: export the memoized surface as a grid
        grid = to_grid(fld, int(cfg.get("risk", {}).get("grid", 65)), d=1)
        csv_path, header_path = _model_paths(args.out)
        lines = ["s_index,t_index,value"]
        g = grid.g
        for i in range(g):
            for j in range(g):
                lines.append(f"{i},{j},{repr(grid.values[i, j])}")
        _atomic_write(csv_path, "\n".join(lines) + "\n")
        _atomic_write(
            header_path,
            json.dumps(
                {"kind": "covfield-grid", "g": g, "d": 1, "bound": bound, "info": info},
                sort_keys=True,
            )
            + "\n",
        )
    metrics = {"train_loss": train_loss, "wall_time": wall}
    metrics_path = args.metrics or f"{args.out}.metrics.json"
    _atomic_write(metrics_path, json.dumps(metrics, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def load_model_field(path: str):
    """Detect and load a model file; returns (CovarianceField, kind)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == dnn.CHECKPOINT_MAGIC:
        params, bound = dnn.load_checkpoint(path)
        return dnn.DnnField(params, bound=bound), "dnn"
    text = open(path, "r", encoding="utf-8").read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(text)
        if doc.get("kind") == "covfield-spectral":
            fit = spectral.fit_from_json(text)
            return spectral.spectral_field(fit, bound=float(doc["bound"])), "spectral"
        _fail("unrecognized model JSON", EXIT_DATA)
    # grid CSV with JSON header sidecar
    _, header_path = _model_paths(path)
    try:
        header = json.loads(open(header_path, "r", encoding="utf-8").read())
    except OSError:
        _fail(f"missing grid header {header_path}", EXIT_DATA)
    g, d = int(header["g"]), int(header["d"])
    values = np.zeros((g**d, g**d))
    lines = text.splitlines()[1:]
    for ln in lines:
        if not ln.strip():
            continue
        i, j, v = ln.split(",")
        values[int(i), int(j)] = float(v)
    from .postrisk import GridField

    gf = GridField(np.linspace(0.0, 1.0, g), d, 0.5 * (values + values.T))
    return gf.as_field(bound=float(header["bound"])), "grid"


def cmd_risk(args) -> int:
    cfg = load_config(args.config)
    field, _ = load_model_field(args.model)
    truth = build_truth(cfg)
    truth_field = truth.field()
    if field.d != truth_field.d:
        _fail(
            f"model dimension d={field.d} does not match truth d={truth_field.d}",
            EXIT_DATA,
        )
    nodes = int(cfg.get("risk", {}).get("nodes", 64))
    raw = l2_risk(field, truth_field, d=truth_field.d, nodes=nodes)
    if truth_field.d == 1:
        # PSD-projected risk in the quadrature geometry: project the node
        # value matrix in the weighted norm, so risk_psd <= risk_raw holds.
        x, w = gauss_legendre_01(nodes)
        pts = x[:, None]
        ss = np.repeat(pts, x.size, axis=0)
        tt = np.tile(pts, (x.size, 1))
        est_vals = field.eval_pairs(ss, tt).reshape(x.size, x.size)
        tru_vals = truth_field.eval_pairs(ss, tt).reshape(x.size, x.size)
        risk_psd = node_risk(psd_project_weighted(est_vals, w), tru_vals, w)
    else:
        risk_psd = raw.value
    doc = {
        "risk_raw": raw.value,
        "risk_psd": risk_psd,
        "method": raw.method,
        "nodes": raw.nodes,
    }
    text = json.dumps(doc, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    for section in ("sweep", "estimators", "output_dir"):
        if section not in cfg:
            _fail(f"sweep command requires a {section!r} section in the config", EXIT_CONFIG)
    truth = build_truth(cfg)
    noise = build_noise(cfg)
    estimators = tuple(build_estimator(e) for e in cfg["estimators"])
    risk_cfg = sweep.RiskConfig(
        nodes=int(cfg.get("risk", {}).get("nodes", 64)),
        compute_psd=bool(cfg.get("risk", {}).get("compute_psd", False)),
    )
    plan = sweep.ExperimentPlan(
        truth=truth,
        estimators=estimators,
        n_grid=tuple(cfg["sweep"]["n_grid"]),
        m_grid=tuple(cfg["sweep"]["m_grid"]),
        replicates=int(cfg["sweep"]["replicates"]),
        noise=noise,
        seed=SeedSpec(int(cfg["seed"])),
        risk=risk_cfg,
    )
    out_dir = cfg["output_dir"]
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        _fail(f"output dir not writable: {exc}", EXIT_DATA)
    report = sweep.run_plan(plan, threads=args.threads)
    _atomic_write(os.path.join(out_dir, "results.csv"), sweep.results_csv_text(report))
    _atomic_write(os.path.join(out_dir, "timings.csv"), sweep.timings_csv_text(report))
    _atomic_write(
        os.path.join(out_dir, "slopes.json"),
        json.dumps(sweep.slopes_document(report), sort_keys=True, indent=2) + "\n",
    )
    _atomic_write(
        os.path.join(out_dir, "transitions.json"),
        json.dumps(sweep.transitions_document(report), sort_keys=True, indent=2) + "\n",
    )
    done = len(report.rows)
    failed = len(report.failures)
    print(f"sweep complete: {done} fits, {failed} failures, outputs in {out_dir}")
    return EXIT_OK


def cmd_import(args) -> int:
    import csv as csv_mod

    coord_cols = [c for c in args.coord_cols.split(",") if c]
    try:
        with open(args.csv, "r", encoding="utf-8") as fh:
            reader = csv_mod.DictReader(fh)
            rows = list(reader)
            fields = reader.fieldnames or []
    except OSError as exc:
        _fail(f"cannot read csv: {exc}", EXIT_DATA)
    for col in [args.subject_col, args.value_col, *coord_cols]:
        if col not in fields:
            _fail(f"column {col!r} not found in csv (have: {', '.join(fields)})", EXIT_DATA)

    by_subject: dict = {}
    order = []
    for row in rows:
        key = row[args.subject_col]
        if key not in by_subject:
            by_subject[key] = []
            order.append(key)
        by_subject[key].append(
            ([float(row[c]) for c in coord_cols], float(row[args.value_col]))
        )

    counts = {k: len(v) for k, v in by_subject.items()}
    m_values = sorted(set(counts.values()))
    if len(m_values) > 1:
        if args.subsample_min:
            m = m_values[0]
            print(
                f"warning: unequal measurement counts {m_values}; subsampling "
                f"every subject to the first m={m} rows",
                file=sys.stderr,
            )
            for k in by_subject:
                by_subject[k] = by_subject[k][:m]
        else:
            bad = sorted(k for k, c in counts.items() if c != m_values[-1])
            _fail(
                "unequal measurements per subject (the model requires equal m); "
                f"offending subjects: {', '.join(bad)}",
                EXIT_DATA,
            )
    m = len(by_subject[order[0]])
    if m < 2:
        _fail("need at least two measurements per subject", EXIT_DATA)
    d = len(coord_cols)
    n = len(order)
    locations = np.array([[pt for pt, _ in by_subject[k]] for k in order])
    values = np.array([[v for _, v in by_subject[k]] for k in order])

    rescale_info = None
    lo, hi = locations.min(axis=(0, 1)), locations.max(axis=(0, 1))
    if args.rescale:
        span = np.where(hi > lo, hi - lo, 1.0)
        locations = (locations - lo) / span
        rescale_info = {
            coord_cols[a]: [float(lo[a]), float(hi[a])] for a in range(d)
        }
    elif locations.min() < 0.0 or locations.max() > 1.0:
        _fail(
            "locations outside [0,1]; pass --rescale to map the observed range",
            EXIT_DATA,
        )
    try:
        dataset = FunctionalDataset(locations, values)
    except ValueError as exc:
        _fail(f"invalid dataset: {exc}", EXIT_DATA)
    text = dataset_to_text(dataset, {"source": "import", "rescale": rescale_info})
    _atomic_write(args.out, text)
    print(f"imported {n} subjects with m={m}, d={d} into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covfield",
        description="Covariance function estimation toolkit for discretely observed functional data",
    )
    default_threads = int(os.environ.get("COVFIELD_THREADS", os.cpu_count() or 1))
    parser.add_argument(
        "--threads",
        type=int,
        default=default_threads,
        help="worker threads for sweeps (env COVFIELD_THREADS overrides the default)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from the configured truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one estimator to a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--estimator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--json-export", default=None, help="also write a JSON view of a dnn checkpoint")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("risk", help="squared L2 risk of a fitted model against the truth")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("sweep", help="run the configured (n, m) x replicates experiment grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("import", help="convert a long-format CSV into a dataset file")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subject-col", default="subject")
    p.add_argument("--coord-cols", default="t")
    p.add_argument("--value-col", default="y")
    p.add_argument("--rescale", action="store_true")
    p.add_argument(
        "--subsample-min",
        action="store_true",
        help="subsample unequal subjects to the smallest m instead of failing",
    )
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except dnn.DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
