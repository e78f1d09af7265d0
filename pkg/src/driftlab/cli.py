"""driftlab command line: simulate, fit, erm, diagnose, validate.

File contracts: machine outputs are JSON with floats at 17 significant
digits (byte-identical for a given config and seed); the human fit summary
is fixed-layout text. Every output embeds the tool version and a hash of
the effective config. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import __version__
from . import dlm as dlm_mod
from . import erm as erm_mod
from .diagnostics import (
    DiagnosticBundle,
    pairwise_scatter,
    residual_qq,
    standardized_shift_stats,
    write_bundle_csv,
)
from .harness import HarnessConfig, config_from_dict, run_harness
from .moments import evaluate_moments, fit_whitening, whiten_moments
from .perturb import (
    GaussianCopulaWeights,
    IndependentWeights,
    MixtureWeights,
    PerturbationScheme,
    RandomWalkWeights,
    WeightLaw,
    check_regime,
    realize_world,
    sample_uniform,
)
from .rng import split_uniform, substream
from .tables import DatasetCollection, IngestError, Table, read_csv_table, write_csv_table
from .testfuncs import parse_test_functions

logger = logging.getLogger("driftlab.cli")

_LANE_WORLD = 0
_LANE_DATASET = 1  # + dataset index as stream index


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


class UserError(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSON with fixed float formatting
# ---------------------------------------------------------------------------


def _encode(obj) -> str:
    def convert(x):
        if isinstance(x, dict):
            return {k: convert(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [convert(v) for v in x]
        if isinstance(x, (np.floating, float)):
            return _F(float(x))
        if isinstance(x, (np.integer,)):
            return int(x)
        if isinstance(x, np.ndarray):
            return convert(x.tolist())
        if isinstance(x, (np.bool_,)):
            return bool(x)
        return x

    class _F(float):
        # fixed 17 significant digits in the emitted JSON
        def __repr__(self):
            return format(float(self), ".17g")

    return json.dumps(convert(obj), indent=2, default=str)


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_config(path: str | None, allowed: set[str], context: str) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UserError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})")
    if not isinstance(payload, dict):
        raise UserError(f"{path}: config must be a JSON object")
    unknown = set(payload) - allowed
    if unknown:
        raise UserError(f"{context} config: unknown keys {sorted(unknown)}")
    return payload


def _stamp(config: dict, extra: dict) -> dict:
    out = {
        "tool": {"name": "driftlab", "version": __version__},
        "config_hash": config_hash(config),
        "config": config,
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def ingest(data: list[str], target: str, outcome: str | None) -> DatasetCollection:
    """Load source CSVs (or a directory of them) plus the target CSV."""
    paths: list[Path] = []
    for entry in data:
        p = Path(entry)
        if p.is_dir():
            found = sorted(q for q in p.glob("*.csv") if q.resolve() != Path(target).resolve())
            if not found:
                raise IngestError(f"{p}: directory contains no CSV files")
            paths.extend(found)
        else:
            paths.append(p)
    sources = [read_csv_table(p) for p in paths]
    target_tbl = read_csv_table(target)
    for tbl in sources:
        logger.info("source %s: %d rows, %d columns", tbl.name, tbl.n_rows, len(tbl.columns))
    logger.info("target %s: %d rows", target_tbl.name, target_tbl.n_rows)
    if outcome is not None and outcome in target_tbl.columns:
        raise IngestError(
            f"target {target_tbl.name!r} must not contain the outcome column {outcome!r}"
        )
    return DatasetCollection(tuple(sources), target_tbl, outcome=outcome)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_LAW_KEYS = {
    "lognormal": ("mu", "sigma"),
    "gamma": ("shape", "scale"),
    "uniform": ("lo", "hi"),
}


def _parse_law(payload: dict) -> WeightLaw:
    family = payload.get("family")
    if family not in _LAW_KEYS:
        raise UserError(f"unknown weight family {family!r}")
    keys = _LAW_KEYS[family]
    unknown = set(payload) - {"family", *keys}
    if unknown:
        raise UserError(f"weight law {family}: unknown keys {sorted(unknown)}")
    try:
        return WeightLaw(family, float(payload[keys[0]]), float(payload[keys[1]]))
    except KeyError as exc:
        raise UserError(f"weight law {family}: missing parameter {exc}")


def _parse_scheme(payload: dict, m: int, seed: int) -> PerturbationScheme:
    kind = payload.get("kind")
    if kind == "independent":
        laws = tuple(_parse_law(p) for p in payload["laws"])
        model = IndependentWeights(laws)
    elif kind == "gaussian_copula":
        laws = tuple(_parse_law(p) for p in payload["laws"])
        model = GaussianCopulaWeights(laws, tuple(tuple(row) for row in payload["corr"]))
    elif kind == "random_walk":
        model = RandomWalkWeights(
            _parse_law(payload["base"]),
            float(payload["innovation_sd"]),
            int(payload["k"]),
        )
    elif kind == "mixture":
        model = MixtureWeights(
            tuple(_parse_law(p) for p in payload["base_laws"]),
            tuple(tuple(float(c) for c in row) for row in payload["coefficients"]),
            tuple(float(s) for s in payload["noise_sd"]),
        )
    else:
        raise UserError(f"unknown scheme kind {kind!r}")
    return PerturbationScheme(m, model, seed)


def _column_values(spec: dict, stream: np.ndarray):
    dist = spec.get("dist")
    if dist == "uniform":
        return stream
    if dist == "gaussian":
        return spec.get("mean", 0.0) + spec.get("sd", 1.0) * ndtri(stream)
    if dist == "exponential":
        return -np.log1p(-stream) / spec.get("rate", 1.0)
    if dist == "categorical":
        levels = spec["levels"]
        probs = spec.get("probs", [1.0 / len(levels)] * len(levels))
        cum = np.cumsum(probs)
        if abs(cum[-1] - 1.0) > 1e-9:
            raise UserError(f"column {spec.get('name')}: probs must sum to 1")
        idx = np.searchsorted(cum, stream, side="left")
        return np.asarray([levels[i] for i in np.clip(idx, 0, len(levels) - 1)], dtype=object)
    raise UserError(f"column {spec.get('name')}: unknown dist {dist!r}")


def _build_table(name, u, columns, outcome_spec):
    n_streams = len(columns) + (1 if outcome_spec else 0)
    streams = split_uniform(u, n_streams) if n_streams > 1 else u[None, :]
    data = {}
    order = []
    for i, spec in enumerate(columns):
        data[spec["name"]] = _column_values(spec, streams[i])
        order.append(spec["name"])
    if outcome_spec:
        y = np.full(u.shape, float(outcome_spec.get("intercept", 0.0)))
        for col, coef in outcome_spec.get("coef", {}).items():
            if col not in data:
                raise UserError(f"outcome references unknown column {col!r}")
            if data[col].dtype.kind != "f":
                raise UserError(f"outcome coefficient on non-numeric column {col!r}")
            y = y + float(coef) * data[col]
        y = y + float(outcome_spec.get("noise_sd", 0.0)) * ndtri(streams[-1])
        data[outcome_spec["name"]] = y
        order.append(outcome_spec["name"])
    return Table(name, tuple(order), data)


_SIMULATE_KEYS = {"seed", "m", "scheme", "n_k", "n_0", "columns", "outcome"}


def cmd_simulate(args) -> int:
    config = _load_config(args.config, _SIMULATE_KEYS, "simulate")
    for key in ("m", "scheme", "n_k", "n_0", "columns"):
        if key not in config:
            raise UserError(f"simulate config: missing key {key!r}")
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    config["seed"] = seed
    m = int(config["m"])
    scheme = _parse_scheme(config["scheme"], m, seed)
    k = scheme.n_dists
    n_k = config["n_k"]
    n_list = [int(n_k)] * k if isinstance(n_k, int) else [int(v) for v in n_k]
    if len(n_list) != k:
        raise UserError(f"n_k must give one size per dataset (K={k})")
    check_regime(m, min(n_list))
    n_0 = int(config["n_0"])
    columns = config["columns"]
    outcome_spec = config.get("outcome")

    world = realize_world(scheme, substream(seed, _LANE_WORLD))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    stamp_line = f"# driftlab {__version__} config={chash}\n"
    files = []
    for j in range(k):
        rng = substream(seed, _LANE_DATASET, j + 1)
        u = sample_uniform(world, j, n_list[j], rng)
        tbl = _build_table(f"source_{j + 1}", u, columns, outcome_spec)
        path = out_dir / f"source_{j + 1}.csv"
        write_csv_table(tbl, path)
        _prepend(path, stamp_line)
        files.append(path.name)
    rng = substream(seed, _LANE_DATASET, 0)
    u0 = rng.random(n_0)
    target_tbl = _build_table("target", u0, columns, None)
    target_path = out_dir / "target.csv"
    write_csv_table(target_tbl, target_path)
    _prepend(target_path, stamp_line)
    files.append(target_path.name)

    world_payload = _stamp(
        config,
        {
            "sigma_w": world.sigma_w,
            "mean_w": world.mean_w,
            "m": m,
            "n_sources": k,
            "seed_lanes": {"world": _LANE_WORLD, "datasets": _LANE_DATASET},
            "files": files,
        },
    )
    atomic_write(out_dir / "world.json", _encode(world_payload) + "\n")
    print(f"wrote {len(files)} datasets and world.json to {out_dir}")
    return 0


def _prepend(path: Path, line: str) -> None:
    body = path.read_text(encoding="utf-8")
    atomic_write(path, line + body)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

_FIT_KEYS = {"seed", "test_functions", "outcome", "mode", "whiten", "ridge", "data_label"}


def _fit_pipeline(args, config):
    outcome = config.get("outcome")
    data = ingest(args.data, args.target, outcome)
    declarations = config.get("test_functions")
    if not declarations:
        declarations = [f"column:{c}" for c in data.covariates if data.target.is_numeric(c)]
        if not declarations:
            raise UserError("no numeric covariates available as default test functions")
    tests = parse_test_functions(declarations, data)
    moments = evaluate_moments(data, tests)
    mode = args.mode or config.get("mode", "sum_to_one")
    whiten = args.whiten or bool(config.get("whiten", False))
    if whiten:
        tests = fit_whitening(moments, ridge=float(config.get("ridge", 0.0)))
        moments = whiten_moments(moments, tests.whitening)
    fit = dlm_mod.fit_weights(moments, mode=mode)
    return data, moments, fit


def cmd_fit(args) -> int:
    config = _load_config(args.config, _FIT_KEYS, "fit")
    data, moments, fit = _fit_pipeline(args, config)
    label = config.get("data_label", "data")
    base = str(args.out)
    for suffix in (".txt", ".json"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    payload = _stamp(
        {**config, "argv": {"data": args.data, "target": args.target,
                            "mode": fit.mode, "whiten": fit.whitened}},
        {"fit": dlm_mod.fit_to_dict(fit), "test_functions": list(moments.names)},
    )
    atomic_write(base + ".json", _encode(payload) + "\n")
    if fit.mode == "sum_to_one":
        text = dlm_mod.summarize(fit, data_label=label)
    else:
        rows = "\n".join(
            f"  {name}: {w:.7f}" for name, w in zip(fit.source_names, fit.beta_hat)
        )
        text = (
            f"Simplex weight fit: {fit.target_name} ~ "
            + " + ".join(fit.source_names)
            + f"\n{rows}\nRSS {fit.rss:.6g} on {fit.df} degrees of freedom\n"
        )
    atomic_write(base + ".txt", text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# erm
# ---------------------------------------------------------------------------

_ERM_KEYS = {
    "seed",
    "outcome",
    "test_functions",
    "covariates",
    "dlm_mode",
    "level",
    "clip_quantile",
}


def cmd_erm(args) -> int:
    config = _load_config(args.config, _ERM_KEYS, "erm")
    outcome = config.get("outcome", "y")
    data = ingest(args.data, args.target, outcome)
    spec = erm_mod.squared_error_loss() if args.loss == "squared" else erm_mod.logistic_loss()
    covariates = tuple(
        config.get("covariates")
        or [c for c in data.covariates if data.target.is_numeric(c)]
    )
    level = float(config.get("level", 0.95))
    k = data.n_sources

    dlm_fit = None
    provenance: dict = {"scheme": args.weights}
    if args.weights == "uniform":
        beta = np.full(k, 1.0 / k)
    elif args.weights == "dlm":
        declarations = config.get("test_functions") or [f"column:{c}" for c in covariates]
        tests = parse_test_functions(declarations, data)
        moments = evaluate_moments(data, tests)
        dlm_fit = dlm_mod.fit_weights(moments, mode=config.get("dlm_mode", "simplex"))
        beta = dlm_fit.beta_hat
        provenance["dlm"] = {
            "mode": dlm_fit.mode,
            "n_functions": dlm_fit.n_functions,
            "rss": dlm_fit.rss,
        }
    elif args.weights == "importance":
        beta = None
    elif args.weights.startswith("file:"):
        path = args.weights[len("file:"):]
        beta = np.asarray(json.loads(Path(path).read_text(encoding="utf-8")), dtype=float)
        if beta.size != k or abs(beta.sum() - 1.0) > 1e-8:
            raise UserError(f"weights file must hold {k} values summing to 1")
        provenance["file"] = path
    else:
        raise UserError(f"unknown weights scheme {args.weights!r}")

    if beta is not None:
        fit = erm_mod.fit_erm(data, spec, beta, covariates=covariates)
        weights_out = beta.tolist()
    else:
        x_src = np.vstack(
            [erm_mod.design_matrix(t, covariates, intercept=False) for t in data.sources]
        )
        x_tgt = erm_mod.design_matrix(data.target, covariates, intercept=False)
        iw = erm_mod.importance_weights(
            x_src, x_tgt, clip_quantile=float(config.get("clip_quantile", 0.99))
        )
        y = np.concatenate(
            [np.asarray(t.column(outcome), dtype=float) for t in data.sources]
        )
        x_design = np.column_stack([np.ones(x_src.shape[0]), x_src])
        fit = erm_mod.fit_weighted_samples(x_design, y, iw.weights, spec)
        weights_out = {"clip_threshold": iw.clip_threshold, "n_clipped": iw.n_clipped}
        provenance["clipped"] = iw.clipped

    report = {
        "theta_hat": fit.theta_hat,
        "feature_names": list(fit.feature_names) or ["intercept", *covariates],
        "loss": fit.loss_family,
        "converged": fit.converged,
        "weights": weights_out,
        "provenance": provenance,
    }
    if dlm_fit is not None:
        ci = erm_mod.erm_ci(fit, dlm_fit, level=level)
        shift_scale = dlm_fit.rss / dlm_fit.n_functions
        risk = erm_mod.ood_risk(fit, shift_scale=shift_scale)
        report["ci"] = {"level": level, "intervals": ci}
        report["ood_risk"] = {
            "mode": risk.mode,
            "value": risk.value,
            "trace_term": risk.trace_term,
            "shift_scale": shift_scale,
        }
    payload = _stamp(
        {**config, "argv": {"data": args.data, "target": args.target,
                            "loss": args.loss, "weights": args.weights}},
        {"erm": report},
    )
    atomic_write(args.out, _encode(payload) + "\n")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    try:
        payload = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read fit report {args.fit}: {exc}")
    stored = payload.get("config", {})
    argv = stored.get("argv", {})
    data_paths = args.data or argv.get("data")
    target_path = args.target or argv.get("target")
    if not data_paths or not target_path:
        raise UserError("fit report does not record data paths; pass --data/--target")

    class _A:
        pass

    fit_args = _A()
    fit_args.data = data_paths
    fit_args.target = target_path
    fit_args.mode = argv.get("mode")
    fit_args.whiten = bool(argv.get("whiten", False))
    fit_args.config = None
    config = {k: v for k, v in stored.items() if k in _FIT_KEYS}
    data, moments, fit = _fit_pipeline(fit_args, config)

    bundle = residual_qq(fit)
    stats_all = {}
    for k in range(data.n_sources):
        per = standardized_shift_stats(data, moments.tests, k, moments=moments)
        stats_all.update({f"{data.sources[k].name}|{name}": v for name, v in per.items()})
    bundle = DiagnosticBundle(
        residual_points=bundle.residual_points,
        residual_mean=bundle.residual_mean,
        qq_points=bundle.qq_points,
        qq_defined=bundle.qq_defined,
        scatter_blocks=pairwise_scatter(moments) if data.n_sources >= 2 and moments.n_functions >= 10 else (),
        shift_stats=stats_all,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    write_bundle_csv(bundle, tmp)
    body = tmp.read_text(encoding="utf-8")
    tmp.unlink()
    chash = payload.get("config_hash", config_hash(config))
    atomic_write(out, f"# driftlab {__version__} config={chash}\n" + body)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

_VALIDATE_KEYS = {
    "seed",
    "threads",
    "checks",
    "clt_cov",
    "kron_cov",
    "null_laws",
    "ci_chi2",
    "erm_excess_risk",
    "conditional_shift",
}


def cmd_validate(args) -> int:
    config = _load_config(args.config, _VALIDATE_KEYS, "validate")
    if args.seed is not None:
        config["seed"] = args.seed
    harness_config = config_from_dict(config) if config else HarnessConfig()
    report = run_harness(harness_config)
    payload = _stamp(config, {"report": report.to_dict()})
    atomic_write(args.out, _encode(payload) + "\n")
    for result in report.results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} ({result.runtime_s:.1f}s)")
    if not report.all_passed:
        print("validation failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="driftlab", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw datasets from randomly perturbed distributions")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="estimate dataset weights by moment matching")
    p.add_argument("--data", nargs="+", required=True, help="source CSVs or a directory")
    p.add_argument("--target", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["sum_to_one", "simplex"], default=None)
    p.add_argument("--whiten", action="store_true")
    p.add_argument("--out", required=True, help="basename for the .txt/.json reports")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("erm", help="weighted empirical risk minimization")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--loss", choices=["squared", "logistic"], default="squared")
    p.add_argument("--weights", default="dlm",
                   help="dlm | uniform | importance | file:<path>")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_erm)

    p = sub.add_parser("diagnose", help="emit residual/QQ/scatter diagnostic data")
    p.add_argument("--fit", required=True, help="fit report JSON")
    p.add_argument("--data", nargs="+", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("validate", help="run the Monte Carlo validation harness")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_validate)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UserError, IngestError, ValueError) as exc:
        print(f"driftlab: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
