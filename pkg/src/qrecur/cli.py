"""Command-line front door: fit, bootstrap, test, simulate.

Settings resolve in precedence order CLI flag > QRECUR_* environment
variable > --config JSON document > built-in default, and the merged
result is schema-validated before any computation starts. All randomness
flows from the single --seed through named substreams (fit, bootstrap,
simulate), so a command rerun with the same seed, config, and inputs
rewrites every data output byte for byte. The run manifest is the one
exception: it carries wall-clock timings and is documented as such.

CSV outputs use '.' as the decimal separator, UTF-8, and LF line endings;
floats are written with repr so values survive a round trip exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import __version__
from .errors import QrecurError, SchemaError, ValidationError
from .estimator import FitConfig, FitResult, fit
from .inference import BootstrapSummary, bootstrap, constancy_test
from .records import Dataset, SubjectRecord, TauGrid, standardize_dataset
from .sim import DGPSpec, generate_dataset, run_monte_carlo

_log = logging.getLogger("qrecur.cli")

_MISSING_CELLS = frozenset({"", "na", "nan", "null", "none"})

_STREAMS = {"fit": 0, "bootstrap": 1, "simulate": 2}


def _derive_seed(seed: int, name: str) -> int:
    """Named substream of the run seed; stable across platforms."""
    key = _STREAMS[name]
    ss = np.random.SeedSequence(seed, spawn_key=(key,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class InputBundle:
    """Paths plus ingest options for one observed dataset."""

    subjects_path: str
    events_path: str
    nu_star: float | None = None
    standardize: bool = False
    tau_grid: str | None = None


@dataclass(frozen=True)
class RunConfig:
    """Flat, declarative settings document for one CLI run.

    Field names double as the JSON config keys and, uppercased with the
    QRECUR_ prefix, as the environment override names.
    """

    subjects: str | None = None
    events: str | None = None
    out_dir: str = "."
    seed: int = 0
    jobs: int = 1
    tau_grid: str = "0.02:0.98:0.01"
    bootstrap: int = 100
    alpha: float = 0.05
    nu_star: float | None = None
    standardize: bool = False
    max_iter: int = 100
    tol: float = 0.01
    gamma_grid_refinement: int = 1
    adjusted_naive_start: bool = True
    n_starts: int = 1
    quadrature: str = "left"
    coefficient: int = 1
    tau_lower: float = 0.1
    tau_upper: float = 0.9
    dgp: str = "homogeneous-normal"
    n_subjects: int = 500
    replications: int = 100
    tau_report: str = "0.25,0.5,0.75"
    dgp_b: str | None = None
    dgp_d: str | None = None
    dgp_censoring: str | None = None
    emit_data: bool = False

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        if self.bootstrap < 0:
            raise ValidationError("bootstrap must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")
        if self.coefficient < 0:
            raise ValidationError("coefficient index must be >= 0")
        if not self.tau_lower < self.tau_upper:
            raise ValidationError("tau_lower must be below tau_upper")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.n_subjects < 1:
            raise ValidationError("n_subjects must be >= 1")
        _parse_tau_grid(self.tau_grid)  # fail before any computation


def _parse_tau_grid(text: str) -> TauGrid:
    parts = text.split(":")
    if len(parts) != 3:
        raise SchemaError(f"tau grid {text!r} must look like lo:hi:step")
    try:
        lo, hi, step = (float(v) for v in parts)
    except ValueError:
        raise SchemaError(f"tau grid {text!r} has non-numeric parts") from None
    return TauGrid.from_range(lo, hi, step)


def _parse_float_list(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise SchemaError(f"{what} {text!r} must be comma-separated numbers") from None


_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, kind: type, value):
    """Convert a config-file or environment value to a field's type."""
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in _BOOL_WORDS:
            return _BOOL_WORDS[value.lower()]
        raise SchemaError(f"setting {name!r}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or (not isinstance(value, (int, str))):
            raise SchemaError(f"setting {name!r}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise SchemaError(f"setting {name!r}: expected an integer, got {value!r}") from None
    if kind is float:
        if isinstance(value, bool) or (not isinstance(value, (int, float, str))):
            raise SchemaError(f"setting {name!r}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise SchemaError(f"setting {name!r}: expected a number, got {value!r}") from None
    if not isinstance(value, str):
        raise SchemaError(f"setting {name!r}: expected a string, got {value!r}")
    return value


def _field_types() -> dict[str, type]:
    types = {}
    for f in dc_fields(RunConfig):
        text = f.type
        if "bool" in text:
            types[f.name] = bool
        elif "int" in text:
            types[f.name] = int
        elif "float" in text:
            types[f.name] = float
        else:
            types[f.name] = str
    return types


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SchemaError(f"cannot read config file {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"config file {path!r} must hold a JSON object")
    types = _field_types()
    out = {}
    for key, value in doc.items():
        if key not in types:
            raise SchemaError(f"config file {path!r}: unknown setting {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def _env_overrides(environ) -> dict:
    """Settings from QRECUR_<FIELD> variables; unrelated names are ignored."""
    types = _field_types()
    out = {}
    for name, kind in types.items():
        raw = environ.get("QRECUR_" + name.upper())
        if raw is not None:
            out[name] = _coerce(name, kind, raw)
    return out


def ingest(subjects_path: str, events_path: str, options=None) -> Dataset:
    """Parse the two-file CSV interchange format into a Dataset.

    subjects: subject_id, censoring_time, then one column per covariate.
    events: subject_id, event_time, one row per event. Subjects with a
    missing covariate cell are excluded (with a logged count), taking
    their events with them; any other malformed value names its row.
    """
    options = dict(options or {})
    nu_star = options.pop("nu_star", None)
    standardize = bool(options.pop("standardize", False))
    if options:
        raise SchemaError(f"unknown ingest options {sorted(options)}")

    with open(subjects_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("subject_id", "censoring_time"):
            if col not in header:
                raise SchemaError(f"subjects file lacks column {col!r}")
        cov_names = tuple(c for c in header if c not in ("subject_id", "censoring_time"))
        kept: dict[str, dict] = {}
        excluded: set[str] = set()
        for i, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if not sid:
                raise ValidationError(f"subjects row {i}: empty subject_id")
            if sid in kept or sid in excluded:
                raise ValidationError(f"subjects row {i}: duplicate subject {sid!r}")
            cells = [(row.get(c) or "").strip() for c in cov_names]
            if any(cell.lower() in _MISSING_CELLS for cell in cells):
                excluded.add(sid)
                continue
            try:
                cov = tuple(float(cell) for cell in cells)
                cens = float((row["censoring_time"] or "").strip())
            except ValueError:
                raise ValidationError(
                    f"subjects row {i} (subject {sid!r}): non-numeric value"
                ) from None
            if not np.isfinite(cens) or cens <= 0.0:
                raise ValidationError(
                    f"subjects row {i} (subject {sid!r}): censoring_time {cens} not positive"
                )
            kept[sid] = {"censoring": cens, "covariates": cov, "times": []}
    if excluded:
        _log.warning("excluded %d subject(s) with missing covariates", len(excluded))
    if not kept:
        raise ValidationError("no usable subjects after exclusions")

    with open(events_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("subject_id", "event_time"):
            if col not in header:
                raise SchemaError(f"events file lacks column {col!r}")
        for i, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if sid in excluded:
                continue
            if sid not in kept:
                raise ValidationError(f"events row {i}: unknown subject {sid!r}")
            try:
                t = float((row["event_time"] or "").strip())
            except ValueError:
                raise ValidationError(f"events row {i} (subject {sid!r}): non-numeric event_time") from None
            c = kept[sid]["censoring"]
            if not np.isfinite(t) or t <= 0.0 or t > c:
                raise ValidationError(
                    f"events row {i} (subject {sid!r}): event_time {t} outside (0, {c}]"
                )
            kept[sid]["times"].append(t)

    records = tuple(
        SubjectRecord(
            subject_id=sid,
            censoring_time=rec["censoring"],
            event_times=tuple(sorted(rec["times"])),
            covariates=rec["covariates"],
        )
        for sid, rec in kept.items()
    )
    data = Dataset(records=records, covariate_names=cov_names, nu_star=nu_star)
    if standardize:
        data, info = standardize_dataset(data)
        _log.info(
            "standardized %s: means=%s scales=%s", info.columns, info.means, info.scales
        )
    return data


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_path_csv(path, grid, coef_names, est, naive, se=None, ci=None) -> None:
    """Coefficient path table, one row per (tau, coefficient)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "coef_name", "estimate", "naive_estimate", "se", "ci_lo", "ci_hi"])
        for k, tau in enumerate(grid.array):
            for c, name in enumerate(coef_names):
                w.writerow([
                    repr(float(tau)), name, _fmt(est[k, c]), _fmt(naive[k, c]),
                    _fmt(se[k, c]) if se is not None else "",
                    _fmt(ci[k, c, 0]) if ci is not None else "",
                    _fmt(ci[k, c, 1]) if ci is not None else "",
                ])


def _write_percentile_csv(path, grid, coef_names, est, ci) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "coef_name", "estimate", "pct_lo", "pct_hi"])
        for k, tau in enumerate(grid.array):
            for c, name in enumerate(coef_names):
                w.writerow([
                    repr(float(tau)), name, _fmt(est[k, c]),
                    _fmt(ci[k, c, 0]), _fmt(ci[k, c, 1]),
                ])


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(config: RunConfig, command: str, timings: dict, **extra) -> dict:
    doc = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "tau_grid": config.tau_grid,
        "timings": {k: float(v) for k, v in timings.items()},
    }
    doc.update(extra)
    return doc


class _StageFailure(Exception):
    """Carries the pipeline stage name alongside the original error."""

    def __init__(self, stage: str, exc: QrecurError):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


def _run_stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except QrecurError as exc:
        raise _StageFailure(stage, exc) from exc


def _fit_config(config: RunConfig) -> FitConfig:
    return FitConfig(
        grid=_parse_tau_grid(config.tau_grid),
        max_iter=config.max_iter,
        tol=config.tol,
        gamma_grid_refinement=config.gamma_grid_refinement,
        adjusted_naive_start=config.adjusted_naive_start,
        rng_seed=_derive_seed(config.seed, "fit"),
        n_starts=config.n_starts,
        quadrature=config.quadrature,
    )


def _ingest_from(config: RunConfig) -> Dataset:
    if not config.subjects or not config.events:
        raise SchemaError("this command needs --subjects and --events (or config keys)")
    return ingest(
        config.subjects,
        config.events,
        {"nu_star": config.nu_star, "standardize": config.standardize},
    )


def _fit_data(config: RunConfig):
    data = _run_stage("ingest", _ingest_from, config)
    result = _run_stage("fit", fit, data, _fit_config(config))
    return data, result


def _coef_names(data: Dataset) -> tuple[str, ...]:
    return ("intercept",) + data.covariate_names


def cmd_fit(config: RunConfig) -> int:
    t0 = time.perf_counter()
    data, result = _fit_data(config)
    t1 = time.perf_counter()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    _write_path_csv(
        os.path.join(out, "path.csv"), result.path.grid, _coef_names(data),
        result.path.theta, result.naive_path.theta,
    )
    _write_json(os.path.join(out, "manifest.json"), _manifest(
        config, "fit", {"fit_s": t1 - t0, "total_s": time.perf_counter() - t0},
        n_subjects=data.n,
        iterations=result.iterations,
        converged=result.converged,
        zero_mass_drops=result.zero_mass_drops,
    ))
    return 0


def _bootstrap_for(config: RunConfig, data: Dataset, result: FitResult) -> BootstrapSummary:
    return bootstrap(
        data,
        _fit_config(config),
        config.bootstrap,
        alpha=config.alpha,
        seed=_derive_seed(config.seed, "bootstrap"),
        fit_result=result,
        jobs=config.jobs,
    )


def cmd_bootstrap(config: RunConfig) -> int:
    t0 = time.perf_counter()
    data, result = _fit_data(config)
    t1 = time.perf_counter()
    summary = _run_stage("bootstrap", _bootstrap_for, config, data, result)
    t2 = time.perf_counter()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    names = _coef_names(data)
    _write_path_csv(
        os.path.join(out, "path.csv"), result.path.grid, names,
        result.path.theta, result.naive_path.theta, summary.se, summary.ci_normal,
    )
    _write_percentile_csv(
        os.path.join(out, "path_percentile.csv"), result.path.grid, names,
        result.path.theta, summary.ci_percentile,
    )
    _write_json(os.path.join(out, "manifest.json"), _manifest(
        config, "bootstrap",
        {"fit_s": t1 - t0, "bootstrap_s": t2 - t1, "total_s": time.perf_counter() - t0},
        n_subjects=data.n,
        iterations=result.iterations,
        converged=result.converged,
        zero_mass_drops=result.zero_mass_drops,
        bootstrap_B=summary.B,
        bootstrap_failed=summary.n_failed,
        alpha=summary.alpha,
    ))
    return 0


def cmd_test(config: RunConfig) -> int:
    t0 = time.perf_counter()
    data, result = _fit_data(config)
    t1 = time.perf_counter()
    summary = _run_stage("bootstrap", _bootstrap_for, config, data, result)
    t2 = time.perf_counter()
    outcome = _run_stage(
        "test", constancy_test, data, _fit_config(config), config.coefficient,
        tau_L=config.tau_lower, tau_U=config.tau_upper, summary=summary,
    )
    t3 = time.perf_counter()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    names = _coef_names(data)
    _write_path_csv(
        os.path.join(out, "path.csv"), result.path.grid, names,
        result.path.theta, result.naive_path.theta, summary.se, summary.ci_normal,
    )
    _write_json(os.path.join(out, "test_results.json"), {
        "coefficient_index": outcome.coefficient_index,
        "coefficient_name": names[outcome.coefficient_index],
        "statistic": outcome.statistic,
        "rejection_region": list(outcome.rejection_region),
        "reject": outcome.reject,
        "decision": "reject" if outcome.reject else "fail to reject",
        "eta_hat": outcome.eta_hat,
        "tau_bounds": list(outcome.tau_bounds),
        "alpha": outcome.alpha,
        "bootstrap_B": outcome.B,
    })
    _write_json(os.path.join(out, "manifest.json"), _manifest(
        config, "test",
        {"fit_s": t1 - t0, "bootstrap_s": t2 - t1, "test_s": t3 - t2,
         "total_s": time.perf_counter() - t0},
        n_subjects=data.n,
        iterations=result.iterations,
        converged=result.converged,
        bootstrap_B=summary.B,
        bootstrap_failed=summary.n_failed,
        alpha=summary.alpha,
        coefficient=config.coefficient,
    ))
    return 0


def _dgp_spec(config: RunConfig) -> DGPSpec:
    kwargs = {
        "kind": config.dgp,
        "n": config.n_subjects,
        "seed": _derive_seed(config.seed, "simulate"),
    }
    if config.dgp_b is not None:
        kwargs["b"] = _parse_float_list(config.dgp_b, "dgp_b")
    if config.dgp_d is not None:
        d = _parse_float_list(config.dgp_d, "dgp_d")
        kwargs["d"] = d if len(d) > 1 else d[0]
    if config.dgp_censoring is not None:
        pair = _parse_float_list(config.dgp_censoring, "dgp_censoring")
        if len(pair) != 2:
            raise SchemaError("dgp_censoring must be two comma-separated numbers")
        kwargs["censoring"] = pair
    return DGPSpec(**kwargs)


def _emit_dataset(out: str, data: Dataset) -> None:
    """First replication's data in the ingest interchange format."""
    with open(os.path.join(out, "subjects.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "censoring_time", *data.covariate_names])
        for rec in data.records:
            w.writerow([rec.subject_id, repr(rec.censoring_time),
                        *(repr(v) for v in rec.covariates)])
    with open(os.path.join(out, "events.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "event_time"])
        for rec in data.records:
            for t in rec.event_times:
                w.writerow([rec.subject_id, repr(t)])
    _write_json(os.path.join(out, "meta.json"), {
        "nu_star": data.nu_star,
        "covariate_names": list(data.covariate_names),
    })


def cmd_simulate(config: RunConfig) -> int:
    t0 = time.perf_counter()
    spec = _run_stage("config", _dgp_spec, config)
    tau_report = _run_stage("config", _parse_float_list, config.tau_report, "tau_report")
    report = _run_stage(
        "simulate", run_monte_carlo, spec, _fit_config(config), config.replications,
        B=config.bootstrap,
        tau_report=tau_report,
        alpha=config.alpha,
        jobs=config.jobs,
    )
    t1 = time.perf_counter()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    report.write_csv(os.path.join(out, "report.csv"))
    report.write_json(os.path.join(out, "report.json"))
    if config.emit_data:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
        _emit_dataset(out, generate_dataset(spec, rng=rng))
    _write_json(os.path.join(out, "manifest.json"), _manifest(
        config, "simulate",
        {"simulate_s": t1 - t0, "total_s": time.perf_counter() - t0},
        dgp=spec.kind,
        n_subjects=spec.n,
        replications=report.R,
        replications_failed=report.n_failed,
        bootstrap_B=report.B,
        mean_events_per_subject=report.mean_events,
    ))
    return 0


_DISPATCH = {
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "test": cmd_test,
    "simulate": cmd_simulate,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings document")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--tau-grid", dest="tau_grid", metavar="LO:HI:STEP")
    common.add_argument("--bootstrap", type=int, metavar="B")
    common.add_argument("--alpha", type=float)

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--subjects", help="subjects CSV path")
    data_opts.add_argument("--events", help="events CSV path")
    data_opts.add_argument("--nu-star", dest="nu_star", type=float)
    data_opts.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)

    parser = argparse.ArgumentParser(
        prog="qrecur",
        description="Quantile-path estimation for recurrent-event rate multipliers.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("fit", parents=[common, data_opts], help="fit the coefficient path")
    sub.add_parser("bootstrap", parents=[common, data_opts],
                   help="fit plus bootstrap SEs and confidence intervals")
    p_test = sub.add_parser("test", parents=[common, data_opts],
                            help="bootstrap test of a constant coefficient")
    p_test.add_argument("--coefficient", type=int, metavar="J",
                        help="0-based column, 0 is the intercept (default 1)")
    p_test.add_argument("--tau-lower", dest="tau_lower", type=float)
    p_test.add_argument("--tau-upper", dest="tau_upper", type=float)
    p_sim = sub.add_parser("simulate", parents=[common],
                           help="Monte Carlo study on synthetic data")
    p_sim.add_argument("--dgp", choices=("homogeneous-normal", "homogeneous-t3",
                                         "heteroscedastic-normal"))
    p_sim.add_argument("--n", dest="n_subjects", type=int, metavar="N")
    p_sim.add_argument("--replications", type=int, metavar="R")
    p_sim.add_argument("--tau-report", dest="tau_report", metavar="T1,T2,...")
    p_sim.add_argument("--dgp-b", dest="dgp_b", metavar="B0,B1,B2")
    p_sim.add_argument("--dgp-d", dest="dgp_d", metavar="D|D0,D1,D2")
    p_sim.add_argument("--dgp-censoring", dest="dgp_censoring", metavar="LO,HI")
    p_sim.add_argument("--emit-data", dest="emit_data",
                       action=argparse.BooleanOptionalAction, default=None)
    return parser


def _build_config(args: argparse.Namespace) -> RunConfig:
    settings: dict = {}
    if args.config:
        settings.update(_load_config_file(args.config))
    settings.update(_env_overrides(os.environ))
    known = {f.name for f in dc_fields(RunConfig)}
    for key, value in vars(args).items():
        if key in known and value is not None:
            settings[key] = value
    return RunConfig(**settings)


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = _build_config(args)
    except (SchemaError, ValidationError) as exc:
        print(f"[config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    try:
        return _DISPATCH[args.command](config)
    except _StageFailure as failure:
        code = 2 if isinstance(failure.exc, SchemaError) else 1
        print(f"[{failure.stage}] {type(failure.exc).__name__}: {failure.exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"[io] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
