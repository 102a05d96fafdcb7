"""Command line front-end for reproducible batch runs.

``ingest`` turns raw CSVs into a self-contained panel directory
(stations.csv, clusters.csv, centroids.csv, panel.csv, panel_meta.json);
the model commands take that directory via ``--panel``. Every command
writes ``config.json`` with its fully resolved settings into ``--out``:
defaults, then values from ``--config`` (a JSON object keyed like the
flags), then explicit flags, later layers winning. Seeded commands are
deterministic, so re-running from a saved config reproduces artifacts
byte for byte.

Exit codes: 0 success, 2 invalid inputs, 3 numerical failure, 64 usage.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .clustering import choose_k, kmeans, read_clusters_csv, write_centroids_csv, write_clusters_csv
from .covariance import CovarianceParams
from .design import build_design
from .errors import (
    MissingDataError,
    NumericalError,
    ParseError,
    RequestError,
    SchemaError,
    ValidationError,
)
from .estimation import FittedModel, fit, weight_matrix
from .geo import METRICS
from .inference import lm_test, write_lmtest_json
from .ingest import (
    MISSING_POLICIES,
    aggregate_weekly,
    build_panel,
    infer_calendar,
    parse_readings,
    parse_stations,
    read_panel,
    write_panel_csv,
    write_panel_meta,
    write_stations_csv,
)
from .panel import WeeklyPanel
from .prediction import (
    PHI_S_GRID,
    PHI_T_GRID,
    PredictionRequest,
    blup,
    cross_validate_decay,
    write_cv_csv,
    write_predictions_csv,
)
from .simulation import INTERACTIONS, SimSpec, size_power_study, write_study_csv

EX_OK = 0
EX_VALIDATION = 2
EX_NUMERICAL = 3
EX_USAGE = 64

PANEL_FILES = ("stations.csv", "clusters.csv", "panel.csv", "panel_meta.json")

_DEFAULTS: dict[str, dict] = {
    "ingest": {
        "stations": None,
        "readings": None,
        "clusters": None,
        "k": None,
        "seed": 0,
        "metric": "greatcircle",
        "missing_policy": "error",
        "out": ".",
    },
    "cluster": {"stations": None, "k": None, "seed": 0, "metric": "greatcircle", "out": "."},
    "cv": {
        "panel": None,
        "phi_s_grid": list(PHI_S_GRID),
        "phi_t_grid": list(PHI_T_GRID),
        "weights": True,
        "tol": 1e-6,
        "max_iter": 100,
        "out": ".",
    },
    "fit": {
        "panel": None,
        "phi_s": None,
        "phi_t": None,
        "weights": True,
        "tol": 1e-6,
        "max_iter": 100,
        "out": ".",
    },
    "lmtest": {
        "panel": None,
        "phi_s": None,
        "phi_t": None,
        "level": 0.05,
        "tol": 1e-6,
        "max_iter": 100,
        "out": ".",
    },
    "predict": {
        "panel": None,
        "targets": None,
        "phi_s": None,
        "phi_t": None,
        "weights": True,
        "tol": 1e-6,
        "max_iter": 100,
        "out": ".",
    },
    "simulate": {
        "n": None,
        "weeks": None,
        "reps": 500,
        "seed": 0,
        "interaction": "none",
        "covariates": 2,
        "phi_s": 0.1,
        "phi_t": 0.75,
        "level": 0.05,
        "workers": os.cpu_count() or 1,
        "out": ".",
    },
}


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit with code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_common(sp) -> None:
    sp.add_argument("--out", help="artifacts directory (default: current directory)")
    sp.add_argument("--config", help="JSON config file; explicit flags override it")


def _build_parser() -> _Parser:
    p = _Parser(prog="stpanel", description="Weekly air pollution panel modelling toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True, metavar="command")

    sp = sub.add_parser("ingest", help="aggregate raw readings into a panel directory")
    sp.add_argument("--stations", help="stations CSV (station_id,latitude,longitude)")
    sp.add_argument("--readings", help="raw readings CSV")
    sp.add_argument("--clusters", help="existing clusters CSV (default: k-means here)")
    sp.add_argument("--k", type=int, help="cluster count when clustering here")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--metric", choices=METRICS)
    sp.add_argument("--missing-policy", choices=MISSING_POLICIES, dest="missing_policy")
    _add_common(sp)
    sp.set_defaults(func=_cmd_ingest)

    sp = sub.add_parser("cluster", help="k-means station clustering")
    sp.add_argument("--stations")
    sp.add_argument("--k", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--metric", choices=METRICS)
    _add_common(sp)
    sp.set_defaults(func=_cmd_cluster)

    sp = sub.add_parser("cv", help="decay grid search by forward validation")
    sp.add_argument("--panel", help="panel directory from 'ingest'")
    sp.add_argument("--phi-s-grid", type=_float_list, dest="phi_s_grid")
    sp.add_argument("--phi-t-grid", type=_float_list, dest="phi_t_grid")
    sp.add_argument("--weights", action=argparse.BooleanOptionalAction)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", type=int, dest="max_iter")
    _add_common(sp)
    sp.set_defaults(func=_cmd_cv)

    sp = sub.add_parser("fit", help="iterative weighted GLS fit plus diagnostics")
    sp.add_argument("--panel", help="panel directory from 'ingest'")
    sp.add_argument("--phi-s", type=float, dest="phi_s")
    sp.add_argument("--phi-t", type=float, dest="phi_t")
    sp.add_argument("--weights", action=argparse.BooleanOptionalAction)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", type=int, dest="max_iter")
    _add_common(sp)
    sp.set_defaults(func=_cmd_fit)

    sp = sub.add_parser("lmtest", help="score test for cluster trend effects")
    sp.add_argument("--panel", help="panel directory from 'ingest'")
    sp.add_argument("--phi-s", type=float, dest="phi_s")
    sp.add_argument("--phi-t", type=float, dest="phi_t")
    sp.add_argument("--level", type=float)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", type=int, dest="max_iter")
    _add_common(sp)
    sp.set_defaults(func=_cmd_lmtest)

    sp = sub.add_parser("predict", help="BLUP at target space-time points")
    sp.add_argument("--panel", help="panel directory from 'ingest'")
    sp.add_argument("--targets", help="targets CSV (station_id,lat,lon,week,<covariates>)")
    sp.add_argument("--phi-s", type=float, dest="phi_s")
    sp.add_argument("--phi-t", type=float, dest="phi_t")
    sp.add_argument("--weights", action=argparse.BooleanOptionalAction)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-iter", type=int, dest="max_iter")
    _add_common(sp)
    sp.set_defaults(func=_cmd_predict)

    sp = sub.add_parser("simulate", help="size/power study of the trend score test")
    sp.add_argument("--n", type=int, help="number of sites")
    sp.add_argument("--weeks", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--interaction", choices=INTERACTIONS)
    sp.add_argument("--covariates", type=int)
    sp.add_argument("--phi-s", type=float, dest="phi_s")
    sp.add_argument("--phi-t", type=float, dest="phi_t")
    sp.add_argument("--level", type=float)
    sp.add_argument("--workers", type=int)
    _add_common(sp)
    sp.set_defaults(func=_cmd_simulate)

    return p


def _resolve(args, command: str) -> dict:
    cfg = dict(_DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise MissingDataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise SchemaError(f"config file {path} must hold a JSON object")
        for key, val in data.items():
            dest = key.replace("-", "_")
            if dest == "command":
                if val != command:
                    raise SchemaError(f"config file is for command {val!r}, not {command!r}")
                continue
            if dest not in cfg:
                raise SchemaError(f"config file {path}: unknown setting {key!r}")
            cfg[dest] = val
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require(cfg: dict, key: str, flag: str, hint: str = "") -> None:
    if cfg[key] is None:
        extra = f" ({hint})" if hint else ""
        raise RequestError(f"missing required input: {flag}{extra}")


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command}
    payload.update(cfg)
    with open(out / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _load_panel(panel_dir) -> tuple[WeeklyPanel, "object", Path]:
    if not panel_dir:
        raise RequestError("missing required input: --panel (directory written by 'stpanel ingest')")
    d = Path(panel_dir)
    if not d.is_dir():
        raise MissingDataError(f"panel directory not found: {d}")
    for name in PANEL_FILES:
        if not (d / name).exists():
            raise MissingDataError(f"panel directory {d} lacks {name}")
    stations = parse_stations(d / "stations.csv")
    panel = read_panel(d / "panel.csv", d / "panel_meta.json", stations)
    clusters = read_clusters_csv(d / "clusters.csv", stations, metric=panel.metric)
    if not np.array_equal(clusters.member_of, panel.order.member_of):
        raise SchemaError(f"{d}: clusters.csv disagrees with the panel's cluster labels")
    return panel, clusters, d


def _fit_from_cfg(panel: WeeklyPanel, cfg: dict) -> FittedModel:
    _require(cfg, "phi_s", "--phi-s")
    _require(cfg, "phi_t", "--phi-t")
    design = build_design(panel)
    params = CovarianceParams.for_panel(cfg["phi_s"], cfg["phi_t"], panel.n_weeks)
    weights = weight_matrix(panel) if cfg["weights"] else None
    return fit(
        panel,
        design.X,
        params,
        weights=weights,
        labels=design.labels,
        tol=cfg["tol"],
        max_iter=cfg["max_iter"],
    )


def _cmd_ingest(args) -> int:
    cfg = _resolve(args, "ingest")
    _require(cfg, "stations", "--stations")
    _require(cfg, "readings", "--readings")
    out = _prepare_out(cfg, "ingest")
    stations = parse_stations(cfg["stations"])
    readings = parse_readings(cfg["readings"], stations)
    calendar = infer_calendar(readings)
    weekly = aggregate_weekly(readings, stations, calendar)
    if cfg["clusters"]:
        assignment = read_clusters_csv(cfg["clusters"], stations, metric=cfg["metric"])
    else:
        k = cfg["k"] if cfg["k"] is not None else choose_k(stations.n)
        assignment = kmeans(stations, k, seed=cfg["seed"], metric=cfg["metric"])
    panel = build_panel(weekly, stations, assignment, missing_policy=cfg["missing_policy"])
    write_stations_csv(stations, out / "stations.csv")
    write_clusters_csv(out / "clusters.csv", stations, assignment)
    write_centroids_csv(out / "centroids.csv", assignment)
    write_panel_csv(panel, out / "panel.csv")
    write_panel_meta(panel, out / "panel_meta.json")
    filled = 0 if panel.interpolated is None else int(panel.interpolated.sum())
    print(
        f"panel: {panel.n_sites} stations, {panel.n_weeks} weeks, "
        f"{assignment.k} clusters, {filled} interpolated cells -> {out}"
    )
    return EX_OK


def _cmd_cluster(args) -> int:
    cfg = _resolve(args, "cluster")
    _require(cfg, "stations", "--stations")
    out = _prepare_out(cfg, "cluster")
    stations = parse_stations(cfg["stations"])
    k = cfg["k"] if cfg["k"] is not None else choose_k(stations.n)
    assignment = kmeans(stations, k, seed=cfg["seed"], metric=cfg["metric"])
    write_clusters_csv(out / "clusters.csv", stations, assignment)
    write_centroids_csv(out / "centroids.csv", assignment)
    print(f"clusters: {stations.n} stations into {assignment.k} groups -> {out}")
    return EX_OK


def _cmd_cv(args) -> int:
    cfg = _resolve(args, "cv")
    panel, clusters, _ = _load_panel(cfg["panel"])
    out = _prepare_out(cfg, "cv")
    report = cross_validate_decay(
        panel,
        clusters,
        tuple(cfg["phi_s_grid"]),
        tuple(cfg["phi_t_grid"]),
        use_weights=bool(cfg["weights"]),
        tol=cfg["tol"],
        max_iter=cfg["max_iter"],
    )
    write_cv_csv(report, out / "cv.csv")
    print(
        f"cv: best phi_s={report.best_phi_s:g} phi_t={report.best_phi_t:g} "
        f"mse={report.best_mse:.6g} over {len(report.rows)} cells -> {out}"
    )
    return EX_OK


def _write_residuals_csv(panel: WeeklyPanel, fitted: FittedModel, path: Path) -> None:
    order = panel.order
    seasons = panel.week_seasons
    y = panel.y_flat()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "week", "season", "y", "fitted", "residual", "std_residual"])
        for pos in range(order.n_obs):
            s = int(order.flat_site[pos])
            t = int(order.flat_week[pos])
            w.writerow(
                [
                    panel.sites.ids[s],
                    t + 1,
                    int(seasons[t]),
                    f"{y[pos]:.10g}",
                    f"{fitted.fitted[pos]:.10g}",
                    f"{fitted.resid[pos]:.10g}",
                    f"{fitted.std_resid[pos]:.10g}",
                ]
            )


def _write_qq_csv(fitted: FittedModel, path: Path) -> None:
    sample = np.sort(fitted.std_resid)
    n = sample.size
    theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theoretical", "sample"])
        for t, s in zip(theo, sample):
            w.writerow([f"{t:.10g}", f"{s:.10g}"])


def _cmd_fit(args) -> int:
    cfg = _resolve(args, "fit")
    panel, _, _ = _load_panel(cfg["panel"])
    out = _prepare_out(cfg, "fit")
    fitted = _fit_from_cfg(panel, cfg)
    with open(out / "fit.json", "w") as fh:
        json.dump(fitted.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_residuals_csv(panel, fitted, out / "residuals.csv")
    _write_qq_csv(fitted, out / "qq.csv")
    for note in fitted.warnings:
        print(f"warning: {note}", file=sys.stderr)
    print(
        f"fit: {'converged' if fitted.converged else 'stopped'} after {fitted.n_iter} "
        f"iterations, sigma2={fitted.sigma2:.6g} -> {out}"
    )
    return EX_OK


def _cmd_lmtest(args) -> int:
    cfg = _resolve(args, "lmtest")
    panel, _, _ = _load_panel(cfg["panel"])
    out = _prepare_out(cfg, "lmtest")
    _require(cfg, "phi_s", "--phi-s")
    _require(cfg, "phi_t", "--phi-t")
    design = build_design(panel)
    params = CovarianceParams.for_panel(cfg["phi_s"], cfg["phi_t"], panel.n_weeks)
    result = lm_test(
        panel, design, params, level=cfg["level"], tol=cfg["tol"], max_iter=cfg["max_iter"]
    )
    write_lmtest_json(result, out / "lmtest.json")
    verdict = "reject" if result.reject else "keep"
    print(
        f"lmtest: statistic={result.statistic:.6g} df={result.df} "
        f"p={result.p_value:.6g} -> {verdict} the no-trend null at level {result.level:g}"
    )
    return EX_OK


def _parse_targets(path, panel: WeeklyPanel) -> list[PredictionRequest]:
    expected = ["station_id", "lat", "lon", "week", *panel.covariate_names]
    requests: list[PredictionRequest] = []
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise MissingDataError(f"targets file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise SchemaError(f"{path}: expected columns {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"{path}: wrong field count", line=lineno)
            sid = row[0].strip() or None
            lat_s, lon_s = row[1].strip(), row[2].strip()
            if bool(lat_s) != bool(lon_s):
                raise ParseError(f"{path}: lat and lon must come together", line=lineno)
            try:
                coord = (float(lat_s), float(lon_s)) if lat_s else None
                week = int(row[3])
                covs = np.array([float(v) for v in row[4:]], dtype=float)
            except ValueError:
                raise ParseError(f"{path}: malformed numeric field", line=lineno) from None
            if sid is None and coord is None:
                raise ParseError(f"{path}: target needs a station_id or coordinates", line=lineno)
            requests.append(
                PredictionRequest(week=week, covariates=covs, station_id=sid, coord=coord)
            )
    if not requests:
        raise MissingDataError(f"targets file {path} has no rows")
    return requests


def _cmd_predict(args) -> int:
    cfg = _resolve(args, "predict")
    panel, clusters, _ = _load_panel(cfg["panel"])
    _require(cfg, "targets", "--targets")
    out = _prepare_out(cfg, "predict")
    requests = _parse_targets(cfg["targets"], panel)
    fitted = _fit_from_cfg(panel, cfg)
    results = [blup(fitted, panel, clusters, req) for req in requests]
    write_predictions_csv(results, out / "predictions.csv")
    print(f"predict: {len(results)} targets -> {out}")
    return EX_OK


def _cmd_simulate(args) -> int:
    cfg = _resolve(args, "simulate")
    _require(cfg, "n", "--n")
    _require(cfg, "weeks", "--weeks")
    out = _prepare_out(cfg, "simulate")
    spec = SimSpec(
        n_sites=cfg["n"],
        n_weeks=cfg["weeks"],
        interaction=cfg["interaction"],
        n_covariates=cfg["covariates"],
        phi_s=cfg["phi_s"],
        phi_t=cfg["phi_t"],
        seed=cfg["seed"],
        replications=cfg["reps"],
    )
    result = size_power_study([spec], level=cfg["level"], workers=cfg["workers"])
    write_study_csv(result, out / "study.csv")
    cell = result.cells[0]
    print(
        f"simulate: rejection rate {cell.rejection_rate:.4f} "
        f"({cell.used} used, {cell.excluded} excluded) -> {out}"
    )
    return EX_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EX_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
