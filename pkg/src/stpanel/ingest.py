"""Raw data ingestion: station lists, hourly readings, weekly panels.

The pipeline goes hourly readings -> weekly aggregates -> model panel.
Aggregation rules: PM2.5, temperature, and humidity become the mean of
whatever hourly values a (station, week) cell has; wind speed becomes
the largest per-day mean inside the week. The model panel then takes
the square root of weekly PM2.5, removes each station's own average,
and centres every covariate on its global mean. Stations with a missing
week either stop the run or get a per-station linear interpolation in
time, depending on the chosen policy; interpolated cells stay flagged.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .clustering import ClusterAssignment
from .errors import (
    CrossRefError,
    DomainError,
    MissingDataError,
    ParseError,
    SchemaError,
)
from .panel import PanelOrder, StationTable, WeekCalendar, WeeklyPanel

READING_COLUMNS = ("station_id", "timestamp", "pm25", "temperature", "humidity", "wind_speed")
COVARIATE_NAMES = ("temperature", "humidity", "wind_speed")
MISSING_POLICIES = ("error", "interpolate")


def parse_stations(path) -> StationTable:
    """Read ``station_id,latitude,longitude`` and validate coordinates."""
    ids: list[str] = []
    coords: list[tuple[float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["station_id", "latitude", "longitude"]:
            raise SchemaError(f"{path}: expected header station_id,latitude,longitude")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            sid = row[0].strip()
            if not sid:
                raise ParseError("empty station_id", line=lineno)
            try:
                lat, lon = float(row[1]), float(row[2])
            except ValueError:
                raise ParseError(f"bad coordinate in {row[1]!r},{row[2]!r}", line=lineno) from None
            if sid in ids:
                raise SchemaError(f"{path} line {lineno}: duplicate station id {sid!r}")
            ids.append(sid)
            coords.append((lat, lon))
    if not ids:
        raise SchemaError(f"{path}: no stations")
    table = StationTable(tuple(ids), np.array(coords, dtype=float))
    table.validate_geographic()
    return table


def parse_readings(path, stations: StationTable) -> pd.DataFrame:
    """Read hourly readings; empty numeric fields become NaN.

    Returns a frame with columns station (int row index), date, pm25,
    temperature, humidity, wind_speed.
    """
    df = pd.read_csv(path, dtype={"station_id": str})
    missing = set(READING_COLUMNS) - set(df.columns)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    known = {sid: i for i, sid in enumerate(stations.ids)}
    unknown = df.loc[~df["station_id"].isin(known), "station_id"]
    if len(unknown):
        raise CrossRefError(f"{path}: reading for unknown station {unknown.iloc[0]!r}")
    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601", errors="coerce")
    if ts.isna().any():
        bad = int(np.flatnonzero(ts.isna())[0])
        raise ParseError(
            f"bad timestamp {df['timestamp'].iloc[bad]!r}", line=bad + 2
        )
    out = pd.DataFrame(
        {
            "station": df["station_id"].map(known).to_numpy(np.int64),
            "date": ts.dt.date,
        }
    )
    for col in ("pm25", "temperature", "humidity", "wind_speed"):
        vals = pd.to_numeric(df[col], errors="coerce")
        raw_blank = df[col].isna() | (df[col].astype(str).str.strip() == "")
        bad = vals.isna() & ~raw_blank
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ParseError(f"bad {col} value {df[col].iloc[i]!r}", line=i + 2)
        out[col] = vals.to_numpy(float)
    if (out["pm25"].dropna() < 0).any():
        i = int(np.flatnonzero(out["pm25"].to_numpy() < 0)[0])
        raise DomainError(f"{path}: negative pm25 at data row {i + 1}")
    return out


@dataclass(frozen=True)
class WeeklyTable:
    """Per (station, week) aggregates; NaN marks an empty cell."""

    calendar: WeekCalendar
    pm25: np.ndarray  # (n, T)
    covariates: np.ndarray  # (n, T, p) in COVARIATE_NAMES order


def infer_calendar(readings: pd.DataFrame) -> WeekCalendar:
    if not len(readings):
        raise MissingDataError("no readings to infer a study window from")
    return WeekCalendar.from_dates(readings["date"].min(), readings["date"].max())


def aggregate_weekly(
    readings: pd.DataFrame, stations: StationTable, calendar: WeekCalendar
) -> WeeklyTable:
    """Collapse hourly readings onto the weekly calendar."""
    n, T = stations.n, calendar.n_weeks
    offsets = np.array(
        [(d - calendar.start_date).days for d in readings["date"]], dtype=np.int64
    )
    if len(offsets) and (offsets.min() < 0 or offsets.max() >= calendar.n_days):
        i = int(np.flatnonzero((offsets < 0) | (offsets >= calendar.n_days))[0])
        raise DomainError(
            f"reading dated {readings['date'].iloc[i]} outside the study window"
        )
    df = readings.assign(week=offsets // 7)

    pm25 = np.full((n, T), np.nan)
    covs = np.full((n, T, len(COVARIATE_NAMES)), np.nan)

    weekly_mean = df.groupby(["station", "week"])[["pm25", "temperature", "humidity"]].mean()
    idx_s = weekly_mean.index.get_level_values(0).to_numpy()
    idx_w = weekly_mean.index.get_level_values(1).to_numpy()
    pm25[idx_s, idx_w] = weekly_mean["pm25"].to_numpy()
    covs[idx_s, idx_w, 0] = weekly_mean["temperature"].to_numpy()
    covs[idx_s, idx_w, 1] = weekly_mean["humidity"].to_numpy()

    # wind: average within each day first, then take the week's largest day
    daily = df.groupby(["station", "week", "date"])["wind_speed"].mean()
    weekly_max = daily.groupby(level=[0, 1]).max()
    idx_s = weekly_max.index.get_level_values(0).to_numpy()
    idx_w = weekly_max.index.get_level_values(1).to_numpy()
    covs[idx_s, idx_w, 2] = weekly_max.to_numpy()

    return WeeklyTable(calendar=calendar, pm25=pm25, covariates=covs)


def _fill_series(values: np.ndarray, label: str, station_id: str) -> np.ndarray:
    """Linear interpolation over week index; flat at the ends."""
    obs = np.flatnonzero(~np.isnan(values))
    if obs.size == 0:
        raise MissingDataError(f"station {station_id}: no {label} data in the whole window")
    gaps = np.flatnonzero(np.isnan(values))
    out = values.copy()
    out[gaps] = np.interp(gaps, obs, values[obs])
    return out


def build_panel(
    weekly: WeeklyTable,
    stations: StationTable,
    clusters: ClusterAssignment,
    missing_policy: str = "error",
) -> WeeklyPanel:
    """Transform weekly aggregates into the centred, ordered model panel."""
    if missing_policy not in MISSING_POLICIES:
        raise DomainError(
            f"unknown missing policy {missing_policy!r}; expected one of {MISSING_POLICIES}"
        )
    if clusters.n_sites != stations.n:
        raise CrossRefError("cluster assignment does not cover the station table")
    calendar = weekly.calendar
    pm25 = weekly.pm25.copy()
    covs = weekly.covariates.copy()
    missing = np.isnan(pm25) | np.isnan(covs).any(axis=2)
    if missing.any():
        if missing_policy == "error":
            s, w = np.argwhere(missing)[0]
            raise MissingDataError(
                f"station {stations.ids[s]} has no complete data for week {w + 1}"
            )
        for s in range(stations.n):
            pm25[s] = _fill_series(pm25[s], "pm25", stations.ids[s])
            for j in range(covs.shape[2]):
                covs[s, :, j] = _fill_series(covs[s, :, j], COVARIATE_NAMES[j], stations.ids[s])
    if (pm25 < 0).any():
        s, w = np.argwhere(pm25 < 0)[0]
        raise DomainError(f"negative weekly pm25 at station {stations.ids[s]}, week {w + 1}")

    z = np.sqrt(pm25)
    site_means = z.mean(axis=1)
    y = z - site_means[:, None]
    covariate_means = covs.reshape(-1, covs.shape[2]).mean(axis=0)
    centered = covs - covariate_means[None, None, :]

    return WeeklyPanel(
        sites=stations,
        calendar=calendar,
        order=PanelOrder(clusters.member_of, calendar.n_weeks),
        z=z,
        y=y,
        covariates=centered,
        covariate_names=COVARIATE_NAMES,
        site_means=site_means,
        covariate_means=covariate_means,
        metric=clusters.metric,
        interpolated=missing if missing.any() else None,
    )


def write_panel_csv(panel: WeeklyPanel, path) -> None:
    """Canonical-order panel rows with 10 significant digits."""
    order = panel.order
    seasons = panel.week_seasons
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "week", "station_id", "season", "y", "z", *panel.covariate_names])
        for pos in range(order.n_obs):
            s = order.flat_site[pos]
            t = order.flat_week[pos]
            row = [
                int(order.flat_cluster[pos]) + 1,
                int(t) + 1,
                panel.sites.ids[s],
                int(seasons[t]),
                f"{panel.y[s, t]:.10g}",
                f"{panel.z[s, t]:.10g}",
            ]
            row += [f"{v:.10g}" for v in panel.covariates[s, t]]
            w.writerow(row)


def write_stations_csv(stations: StationTable, path) -> None:
    """Normalized copy of the station table for self-contained artifacts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "latitude", "longitude"])
        for sid, (lat, lon) in zip(stations.ids, stations.coords):
            w.writerow([sid, f"{lat:.10g}", f"{lon:.10g}"])


def write_panel_meta(panel: WeeklyPanel, path) -> None:
    meta = {
        "start_date": panel.calendar.start_date.isoformat(),
        "n_weeks": panel.calendar.n_weeks,
        "n_days": panel.calendar.n_days,
        "metric": panel.metric,
        "covariate_names": list(panel.covariate_names),
        "covariate_means": [float(v) for v in panel.covariate_means],
        "site_means": {sid: float(m) for sid, m in zip(panel.sites.ids, panel.site_means)},
        "n_interpolated": 0 if panel.interpolated is None else int(panel.interpolated.sum()),
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_panel(panel_csv, meta_json, stations: StationTable) -> WeeklyPanel:
    """Rebuild a panel written by :func:`write_panel_csv`/:func:`write_panel_meta`."""
    with open(meta_json) as fh:
        meta = json.load(fh)
    calendar = WeekCalendar(
        start_date=dt.date.fromisoformat(meta["start_date"]),
        n_weeks=int(meta["n_weeks"]),
        n_days=int(meta["n_days"]),
    )
    names = tuple(meta["covariate_names"])
    df = pd.read_csv(panel_csv, dtype={"station_id": str})
    expected = ["cluster", "week", "station_id", "season", "y", "z", *names]
    if list(df.columns) != expected:
        raise SchemaError(f"{panel_csv}: expected columns {expected}")
    n, T = stations.n, calendar.n_weeks
    if len(df) != n * T:
        raise SchemaError(f"{panel_csv}: expected {n * T} rows, got {len(df)}")
    rows = df["station_id"].map({sid: i for i, sid in enumerate(stations.ids)})
    if rows.isna().any():
        bad = df["station_id"][rows.isna()].iloc[0]
        raise CrossRefError(f"{panel_csv}: unknown station {bad!r}")
    srow = rows.to_numpy(np.int64)
    week = df["week"].to_numpy(np.int64) - 1
    if week.min() < 0 or week.max() >= T:
        raise DomainError(f"{panel_csv}: week index outside 1..{T}")
    member = np.full(n, -1, dtype=np.int64)
    member[srow] = df["cluster"].to_numpy(np.int64) - 1

    z = np.full((n, T), np.nan)
    yv = np.full((n, T), np.nan)
    covs = np.full((n, T, len(names)), np.nan)
    z[srow, week] = df["z"].to_numpy(float)
    yv[srow, week] = df["y"].to_numpy(float)
    for j, name in enumerate(names):
        covs[srow, week, j] = df[name].to_numpy(float)
    if np.isnan(z).any() or np.isnan(yv).any():
        s, w = np.argwhere(np.isnan(z) | np.isnan(yv))[0]
        raise MissingDataError(
            f"{panel_csv}: missing cell for station {stations.ids[s]}, week {w + 1}"
        )
    site_means = np.array([meta["site_means"][sid] for sid in stations.ids], dtype=float)
    return WeeklyPanel(
        sites=stations,
        calendar=calendar,
        order=PanelOrder(member, T),
        z=z,
        y=yv,
        covariates=covs,
        covariate_names=names,
        site_means=site_means,
        covariate_means=np.array(meta["covariate_means"], dtype=float),
        metric=meta["metric"],
    )
