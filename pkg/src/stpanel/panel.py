"""Core panel types: stations, the weekly calendar, and the ordered panel.

A panel holds one response value and a fixed set of covariates per
(station, week) cell. Estimation works on a single stacked vector, so
the panel also carries its canonical ordering: observations are grouped
by cluster, then by week within the cluster, then by station within the
week. For a cluster holding stations (a, b) the stacked vector starts
y(a, 1), y(b, 1), y(a, 2), y(b, 2) and so on. Station order inside a
cluster follows the station table, which makes the layout reproducible
from (stations, clusters) alone.

Week indices are 0-based internally; file formats and error messages
use 1-based weeks.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MissingDataError, SchemaError

N_SEASONS = 12


@dataclass(frozen=True)
class StationTable:
    """Monitoring sites with 2-d coordinates.

    Coordinates are (latitude, longitude) degrees for geographic data or
    plain planar (x, y) for synthetic studies; the metric flag carried by
    downstream objects says which reading applies.
    """

    ids: tuple[str, ...]
    coords: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise SchemaError(f"station coords must be (n, 2), got {coords.shape}")
        if len(self.ids) != coords.shape[0]:
            raise SchemaError("station ids and coords disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise SchemaError("duplicate station ids")
        if not np.all(np.isfinite(coords)):
            raise DomainError("station coordinates must be finite")
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return len(self.ids)

    def index_of(self, station_id: str) -> int:
        try:
            return self.ids.index(station_id)
        except ValueError:
            raise KeyError(station_id) from None

    def validate_geographic(self) -> None:
        lat, lon = self.coords[:, 0], self.coords[:, 1]
        bad = np.flatnonzero((lat < -90) | (lat > 90))
        if bad.size:
            raise DomainError(
                f"station {self.ids[bad[0]]}: latitude {lat[bad[0]]} outside [-90, 90]"
            )
        bad = np.flatnonzero((lon < -180) | (lon > 180))
        if bad.size:
            raise DomainError(
                f"station {self.ids[bad[0]]}: longitude {lon[bad[0]]} outside [-180, 180]"
            )


@dataclass(frozen=True)
class WeekCalendar:
    """Consecutive 7-day blocks from a start date.

    The final block is kept even when the study window does not divide
    evenly into weeks. Each week's season is the calendar month of its
    fourth day, which also defines seasons for weeks past the observed
    window (forecast targets).
    """

    start_date: dt.date
    n_weeks: int
    n_days: int

    @classmethod
    def from_dates(cls, start_date: dt.date, end_date: dt.date) -> "WeekCalendar":
        if end_date < start_date:
            raise DomainError(f"end date {end_date} precedes start date {start_date}")
        n_days = (end_date - start_date).days + 1
        n_weeks = -(-n_days // 7)
        return cls(start_date=start_date, n_weeks=n_weeks, n_days=n_days)

    @classmethod
    def synthetic(cls, n_weeks: int, start_date: dt.date = dt.date(2006, 1, 1)) -> "WeekCalendar":
        if n_weeks < 1:
            raise DomainError("calendar needs at least one week")
        return cls(start_date=start_date, n_weeks=n_weeks, n_days=7 * n_weeks)

    def week_of_date(self, day: dt.date) -> int:
        """0-based week index of a day inside the study window."""
        offset = (day - self.start_date).days
        if offset < 0 or offset >= self.n_days:
            raise DomainError(f"date {day} outside study window")
        return offset // 7

    def week_start(self, week: int) -> dt.date:
        return self.start_date + dt.timedelta(days=7 * week)

    def season_of_week(self, week: int) -> int:
        """Season (calendar month, 1..12) of a 0-based week index."""
        if week < 0:
            raise DomainError("week index must be non-negative")
        return (self.start_date + dt.timedelta(days=7 * week + 3)).month

    def seasons(self) -> np.ndarray:
        """Season of every observed week, shape (n_weeks,)."""
        return np.array([self.season_of_week(t) for t in range(self.n_weeks)], dtype=np.int64)

    def truncated(self, n_weeks: int) -> "WeekCalendar":
        if not (1 <= n_weeks <= self.n_weeks):
            raise DomainError("truncation length outside calendar")
        return WeekCalendar(
            start_date=self.start_date,
            n_weeks=n_weeks,
            n_days=min(self.n_days, 7 * n_weeks),
        )


class PanelOrder:
    """Canonical stacking of (station, week) cells.

    Built from a cluster membership vector; stations keep their station
    table order inside each cluster. Provides O(N) gather/scatter between
    (station, week) matrices and the stacked vector.
    """

    def __init__(self, member_of: np.ndarray, n_weeks: int):
        member_of = np.asarray(member_of, dtype=np.int64)
        if member_of.ndim != 1:
            raise SchemaError("cluster membership must be a 1-d array")
        if n_weeks < 1:
            raise DomainError("panel needs at least one week")
        n_clusters = int(member_of.max()) + 1 if member_of.size else 0
        if member_of.size and member_of.min() < 0:
            raise DomainError("cluster labels must be non-negative")
        self.member_of = member_of
        self.n_sites = member_of.size
        self.n_weeks = int(n_weeks)
        self.n_clusters = n_clusters
        self.sites_by_cluster = [np.flatnonzero(member_of == k) for k in range(n_clusters)]
        sizes = np.array([s.size for s in self.sites_by_cluster], dtype=np.int64)
        if n_clusters and sizes.min() == 0:
            raise DomainError("every cluster label up to the maximum must be used")
        self.cluster_sizes = sizes
        starts = np.concatenate([[0], np.cumsum(sizes * self.n_weeks)])
        self.cluster_starts = starts
        self.position_in_cluster = np.empty(self.n_sites, dtype=np.int64)
        for rows in self.sites_by_cluster:
            self.position_in_cluster[rows] = np.arange(rows.size)
        # flat gather indices, laid out cluster by cluster, week-major inside
        flat_site = np.empty(self.n_obs, dtype=np.int64)
        flat_week = np.empty(self.n_obs, dtype=np.int64)
        for k, rows in enumerate(self.sites_by_cluster):
            nk = rows.size
            block = slice(starts[k], starts[k + 1])
            flat_site[block] = np.tile(rows, self.n_weeks)
            flat_week[block] = np.repeat(np.arange(self.n_weeks), nk)
        self.flat_site = flat_site
        self.flat_week = flat_week
        self.flat_cluster = member_of[flat_site]

    @property
    def n_obs(self) -> int:
        return self.n_sites * self.n_weeks

    def cluster_slice(self, k: int) -> slice:
        return slice(int(self.cluster_starts[k]), int(self.cluster_starts[k + 1]))

    def flatten(self, by_site_week: np.ndarray) -> np.ndarray:
        """Stack an (n_sites, n_weeks, ...) array into canonical order."""
        a = np.asarray(by_site_week)
        if a.shape[:2] != (self.n_sites, self.n_weeks):
            raise SchemaError(
                f"expected leading shape {(self.n_sites, self.n_weeks)}, got {a.shape[:2]}"
            )
        return a[self.flat_site, self.flat_week]

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`flatten` for one stacked vector or matrix."""
        flat = np.asarray(flat)
        if flat.shape[0] != self.n_obs:
            raise SchemaError(f"expected {self.n_obs} stacked values, got {flat.shape[0]}")
        out = np.empty((self.n_sites, self.n_weeks) + flat.shape[1:], dtype=flat.dtype)
        out[self.flat_site, self.flat_week] = flat
        return out

    def to_flat(self, cluster: int, week: int, position: int) -> int:
        nk = int(self.cluster_sizes[cluster])
        return int(self.cluster_starts[cluster]) + week * nk + position


@dataclass
class WeeklyPanel:
    """A complete weekly panel ready for model fitting.

    ``z`` is the transformed observation (square root of weekly PM2.5),
    ``y`` the site-mean-adjusted response actually modelled, and the
    covariates are stored already centred. Stored means let predictions
    re-centre new inputs and map fitted values back to raw PM2.5.
    """

    sites: StationTable
    calendar: WeekCalendar
    order: PanelOrder
    z: np.ndarray  # (n_sites, n_weeks)
    y: np.ndarray  # (n_sites, n_weeks)
    covariates: np.ndarray  # (n_sites, n_weeks, p)
    covariate_names: tuple[str, ...]
    site_means: np.ndarray  # (n_sites,)
    covariate_means: np.ndarray  # (p,)
    metric: str
    interpolated: np.ndarray | None = None  # (n_sites, n_weeks) bool
    _week_seasons: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n, T = self.sites.n, self.calendar.n_weeks
        for name, arr, shape in (
            ("z", self.z, (n, T)),
            ("y", self.y, (n, T)),
            ("covariates", self.covariates, (n, T, len(self.covariate_names))),
            ("site_means", self.site_means, (n,)),
            ("covariate_means", self.covariate_means, (len(self.covariate_names),)),
        ):
            arr = np.asarray(arr, dtype=float)
            if arr.shape != shape:
                raise SchemaError(f"panel field {name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)
        if self.order.n_sites != n or self.order.n_weeks != T:
            raise SchemaError("panel ordering does not match sites/calendar")
        if self._week_seasons is None:
            self._week_seasons = self.calendar.seasons()

    @property
    def n_sites(self) -> int:
        return self.sites.n

    @property
    def n_weeks(self) -> int:
        return self.calendar.n_weeks

    @property
    def n_obs(self) -> int:
        return self.order.n_obs

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def week_seasons(self) -> np.ndarray:
        """Season (1..12) of each observed week."""
        return self._week_seasons

    def y_flat(self) -> np.ndarray:
        return self.order.flatten(self.y)

    def z_flat(self) -> np.ndarray:
        return self.order.flatten(self.z)

    def covariates_flat(self) -> np.ndarray:
        return self.order.flatten(self.covariates)

    def check_invariants(self, centered: bool = True, tol: float = 1e-10) -> None:
        """Raise unless the panel satisfies its construction contracts."""
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.z)):
            raise MissingDataError("panel contains non-finite responses")
        if not np.all(np.isfinite(self.covariates)):
            raise MissingDataError("panel contains non-finite covariates")
        if centered:
            site_dev = np.abs(self.y.mean(axis=1)).max() if self.n_weeks else 0.0
            if site_dev > tol:
                raise DomainError(f"per-site mean of y deviates from 0 by {site_dev:.2e}")
            if self.n_covariates:
                cov_dev = np.abs(self.covariates.reshape(-1, self.n_covariates).mean(axis=0)).max()
                if cov_dev > tol:
                    raise DomainError(f"covariate means deviate from 0 by {cov_dev:.2e}")

    def slice_weeks(self, n_keep: int) -> "WeeklyPanel":
        """Panel restricted to the first ``n_keep`` weeks.

        Stored means are kept as-is: the slice re-uses the original
        adjustment so the response stays comparable across windows.
        """
        cal = self.calendar.truncated(n_keep)
        return WeeklyPanel(
            sites=self.sites,
            calendar=cal,
            order=PanelOrder(self.order.member_of, n_keep),
            z=self.z[:, :n_keep].copy(),
            y=self.y[:, :n_keep].copy(),
            covariates=self.covariates[:, :n_keep, :].copy(),
            covariate_names=self.covariate_names,
            site_means=self.site_means,
            covariate_means=self.covariate_means,
            metric=self.metric,
            interpolated=None if self.interpolated is None else self.interpolated[:, :n_keep].copy(),
        )
