"""Station clustering.

Stations are grouped with plain k-means on their coordinates; the
cluster count follows a fixed rule of thumb (square root of the number
of stations, one cluster for five or fewer). Clusters define which
station pairs get a non-zero model covariance, so the assignment, its
centroids, and the metric used are kept together and written alongside
every artifact that depends on them.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CrossRefError, DomainError, SchemaError
from .geo import check_metric, distances_to_points
from .panel import StationTable


def choose_k(n_sites: int) -> int:
    """Default cluster count: 1 for tiny networks, floor(sqrt(n)) otherwise."""
    if n_sites < 1:
        raise DomainError(f"need at least one site, got {n_sites}")
    if n_sites <= 5:
        return 1
    return int(math.floor(math.sqrt(n_sites)))


@dataclass(frozen=True)
class ClusterAssignment:
    """Result of clustering a station table."""

    member_of: np.ndarray  # (n,) int, labels 0..k-1
    centroids: np.ndarray  # (k, 2) float
    metric: str
    objective: float
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        member_of = np.asarray(self.member_of, dtype=np.int64)
        centroids = np.asarray(self.centroids, dtype=float)
        if centroids.ndim != 2 or centroids.shape[1] != 2:
            raise SchemaError(f"centroids must be (k, 2), got {centroids.shape}")
        if member_of.min(initial=0) < 0 or member_of.max(initial=0) >= centroids.shape[0]:
            raise DomainError("cluster labels out of range")
        check_metric(self.metric)
        object.__setattr__(self, "member_of", member_of)
        object.__setattr__(self, "centroids", centroids)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_sites(self) -> int:
        return self.member_of.size


def _lloyd(coords: np.ndarray, centers: np.ndarray, metric: str, max_iter: int):
    """One k-means run. Returns (labels, centers, objective, trace)."""
    n, k = coords.shape[0], centers.shape[0]
    labels = None
    trace: list[float] = []
    best = (None, None, np.inf)
    for _ in range(max_iter):
        d = distances_to_points(coords, centers, metric)
        new_labels = np.argmin(d, axis=1)  # argmin takes the lowest index on ties
        # reseed empty clusters with the point currently farthest from its centre
        assigned_d = d[np.arange(n), new_labels]
        taken = np.zeros(n, dtype=bool)
        for c in range(k):
            if np.any(new_labels == c):
                continue
            cand = np.where(taken, -np.inf, assigned_d)
            far = int(np.argmax(cand))
            new_labels[far] = c
            taken[far] = True
            assigned_d = d[np.arange(n), new_labels]
        obj = float(np.sum(assigned_d**2))
        if trace and obj > trace[-1] + 1e-12:
            # geographic means can fail to lower great-circle cost; stop
            break
        trace.append(obj)
        best = (new_labels, centers, obj)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = np.stack([coords[labels == c].mean(axis=0) for c in range(k)])
    labels, _, obj = best
    centers = np.stack([coords[labels == c].mean(axis=0) for c in range(k)])
    return labels, centers, obj, trace


def kmeans(
    sites: StationTable,
    k: int,
    seed: int = 0,
    metric: str = "greatcircle",
    n_restarts: int = 10,
    max_iter: int = 200,
    init_centers: np.ndarray | None = None,
) -> ClusterAssignment:
    """Cluster stations by coordinates.

    Each restart seeds centres at k distinct stations; the run with the
    lowest sum of squared distances wins. Passing ``init_centers`` skips
    the restarts and makes the outcome independent of the seed.
    """
    check_metric(metric)
    n = sites.n
    if not (1 <= k <= n):
        raise DomainError(f"k must be in [1, {n}], got {k}")
    coords = sites.coords
    if init_centers is not None:
        init_centers = np.asarray(init_centers, dtype=float)
        if init_centers.shape != (k, 2):
            raise DomainError(f"init_centers must be ({k}, 2)")
        labels, centers, obj, trace = _lloyd(coords, init_centers, metric, max_iter)
        return ClusterAssignment(labels, centers, metric, obj, tuple(trace))
    rng = np.random.default_rng(seed)
    best: tuple | None = None
    for _ in range(n_restarts):
        start = coords[rng.choice(n, size=k, replace=False)]
        labels, centers, obj, trace = _lloyd(coords, start, metric, max_iter)
        if best is None or obj < best[2]:
            best = (labels, centers, obj, trace)
    labels, centers, obj, trace = best
    return ClusterAssignment(labels, centers, metric, obj, tuple(trace))


def assign_new_site(assignment: ClusterAssignment, coord) -> int:
    """Cluster label for an unseen coordinate: nearest centroid, ties low."""
    coord = np.asarray(coord, dtype=float).reshape(1, 2)
    d = distances_to_points(coord, assignment.centroids, assignment.metric)[0]
    return int(np.argmin(d))


def write_clusters_csv(path, sites: StationTable, assignment: ClusterAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "cluster"])
        for sid, label in zip(sites.ids, assignment.member_of):
            w.writerow([sid, int(label) + 1])


def write_centroids_csv(path, assignment: ClusterAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "lat", "lon"])
        for c, (lat, lon) in enumerate(assignment.centroids, start=1):
            w.writerow([c, f"{lat:.10g}", f"{lon:.10g}"])


def read_clusters_csv(path, sites: StationTable, metric: str = "greatcircle") -> ClusterAssignment:
    """Load a stored assignment and recompute centroids from coordinates."""
    member = np.full(sites.n, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"station_id", "cluster"}:
            raise SchemaError(f"{path}: expected columns station_id, cluster")
        for row in reader:
            sid = row["station_id"]
            try:
                idx = sites.index_of(sid)
            except KeyError:
                raise CrossRefError(f"{path}: unknown station {sid!r}") from None
            member[idx] = int(row["cluster"]) - 1
    if np.any(member < 0):
        missing = sites.ids[int(np.flatnonzero(member < 0)[0])]
        raise CrossRefError(f"{path}: no cluster for station {missing!r}")
    k = int(member.max()) + 1
    centroids = np.stack([sites.coords[member == c].mean(axis=0) for c in range(k)])
    obj = 0.0
    return ClusterAssignment(member, centroids, metric, obj)
