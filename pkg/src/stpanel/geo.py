"""Distance helpers for station coordinates.

Two metrics are supported everywhere a distance is taken: great-circle
distance in kilometres for (latitude, longitude) pairs, and plain
Euclidean distance for planar coordinates (used by the synthetic
studies). The metric choice travels with the clustering result so that
model covariances are always built with the same geometry that formed
the clusters.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError

EARTH_RADIUS_KM = 6371.0088

METRICS = ("greatcircle", "euclidean")


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise DomainError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


def great_circle_km(lat1, lon1, lat2, lon2):
    """Haversine distance in kilometres. Accepts scalars or arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=float)) for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    # clip guards the asin against roundoff just past 1
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def pairwise_distances(coords: np.ndarray, metric: str = "greatcircle") -> np.ndarray:
    """Symmetric distance matrix for an (m, 2) coordinate array."""
    check_metric(metric)
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DomainError(f"coords must be (m, 2), got {coords.shape}")
    if metric == "euclidean":
        diff = coords[:, None, :] - coords[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))
    d = great_circle_km(
        coords[:, None, 0], coords[:, None, 1], coords[None, :, 0], coords[None, :, 1]
    )
    np.fill_diagonal(d, 0.0)
    return d


def distances_to_points(coords: np.ndarray, points: np.ndarray, metric: str = "greatcircle") -> np.ndarray:
    """Distance matrix between rows of ``coords`` (m, 2) and ``points`` (r, 2)."""
    check_metric(metric)
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if metric == "euclidean":
        diff = coords[:, None, :] - points[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))
    return great_circle_km(
        coords[:, None, 0], coords[:, None, 1], points[None, :, 0], points[None, :, 1]
    )
