"""Fixed-effects design for the panel regression.

Each stacked observation contributes one row: the centred covariates,
indicator columns for seasons 2..12 (season 1 is the reference and gets
no column, which pins the seasonal level), and one column per cluster
holding the scaled week for that cluster's rows and zero elsewhere.
Those last columns carry the cluster-specific time trends whose
coefficients the interaction test is about.

Week t of T maps to (t - 1)/(T - 1), so trends live on [0, 1] whatever
the panel length; a single-week panel maps to 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError, RankError
from .panel import N_SEASONS, WeeklyPanel


def scale_time(t: int, n_weeks: int) -> float:
    """Scaled position of 1-based week ``t`` on [0, 1]."""
    if n_weeks < 1:
        raise DomainError("n_weeks must be positive")
    if not (1 <= t <= n_weeks):
        raise DomainError(f"week {t} outside 1..{n_weeks}")
    if n_weeks == 1:
        return 0.0
    return (t - 1) / (n_weeks - 1)


def scaled_week_grid(n_weeks: int) -> np.ndarray:
    """Scaled positions of all observed weeks (0-based convenience)."""
    if n_weeks == 1:
        return np.zeros(1)
    return np.arange(n_weeks) / (n_weeks - 1)


@dataclass(frozen=True)
class DesignMatrix:
    """Stacked design with labelled column groups."""

    X: np.ndarray  # (N, q)
    labels: tuple[str, ...]
    n_covariates: int
    n_clusters: int
    covariate_cols: slice
    season_cols: slice
    interaction_cols: slice

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def restricted(self) -> np.ndarray:
        """Columns kept under the no-interaction null."""
        return self.X[:, : self.interaction_cols.start]

    @property
    def interaction(self) -> np.ndarray:
        return self.X[:, self.interaction_cols]


def _check_rank(X: np.ndarray, labels: tuple[str, ...]) -> None:
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = diag[0] if diag.size else 0.0
    tol = max(X.shape) * np.finfo(float).eps * scale
    small = np.flatnonzero(diag <= tol)
    if scale == 0.0 or small.size:
        col = piv[small[0]] if small.size else piv[0]
        raise RankError(f"design is rank deficient at column {labels[col]!r}")


def build_design(panel: WeeklyPanel) -> DesignMatrix:
    """Assemble the stacked design in the panel's canonical order."""
    order = panel.order
    N = order.n_obs
    p = panel.n_covariates
    K = order.n_clusters
    seasons = panel.week_seasons
    tgrid = scaled_week_grid(panel.n_weeks)

    q = p + (N_SEASONS - 1) + K
    X = np.zeros((N, q))
    X[:, :p] = panel.covariates_flat()

    season_flat = seasons[order.flat_week]
    for j in range(2, N_SEASONS + 1):
        X[season_flat == j, p + j - 2] = 1.0

    t_flat = tgrid[order.flat_week]
    for k in range(K):
        rows = order.flat_cluster == k
        X[rows, p + N_SEASONS - 1 + k] = t_flat[rows]

    labels = (
        tuple(panel.covariate_names)
        + tuple(f"season_{j}" for j in range(2, N_SEASONS + 1))
        + tuple(f"trend_cluster_{k + 1}" for k in range(K))
    )
    _check_rank(X, labels)
    return DesignMatrix(
        X=X,
        labels=labels,
        n_covariates=p,
        n_clusters=K,
        covariate_cols=slice(0, p),
        season_cols=slice(p, p + N_SEASONS - 1),
        interaction_cols=slice(p + N_SEASONS - 1, q),
    )


def design_row(
    covariates_centered: np.ndarray,
    season: int,
    cluster: int,
    t_scaled: float,
    n_covariates: int,
    n_clusters: int,
) -> np.ndarray:
    """One design row for an arbitrary (site, week) target.

    Used for forecasting, where the week may lie past the fitted window
    and the scaled time extends the training map beyond 1.
    """
    if not (1 <= season <= N_SEASONS):
        raise DomainError(f"season {season} outside 1..{N_SEASONS}")
    if not (0 <= cluster < n_clusters):
        raise DomainError(f"cluster {cluster} outside 0..{n_clusters - 1}")
    covariates_centered = np.asarray(covariates_centered, dtype=float).ravel()
    if covariates_centered.size != n_covariates:
        raise DomainError(
            f"expected {n_covariates} covariates, got {covariates_centered.size}"
        )
    row = np.zeros(n_covariates + (N_SEASONS - 1) + n_clusters)
    row[:n_covariates] = covariates_centered
    if season >= 2:
        row[n_covariates + season - 2] = 1.0
    row[n_covariates + N_SEASONS - 1 + cluster] = t_scaled
    return row
