"""Shared fixtures and hand-built panels for the test suite."""
import datetime as dt

import numpy as np
import pytest

from stpanel.panel import PanelOrder, StationTable, WeekCalendar, WeeklyPanel


def make_panel(
    y: np.ndarray,
    member_of,
    coords=None,
    covariates=None,
    metric: str = "euclidean",
    start_date: dt.date = dt.date(2006, 1, 1),
    site_adjusted: bool = False,
) -> WeeklyPanel:
    """Assemble a WeeklyPanel directly from arrays.

    ``y`` is (n_sites, n_weeks). When ``site_adjusted`` the given values
    are treated as already mean-adjusted (site_means zero, z = y);
    otherwise each site's mean is removed the way ingestion would.
    """
    y = np.asarray(y, dtype=float)
    n, T = y.shape
    member_of = np.asarray(member_of, dtype=np.int64)
    if coords is None:
        coords = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
    if covariates is None:
        covariates = np.zeros((n, T, 0))
    covariates = np.asarray(covariates, dtype=float)
    p = covariates.shape[2]
    names = tuple(f"cov{j + 1}" for j in range(p))
    if site_adjusted:
        site_means = np.zeros(n)
        z = y.copy()
        adj = y
    else:
        site_means = y.mean(axis=1)
        z = y.copy()
        adj = y - site_means[:, None]
    return WeeklyPanel(
        sites=StationTable(tuple(f"s{i:02d}" for i in range(n)), np.asarray(coords, float)),
        calendar=WeekCalendar.synthetic(T, start_date=start_date),
        order=PanelOrder(member_of, T),
        z=z,
        y=adj,
        covariates=covariates,
        covariate_names=names,
        site_means=site_means,
        covariate_means=np.zeros(p),
        metric=metric,
    )


def brute_force_omega(order, coords, seasons, params, metric, v_scale=1.0, d_scale=1.0):
    """Entry-by-entry covariance build, straight from the definition.

    Entry (a, b) is psi^|t_a - t_b| * exp(-phi_s * dist(a, b)) when the
    two cells share a cluster, plus the season noise ratio on the
    diagonal; cells in different clusters are uncorrelated.
    """
    from stpanel.geo import pairwise_distances

    N = order.n_obs
    dist = pairwise_distances(coords, metric)
    psi = params.psi
    out = np.zeros((N, N))
    for a in range(N):
        for b in range(N):
            if order.flat_cluster[a] != order.flat_cluster[b]:
                continue
            ta, tb = order.flat_week[a], order.flat_week[b]
            sa, sb = order.flat_site[a], order.flat_site[b]
            out[a, b] = v_scale * psi ** abs(ta - tb) * np.exp(
                -params.phi_s * dist[sa, sb]
            )
            if a == b:
                out[a, b] += d_scale * params.tau2[seasons[ta] - 1]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20231115)


@pytest.fixture
def two_cluster_panel(rng):
    """Small 5-site, 7-week panel with two clusters and one covariate."""
    y = rng.normal(size=(5, 7))
    covs = rng.normal(size=(5, 7, 1))
    covs -= covs.mean()
    return make_panel(
        y, member_of=[0, 0, 1, 1, 1],
        coords=rng.uniform(0, 10, size=(5, 2)),
        covariates=covs, site_adjusted=True,
    )
