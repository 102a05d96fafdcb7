"""Separable space-time covariance over cluster blocks.

The error process splits into a spatio-temporal random effect and
season-heteroscedastic noise. At correlation scale (overall variance
factored out) the covariance of the stacked panel is block diagonal
over clusters, and each cluster block is

    B_k = S_t (x) S_k + D (x) I_{n_k}

with S_t the AR(1) weekly correlation (entries psi^|i-j|, where
psi = exp(-phi_t * d_t) and d_t is the week spacing, normally 1),
S_k the exponential spatial correlation
exp(-phi_s * dist) among the cluster's stations, and D the diagonal of
per-week noise variances tau^2_{season(t)}. Stations in different
clusters are exactly uncorrelated.

Two engines compute with these blocks:

* ``spectral`` (default) never forms a block. It eigendecomposes each
  S_k once; solves and log-determinants then ride on one generalised
  eigenproblem of (S_t, D) shared by every cluster, while the symmetric
  inverse square root uses one T x T eigendecomposition per spatial
  eigenvector. Linear solves cost O(T^2 n_k) per cluster instead of
  O((T n_k)^3).
* ``dense`` factorises each block outright. It exists as the reference
  path; both engines must agree to tight tolerance and the environment
  variable STPANEL_COV_ENGINE=dense swaps it in everywhere.

If a factorisation reports a non-positive pivot the block diagonal gets
one jitter of 1e-10 times its mean and the factorisation is retried;
a second failure raises ConditioningError.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .clustering import ClusterAssignment
from .errors import ConditioningError, DomainError, SchemaError
from .geo import check_metric, pairwise_distances
from .panel import N_SEASONS, PanelOrder, WeekCalendar

ENGINES = ("spectral", "dense")
ENGINE_ENV = "STPANEL_COV_ENGINE"
JITTER_REL = 1e-10


def exp_corr(x, decay: float):
    """Exponential correlation exp(-decay * x) for distances x >= 0."""
    if decay <= 0:
        raise DomainError(f"decay must be positive, got {decay}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("distances must be non-negative")
    out = np.exp(-decay * x)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CovarianceParams:
    """Variance and decay parameters for one fitted model.

    ``tau2`` holds the twelve per-season noise-to-signal ratios; the
    first season is the reference and stays pinned at 1. ``d_t`` is the
    spacing between consecutive observations in the units the temporal
    decay is quoted in. Weekly panels use d_t = 1 (gaps counted in
    weeks), making ``psi = exp(-phi_t)`` the week-to-week correlation;
    with phi_t around 1 the correlation dies off within a few weeks,
    which matches the interpretation of the decay grid values.
    """

    sigma2: float
    tau2: np.ndarray  # (12,)
    phi_s: float
    phi_t: float
    d_t: float = 1.0

    def __post_init__(self):
        tau2 = np.asarray(self.tau2, dtype=float)
        if tau2.shape != (N_SEASONS,):
            raise SchemaError(f"tau2 must have {N_SEASONS} entries, got {tau2.shape}")
        object.__setattr__(self, "tau2", tau2)

    @classmethod
    def for_panel(
        cls,
        phi_s: float,
        phi_t: float,
        n_weeks: int | None = None,
        sigma2: float = 1.0,
        tau2: np.ndarray | None = None,
    ) -> "CovarianceParams":
        """Starting parameters for a weekly panel: unit ratios, d_t = 1.

        ``n_weeks`` is accepted for call-site symmetry but does not
        affect the spacing; weekly gaps are counted in weeks.
        """
        if tau2 is None:
            tau2 = np.ones(N_SEASONS)
        return cls(sigma2=sigma2, tau2=tau2, phi_s=phi_s, phi_t=phi_t, d_t=1.0)

    @property
    def psi(self) -> float:
        return float(np.exp(-self.phi_t * self.d_t))

    def validate(self) -> None:
        if not (self.sigma2 > 0):
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        if not (self.phi_s > 0 and self.phi_t > 0):
            raise DomainError("decay parameters must be positive")
        if not (self.d_t > 0):
            raise DomainError("temporal spacing must be positive")
        if not np.all(self.tau2 > 0):
            raise DomainError("all tau2 must be positive")
        if self.tau2[0] != 1.0:
            raise DomainError(f"tau2 for the reference season must be 1, got {self.tau2[0]}")
        if not (0.0 < self.psi < 1.0):
            raise DomainError(f"lag-one temporal correlation {self.psi} outside (0, 1)")

    def with_tau2(self, tau2: np.ndarray) -> "CovarianceParams":
        return replace(self, tau2=np.asarray(tau2, dtype=float))


def ar1_matrix(psi: float, n_weeks: int) -> np.ndarray:
    lags = np.abs(np.subtract.outer(np.arange(n_weeks), np.arange(n_weeks)))
    return np.power(psi, lags.astype(float))


def _psd_eigh(mat: np.ndarray, context: str, floor_tiny: bool = True):
    """Eigendecomposition that tolerates roundoff, jitters once, then fails."""
    w, v = np.linalg.eigh(mat)
    scale = max(float(np.abs(w).max(initial=0.0)), 1e-300)
    if w.min() < -1e-12 * scale:
        jitter = JITTER_REL * float(np.mean(np.diag(mat)))
        w, v = np.linalg.eigh(mat + jitter * np.eye(mat.shape[0]))
        if w.min() < -1e-12 * max(float(np.abs(w).max()), 1e-300):
            raise ConditioningError(f"{context}: smallest pivot {w.min():.3e} after jitter")
    if floor_tiny:
        w = np.maximum(w, 0.0)
    return w, v


def _pd_eigh(mat: np.ndarray, context: str):
    """Like :func:`_psd_eigh` but demands strictly positive eigenvalues."""
    w, v = np.linalg.eigh(mat)
    if w.min() <= 0:
        jitter = JITTER_REL * float(np.mean(np.diag(mat)))
        w, v = np.linalg.eigh(mat + jitter * np.eye(mat.shape[0]))
        if w.min() <= 0:
            raise ConditioningError(f"{context}: smallest pivot {w.min():.3e} after jitter")
    return w, v


class _Structure:
    """Per-panel pieces that do not depend on the noise ratios tau2."""

    def __init__(
        self,
        order: PanelOrder,
        coords: np.ndarray,
        calendar: WeekCalendar,
        phi_s: float,
        phi_t: float,
        d_t: float,
        metric: str,
    ):
        self.order = order
        self.calendar = calendar
        self.metric = metric
        self.n_weeks = order.n_weeks
        self.seasons = calendar.seasons()
        psi = float(np.exp(-phi_t * d_t))
        self.sigma_t = ar1_matrix(psi, self.n_weeks)
        self.sigma_s: list[np.ndarray] = []
        self.lam: list[np.ndarray] = []
        self.U: list[np.ndarray] = []
        for k, rows in enumerate(order.sites_by_cluster):
            dist = pairwise_distances(coords[rows], metric)
            mat = exp_corr(dist, phi_s)
            self.sigma_s.append(mat)
            w, v = _psd_eigh(mat, f"spatial correlation, cluster {k + 1}")
            self.lam.append(w)
            self.U.append(v)
        self.weeks_by_season = [
            np.flatnonzero(self.seasons == j + 1) for j in range(N_SEASONS)
        ]
        self._season_eigs: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def season_eig(self, season: int):
        """Eigendecomposition of the temporal correlation within one season."""
        if season not in self._season_eigs:
            weeks = self.weeks_by_season[season - 1]
            sub = self.sigma_t[np.ix_(weeks, weeks)]
            self._season_eigs[season] = _psd_eigh(sub, f"season {season} temporal block")
        return self._season_eigs[season]


class BlockCovariance:
    """The panel covariance at correlation scale, fixed tau2.

    All vector arguments are stacked in the panel's canonical order;
    two-dimensional right hand sides are treated column by column.
    """

    def __init__(
        self,
        structure: _Structure,
        params: CovarianceParams,
        engine: str,
        v_scale: float = 1.0,
        d_scale: float = 1.0,
    ):
        if engine not in ENGINES:
            raise DomainError(f"unknown engine {engine!r}; expected one of {ENGINES}")
        self.structure = structure
        self.params = params
        self.engine = engine
        self.v_scale = float(v_scale)
        self.d_scale = float(d_scale)
        self.order = structure.order
        self.d_tau = params.tau2[structure.seasons - 1]
        self._gen: tuple[np.ndarray, np.ndarray] | None = None
        self._modes: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._dense: list[tuple[np.ndarray, np.ndarray]] | None = None

    # -- construction helpers -------------------------------------------------

    @property
    def n_obs(self) -> int:
        return self.order.n_obs

    def with_tau2(self, tau2: np.ndarray) -> "BlockCovariance":
        """Same panel and decay, new noise ratios; shares cached structure."""
        return BlockCovariance(
            self.structure,
            self.params.with_tau2(tau2),
            self.engine,
            self.v_scale,
            self.d_scale,
        )

    def _generalized(self):
        """Eigenpairs of S_t relative to D: G' S_t G = diag(mu), G' D G = I."""
        if self._gen is None:
            rootd = np.sqrt(self.d_tau)
            A = self.structure.sigma_t / np.outer(rootd, rootd)
            mu, Q = _psd_eigh(A, "temporal correlation against noise diagonal")
            G = Q / rootd[:, None]
            self._gen = (mu, G)
        return self._gen

    def _mode_factors(self):
        """Per spatial eigenvector: eigendecomposition of lam_i S_t + D."""
        if self._modes is None:
            st = self.structure.sigma_t
            dmat = np.diag(self.d_scale * self.d_tau)
            out = []
            for k, lam in enumerate(self.structure.lam):
                M = self.v_scale * lam[:, None, None] * st[None, :, :] + dmat[None, :, :]
                nu, V = np.linalg.eigh(M)
                for i in np.flatnonzero(nu.min(axis=1) <= 0):
                    nu[i], V[i] = _pd_eigh(M[i], f"cluster {k + 1} temporal mode")
                out.append((nu, V))
            self._modes = out
        return self._modes

    def _dense_factors(self):
        if self._dense is None:
            out = []
            for k in range(self.order.n_clusters):
                w, Q = _pd_eigh(self.dense_block(k), f"cluster {k + 1} block")
                out.append((w, Q))
            self._dense = out
        return self._dense

    def dense_block(self, k: int) -> np.ndarray:
        """Materialise one cluster block (debugging and small-N checks)."""
        st = self.structure.sigma_t
        ss = self.structure.sigma_s[k]
        nk = ss.shape[0]
        block = self.v_scale * np.kron(st, ss)
        block += self.d_scale * np.kron(np.diag(self.d_tau), np.eye(nk))
        return block

    def dense_omega(self) -> np.ndarray:
        """Full dense covariance; zero across clusters. Small panels only."""
        N = self.n_obs
        out = np.zeros((N, N))
        for k in range(self.order.n_clusters):
            sl = self.order.cluster_slice(k)
            out[sl, sl] = self.dense_block(k)
        return out

    # -- linear algebra -------------------------------------------------------

    def _foreach_block(self, rhs: np.ndarray, apply_one):
        rhs = np.asarray(rhs, dtype=float)
        single = rhs.ndim == 1
        mat = rhs[:, None] if single else rhs
        if mat.shape[0] != self.n_obs:
            raise SchemaError(f"rhs has {mat.shape[0]} rows, panel has {self.n_obs}")
        out = np.empty_like(mat)
        T = self.structure.n_weeks
        for k in range(self.order.n_clusters):
            sl = self.order.cluster_slice(k)
            nk = int(self.order.cluster_sizes[k])
            R = mat[sl].reshape(T, nk, -1)
            out[sl] = apply_one(k, R).reshape(sl.stop - sl.start, -1)
        return out[:, 0] if single else out

    def matvec(self, rhs: np.ndarray) -> np.ndarray:
        """Multiply by the covariance without forming it."""
        st = self.structure.sigma_t

        def one(k, R):
            ss = self.structure.sigma_s[k]
            flatR = R.reshape(R.shape[0], -1)
            tmp = (st @ flatR).reshape(R.shape)
            tmp = self.v_scale * np.matmul(tmp.transpose(0, 2, 1), ss).transpose(0, 2, 1)
            tmp += self.d_scale * self.d_tau[:, None, None] * R
            return tmp

        return self._foreach_block(rhs, one)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the inverse covariance."""
        if self.engine == "dense":
            factors = self._dense_factors()

            def one_dense(k, R):
                w, Q = factors[k]
                flat = R.reshape(-1, R.shape[2])
                return Q @ ((Q.T @ flat) / w[:, None])

            return self._foreach_block(rhs, one_dense)

        mu, G = self._generalized()

        def one(k, R):
            lam = self.structure.lam[k]
            denom = self.v_scale * np.outer(mu, lam) + self.d_scale
            if denom.min() <= 0:
                raise ConditioningError(
                    f"cluster {k + 1}: singular block (smallest pivot {denom.min():.3e})"
                )
            U = self.structure.U[k]
            tmp = np.tensordot(G.T, R, axes=(1, 0))
            tmp = np.matmul(tmp.transpose(0, 2, 1), U)
            tmp /= denom[:, None, :]
            tmp = np.matmul(tmp, U.T).transpose(0, 2, 1)
            return np.tensordot(G, tmp, axes=(1, 0))

        return self._foreach_block(rhs, one)

    def inv_sqrt_apply(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the symmetric inverse square root of the covariance."""
        if self.engine == "dense":
            factors = self._dense_factors()

            def one_dense(k, R):
                w, Q = factors[k]
                flat = R.reshape(-1, R.shape[2])
                return Q @ ((Q.T @ flat) / np.sqrt(w)[:, None])

            return self._foreach_block(rhs, one_dense)

        modes = self._mode_factors()

        def one(k, R):
            U = self.structure.U[k]
            nu, V = modes[k]
            S = np.matmul(R.transpose(0, 2, 1), U).transpose(2, 0, 1)  # (nk, T, m)
            C = np.matmul(V.transpose(0, 2, 1), S)
            C /= np.sqrt(nu)[:, :, None]
            S = np.matmul(V, C).transpose(1, 0, 2)  # (T, nk, m)
            return np.matmul(S.transpose(0, 2, 1), U.T).transpose(0, 2, 1)

        return self._foreach_block(rhs, one)

    def log_det(self) -> float:
        if self.engine == "dense":
            return float(sum(np.log(w).sum() for w, _ in self._dense_factors()))
        mu, _ = self._generalized()
        total = 0.0
        logd = np.log(self.d_tau).sum()
        for k in range(self.order.n_clusters):
            lam = self.structure.lam[k]
            denom = self.v_scale * np.outer(mu, lam) + self.d_scale
            if denom.min() <= 0:
                raise ConditioningError(
                    f"cluster {k + 1}: singular block (smallest pivot {denom.min():.3e})"
                )
            total += float(np.log(denom).sum()) + lam.size * logd
        return total

    def quad_form(self, vec: np.ndarray) -> float:
        """vec' Omega^{-1} vec."""
        return float(np.asarray(vec) @ self.solve(vec))

    # -- season marginals ------------------------------------------------------

    def season_modes(self, season: int, resid: np.ndarray):
        """Orthogonal coordinates of a season's residuals and the matching
        eigenvalues of the season's random-effect covariance.

        The rows of the stacked residual whose week falls in ``season``
        have covariance sigma^2 (S_j + tau_j^2 I) with S_j block diagonal
        over clusters and separable inside each; its eigenbasis is the
        product of the season's temporal eigenvectors and each cluster's
        spatial ones. Returns (coords, eigenvalues), both flattened over
        clusters.
        """
        weeks = self.structure.weeks_by_season[season - 1]
        if weeks.size == 0:
            return np.empty(0), np.empty(0)
        kappa, P = self.structure.season_eig(season)
        resid = np.asarray(resid, dtype=float)
        T = self.structure.n_weeks
        coords = []
        eigs = []
        for k in range(self.order.n_clusters):
            sl = self.order.cluster_slice(k)
            nk = int(self.order.cluster_sizes[k])
            R = resid[sl].reshape(T, nk)[weeks]
            U = self.structure.U[k]
            coords.append((P.T @ R @ U).ravel())
            eigs.append(np.outer(kappa, self.v_scale * self.structure.lam[k]).ravel())
        return np.concatenate(coords), np.concatenate(eigs)


def resolve_engine(engine: str | None = None) -> str:
    if engine is None:
        engine = os.environ.get(ENGINE_ENV, "spectral")
    if engine not in ENGINES:
        raise DomainError(f"unknown covariance engine {engine!r}; expected one of {ENGINES}")
    return engine


def build_blocks(
    clusters: ClusterAssignment | np.ndarray,
    coords: np.ndarray,
    calendar: WeekCalendar,
    params: CovarianceParams,
    metric: str | None = None,
    engine: str | None = None,
    v_scale: float = 1.0,
    d_scale: float = 1.0,
) -> BlockCovariance:
    """Assemble the block covariance for a clustered station set.

    ``v_scale`` and ``d_scale`` rescale the random-effect and noise
    parts; they exist so tests can realise degenerate covariances
    (identity, pure noise, no nugget) exactly.
    """
    if isinstance(clusters, ClusterAssignment):
        member = clusters.member_of
        metric = metric or clusters.metric
    else:
        member = np.asarray(clusters, dtype=np.int64)
        if metric is None:
            raise DomainError("metric is required when clusters is a bare label array")
    check_metric(metric)
    if not (params.phi_s > 0 and params.phi_t > 0 and params.d_t > 0):
        raise DomainError("decay parameters must be positive")
    if not np.all(params.tau2 > 0) or params.tau2[0] != 1.0:
        raise DomainError("tau2 must be positive with the reference season at 1")
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] != member.size:
        raise SchemaError("coordinate rows do not match cluster labels")
    order = PanelOrder(member, calendar.n_weeks)
    structure = _Structure(order, coords, calendar, params.phi_s, params.phi_t, params.d_t, metric)
    return BlockCovariance(structure, params, resolve_engine(engine), v_scale, d_scale)
