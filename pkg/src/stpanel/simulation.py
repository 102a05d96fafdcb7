"""Synthetic panels from the fitted model's own generating process.

One draw builds a full panel: uniform planar site locations, k-means
clusters, standard normal covariates and coefficients, inverse-gamma
variances rescaled so the first season's noise ratio is exactly 1, a
cluster-blocked space-time random effect, and seasonal noise. The
response is generated directly on the adjusted scale, so site means are
zero by construction and no re-centering is applied.

The study driver runs the trend score test over independently seeded
replicates and reports rejection rates. Replicates that fail to
converge or hit a numerical failure are excluded and counted.

The draw order inside one replicate is fixed (locations, clustering
seed, covariates, coefficients, variances, random effect per cluster,
noise); changing it would silently break bit-for-bit reproducibility.
"""
from __future__ import annotations

import csv
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterAssignment, choose_k, kmeans
from .covariance import CovarianceParams, ar1_matrix
from .design import build_design
from .errors import DomainError, NumericalError
from .geo import pairwise_distances
from .inference import lm_test
from .panel import N_SEASONS, PanelOrder, StationTable, WeekCalendar, WeeklyPanel

INTERACTIONS = ("none", "linear", "quadratic")
VARIANCE_SHAPE = 4.0
VARIANCE_SCALE = 3.0


@dataclass(frozen=True)
class SimSpec:
    """One simulation cell: panel dimensions, truth shape, and seeding."""

    n_sites: int
    n_weeks: int
    interaction: str = "none"
    n_covariates: int = 2
    phi_s: float = 0.1
    phi_t: float = 0.75
    seed: int = 0
    replications: int = 500

    def validate(self) -> None:
        if self.n_sites < 2:
            raise DomainError("simulation needs at least 2 sites")
        if self.n_weeks < N_SEASONS:
            raise DomainError(f"simulation needs at least {N_SEASONS} weeks")
        if self.interaction not in INTERACTIONS:
            raise DomainError(f"interaction must be one of {INTERACTIONS}")
        if self.n_covariates < 0:
            raise DomainError("covariate count cannot be negative")
        if not (self.phi_s > 0 and self.phi_t > 0):
            raise DomainError("decay truths must be positive")
        if self.replications < 1:
            raise DomainError("need at least one replication")


@dataclass(frozen=True)
class SimTruth:
    """Generating values recorded alongside a simulated panel.

    ``theta`` lists coefficients in design-column order. In the
    quadratic case the trend entries hold the drawn quadratic
    coefficients even though the fitted design keeps a linear column;
    the mismatch is the point of that scenario.
    """

    theta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    sigma2: float
    tau2: np.ndarray
    phi_s: float
    phi_t: float
    interaction: str
    clusters: ClusterAssignment


def _chol(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        bump = 1e-10 * float(np.mean(np.diag(mat)))
        return np.linalg.cholesky(mat + bump * np.eye(mat.shape[0]))


def _rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_panel(spec: SimSpec, seed=None) -> tuple[WeeklyPanel, SimTruth]:
    """Draw one panel and its truth record.

    ``seed`` may be an int, a SeedSequence, or a Generator; it defaults
    to ``spec.seed``. The same seed reproduces the panel bit for bit.
    """
    spec.validate()
    rng = _rng_from(spec.seed if seed is None else seed)
    n, T, p = spec.n_sites, spec.n_weeks, spec.n_covariates

    coords = rng.uniform(0.0, float(n) ** 2, size=(n, 2))
    sites = StationTable(tuple(f"s{i + 1:04d}" for i in range(n)), coords)
    k = choose_k(n)
    clusters = kmeans(sites, k, seed=int(rng.integers(2**31 - 1)), metric="euclidean")
    order = PanelOrder(clusters.member_of, T)
    calendar = WeekCalendar.synthetic(T)

    raw_cov = rng.standard_normal((n, T, p))
    cov_means = raw_cov.reshape(-1, p).mean(axis=0) if p else np.zeros(0)
    covariates = raw_cov - cov_means[None, None, :]

    alpha = rng.standard_normal(p)
    beta = rng.standard_normal(N_SEASONS - 1)
    if spec.interaction == "none":
        gamma = np.zeros(k)
    elif spec.interaction == "linear":
        gamma = rng.standard_normal(k)
    else:
        gamma = -np.abs(rng.standard_normal(k))

    # Inverse-gamma(shape, scale) draws; dividing by the first season's
    # draw and scaling the overall variance keeps the identification
    # constraint tau2[0] = 1 while staying inside the model family.
    sigma2_raw = 1.0 / rng.gamma(VARIANCE_SHAPE, 1.0 / VARIANCE_SCALE)
    tau2_raw = 1.0 / rng.gamma(VARIANCE_SHAPE, 1.0 / VARIANCE_SCALE, size=N_SEASONS)
    tau2 = tau2_raw / tau2_raw[0]
    sigma2 = float(sigma2_raw * tau2_raw[0])

    seasons = calendar.seasons()
    tsc = np.arange(T) / (T - 1) if T > 1 else np.zeros(T)
    tpow = tsc**2 if spec.interaction == "quadratic" else tsc
    season_eff = np.zeros(T)
    late = seasons >= 2
    season_eff[late] = beta[seasons[late] - 2]
    mu = covariates @ alpha + season_eff[None, :] + gamma[clusters.member_of][:, None] * tpow[None, :]

    params = CovarianceParams.for_panel(spec.phi_s, spec.phi_t, T)
    L_t = _chol(ar1_matrix(params.psi, T))
    sigma = float(np.sqrt(sigma2))
    v = np.empty((n, T))
    for members in order.sites_by_cluster:
        dist = pairwise_distances(coords[members], "euclidean")
        L_s = _chol(np.exp(-spec.phi_s * dist))
        Z = rng.standard_normal((T, members.size))
        v[members, :] = (sigma * (L_t @ Z @ L_s.T)).T

    eps = rng.standard_normal((n, T)) * np.sqrt(sigma2 * tau2[seasons - 1])[None, :]
    y = mu + v + eps

    panel = WeeklyPanel(
        sites=sites,
        calendar=calendar,
        order=order,
        z=y.copy(),
        y=y,
        covariates=covariates,
        covariate_names=tuple(f"x{j + 1}" for j in range(p)),
        site_means=np.zeros(n),
        covariate_means=cov_means,
        metric="euclidean",
        interpolated=None,
    )
    truth = SimTruth(
        theta=np.concatenate([alpha, beta, gamma]),
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        sigma2=sigma2,
        tau2=tau2,
        phi_s=spec.phi_s,
        phi_t=spec.phi_t,
        interaction=spec.interaction,
        clusters=clusters,
    )
    return panel, truth


@dataclass(frozen=True)
class StudyCell:
    spec: SimSpec
    level: float
    rejection_rate: float
    used: int
    excluded: int
    statistics: tuple[float, ...]
    p_values: tuple[float, ...]


@dataclass(frozen=True)
class StudyResult:
    cells: tuple[StudyCell, ...]


# Small panels converge geometrically but slowly; the study raises the
# iteration cap so exclusions reflect genuine failures, not a runtime
# bound, which would select against high-noise draws and bias the null.
STUDY_MAX_ITER = 300


def _study_replicate(task) -> tuple[float, float] | None:
    spec, seq, level = task
    panel, truth = simulate_panel(spec, np.random.default_rng(seq))
    design = build_design(panel)
    params = CovarianceParams.for_panel(truth.phi_s, truth.phi_t, panel.n_weeks)
    try:
        res = lm_test(panel, design, params, level=level, max_iter=STUDY_MAX_ITER)
    except NumericalError:
        return None
    if not res.restricted.converged:
        return None
    return res.statistic, res.p_value


def size_power_study(
    specs,
    level: float = 0.05,
    workers: int = 1,
) -> StudyResult:
    """Rejection rate of the trend score test per simulation cell.

    Replicates are seeded by spawning one child sequence per replicate
    from the cell's master seed, so the result is identical for any
    worker count and reproducible across runs.
    """
    if not (0 < level < 1):
        raise DomainError(f"test level must be in (0, 1), got {level}")
    cells: list[StudyCell] = []
    for spec in specs:
        spec.validate()
        seqs = np.random.SeedSequence(spec.seed).spawn(spec.replications)
        tasks = [(spec, s, level) for s in seqs]
        if workers > 1:
            with multiprocessing.Pool(workers) as pool:
                outs = pool.map(_study_replicate, tasks)
        else:
            outs = [_study_replicate(t) for t in tasks]
        good = [o for o in outs if o is not None]
        if not good:
            raise NumericalError(
                f"every replicate failed for cell n={spec.n_sites}, T={spec.n_weeks}"
            )
        stats, pvals = zip(*good)
        rate = float(np.mean(np.asarray(pvals) < level))
        cells.append(
            StudyCell(
                spec=spec,
                level=level,
                rejection_rate=rate,
                used=len(good),
                excluded=len(outs) - len(good),
                statistics=tuple(float(s) for s in stats),
                p_values=tuple(float(v) for v in pvals),
            )
        )
    return StudyResult(cells=tuple(cells))


def write_study_csv(result: StudyResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "T", "interaction", "level", "replications", "rejection_rate", "excluded"])
        for c in result.cells:
            w.writerow(
                [
                    c.spec.n_sites,
                    c.spec.n_weeks,
                    c.spec.interaction,
                    f"{c.level:.10g}",
                    c.spec.replications,
                    f"{c.rejection_rate:.10g}",
                    c.excluded,
                ]
            )
