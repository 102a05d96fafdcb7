"""Score test: dense-matrix oracle, invariances, and edge cases."""
import json

import numpy as np
import pytest
import scipy.linalg
from scipy.stats import chi2

from stpanel.covariance import CovarianceParams, build_blocks
from stpanel.design import DesignMatrix, build_design
from stpanel.errors import DomainError
from stpanel.inference import lm_test, write_lmtest_json
from stpanel.simulation import SimSpec, simulate_panel


def sim_design(seed=11, n=10, T=52, interaction="none"):
    panel, truth = simulate_panel(
        SimSpec(n_sites=n, n_weeks=T, interaction=interaction, seed=seed))
    return panel, build_design(panel), truth


def dense_statistic(panel, design, result):
    """Recompute the statistic from the restricted fit with dense algebra."""
    restricted = result.restricted
    params = CovarianceParams(
        sigma2=1.0, tau2=restricted.tau2,
        phi_s=restricted.params.phi_s, phi_t=restricted.params.phi_t)
    blocks = build_blocks(panel.order.member_of, panel.sites.coords, panel.calendar,
                          params, metric=panel.metric, engine="dense")
    oi = np.linalg.inv(blocks.dense_omega())
    Xd, Xg = design.restricted, design.interaction
    resid = restricted.resid
    sigma2 = restricted.sigma2
    score = Xg.T @ oi @ resid / sigma2
    A_gg = Xg.T @ oi @ Xg
    A_gd = Xg.T @ oi @ Xd
    A_dd = Xd.T @ oi @ Xd
    M = A_gg - A_gd @ np.linalg.solve(A_dd, A_gd.T)
    return float(score @ np.linalg.solve(M, score) * sigma2)


class TestStatistic:
    def test_matches_dense_oracle(self):
        panel, design, _ = sim_design(seed=11)
        params = CovarianceParams.for_panel(0.1, 0.75)
        result = lm_test(panel, design, params)
        expected = dense_statistic(panel, design, result)
        assert result.statistic == pytest.approx(expected, rel=1e-10)
        assert result.df == design.interaction.shape[1]
        assert result.p_value == pytest.approx(chi2.sf(result.statistic, result.df),
                                               abs=1e-15)

    def test_restricted_fit_is_unweighted(self):
        panel, design, _ = sim_design(seed=12, n=6, T=52)
        result = lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75))
        assert result.restricted.weights is None
        assert result.restricted.theta.shape == (design.restricted.shape[1],)

    def test_invariant_to_restricted_reparameterization(self):
        panel, design, _ = sim_design(seed=13, n=8, T=52)
        params = CovarianceParams.for_panel(0.1, 0.75)
        base = lm_test(panel, design, params)

        rng = np.random.default_rng(0)
        d = design.restricted.shape[1]
        A = np.eye(d) + 0.05 * rng.normal(size=(d, d))  # well-conditioned mix
        mixed = DesignMatrix(
            X=np.column_stack([design.restricted @ A, design.interaction]),
            labels=design.labels,
            n_covariates=design.n_covariates,
            n_clusters=design.n_clusters,
            covariate_cols=design.covariate_cols,
            season_cols=design.season_cols,
            interaction_cols=design.interaction_cols,
        )
        other = lm_test(panel, mixed, params)
        assert other.statistic == pytest.approx(base.statistic, rel=1e-6)

    def test_rejects_under_linear_alternative(self):
        panel, design, _ = sim_design(seed=14, n=12, T=52, interaction="linear")
        result = lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75),
                         max_iter=300)
        assert result.reject
        assert result.p_value < 0.01

    def test_null_statistic_is_moderate(self):
        # a single null draw should not blow past the far chi-square tail
        panel, design, _ = sim_design(seed=15, n=10, T=52)
        result = lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75),
                         max_iter=300)
        assert result.statistic < chi2.ppf(0.9999, result.df)


class TestEdgeCases:
    def test_perfect_restricted_fit(self, rng):
        from conftest import make_panel

        panel = make_panel(np.zeros((4, 30)), member_of=[0, 0, 1, 1],
                           site_adjusted=True)
        Xd = rng.normal(size=(panel.n_obs, 2))
        Xg = rng.normal(size=(panel.n_obs, 2))
        design = DesignMatrix(
            X=np.column_stack([Xd, Xg]), labels=("a", "b", "g1", "g2"),
            n_covariates=2, n_clusters=2,
            covariate_cols=slice(0, 2), season_cols=slice(2, 2),
            interaction_cols=slice(2, 4),
        )
        import warnings as _w
        with _w.catch_warnings():
            _w.simplefilter("ignore")
            result = lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75))
        assert result.statistic == 0.0
        assert result.p_value == 1.0
        assert not result.reject

    def test_level_validation(self):
        panel, design, _ = sim_design(seed=16, n=6, T=52)
        params = CovarianceParams.for_panel(0.1, 0.75)
        for level in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(DomainError):
                lm_test(panel, design, params, level=level)

    def test_no_interaction_columns(self, rng):
        from conftest import make_panel

        panel = make_panel(rng.normal(size=(3, 10)), member_of=[0, 0, 0],
                           site_adjusted=True)
        X = rng.normal(size=(panel.n_obs, 2))
        design = DesignMatrix(
            X=X, labels=("a", "b"), n_covariates=2, n_clusters=1,
            covariate_cols=slice(0, 2), season_cols=slice(2, 2),
            interaction_cols=slice(2, 2),
        )
        with pytest.raises(DomainError, match="interaction"):
            lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75))

    def test_reject_flag_tracks_level(self):
        panel, design, _ = sim_design(seed=17, n=8, T=52)
        params = CovarianceParams.for_panel(0.1, 0.75)
        result = lm_test(panel, design, params, level=0.05, max_iter=300)
        # rerun at a level just past the observed p-value: decision flips
        flipped = lm_test(panel, design, params,
                          level=min(result.p_value * 1.5, 0.99), max_iter=300)
        assert flipped.reject == (flipped.p_value < flipped.level)


class TestJson:
    def test_round_trip(self, tmp_path):
        panel, design, _ = sim_design(seed=18, n=6, T=52)
        result = lm_test(panel, design, CovarianceParams.for_panel(0.1, 0.75),
                         max_iter=200)
        path = tmp_path / "lmtest.json"
        write_lmtest_json(result, path)
        back = json.loads(path.read_text())
        assert back["statistic"] == pytest.approx(result.statistic)
        assert back["df"] == result.df
        assert back["p_value"] == pytest.approx(result.p_value)
        assert back["reject"] == result.reject
        assert back["restricted_converged"] == result.restricted.converged
        assert path.read_text().endswith("\n")
