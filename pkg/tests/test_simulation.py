"""Synthetic panel generation and the size/power study harness."""
import numpy as np
import pytest

from stpanel.errors import DomainError
from stpanel.simulation import (
    SimSpec,
    simulate_panel,
    size_power_study,
    write_study_csv,
)


class TestSimSpec:
    def test_rejects_tiny_dimensions(self):
        with pytest.raises(DomainError):
            simulate_panel(SimSpec(n_sites=1, n_weeks=52, seed=0))
        with pytest.raises(DomainError):
            simulate_panel(SimSpec(n_sites=5, n_weeks=11, seed=0))

    def test_rejects_unknown_interaction(self):
        with pytest.raises(DomainError, match="interaction"):
            simulate_panel(SimSpec(n_sites=5, n_weeks=52, seed=0,
                                   interaction="cubic"))

    def test_rejects_bad_decay(self):
        with pytest.raises(DomainError):
            simulate_panel(SimSpec(n_sites=5, n_weeks=52, seed=0, phi_s=-1.0))


class TestSimulatePanel:
    def test_bit_determinism(self):
        spec = SimSpec(n_sites=6, n_weeks=52, seed=404)
        a, ta = simulate_panel(spec)
        b, tb = simulate_panel(spec)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.covariates, b.covariates)
        assert np.array_equal(a.sites.coords, b.sites.coords)
        assert np.array_equal(ta.theta, tb.theta)

    def test_seed_matters(self):
        a, _ = simulate_panel(SimSpec(n_sites=6, n_weeks=52, seed=404))
        b, _ = simulate_panel(SimSpec(n_sites=6, n_weeks=52, seed=405))
        assert not np.array_equal(a.y, b.y)

    def test_panel_is_model_ready(self):
        panel, truth = simulate_panel(SimSpec(n_sites=8, n_weeks=52, seed=7))
        panel.check_invariants(centered=False)
        # covariates come out globally centered and the response needs no
        # further site adjustment
        assert abs(panel.covariates.mean(axis=(0, 1))).max() < 1e-12
        assert np.all(panel.site_means == 0.0)
        assert panel.n_weeks == 52
        assert truth.tau2[0] == 1.0

    def test_interaction_shapes(self):
        base = dict(n_sites=8, n_weeks=52, seed=11)
        _, none = simulate_panel(SimSpec(**base, interaction="none"))
        _, lin = simulate_panel(SimSpec(**base, interaction="linear"))
        _, quad = simulate_panel(SimSpec(**base, interaction="quadratic"))
        assert np.all(none.gamma == 0.0)
        assert np.any(lin.gamma != 0.0)
        assert np.all(quad.gamma <= 0.0) and np.any(quad.gamma < 0.0)

    def test_truth_records_spec_decay(self):
        _, truth = simulate_panel(
            SimSpec(n_sites=5, n_weeks=52, seed=3, phi_s=0.2, phi_t=0.9))
        assert truth.phi_s == 0.2
        assert truth.phi_t == 0.9


class TestStudy:
    def tiny_specs(self, reps=4, seed=5):
        return [SimSpec(n_sites=6, n_weeks=52, seed=seed, replications=reps)]

    def test_worker_count_does_not_change_results(self):
        a = size_power_study(self.tiny_specs(), workers=1)
        b = size_power_study(self.tiny_specs(), workers=2)
        assert a.cells == b.cells

    def test_cell_accounting(self):
        res = size_power_study(self.tiny_specs(), workers=1)
        assert len(res.cells) == 1
        cell = res.cells[0]
        assert cell.spec.n_sites == 6 and cell.spec.n_weeks == 52
        assert cell.used + cell.excluded == 4
        assert len(cell.p_values) == cell.used
        assert len(cell.statistics) == cell.used
        assert 0.0 <= cell.rejection_rate <= 1.0
        # the rate is recomputable from the retained p-values
        got = np.mean(np.asarray(cell.p_values) < cell.level)
        assert cell.rejection_rate == got

    def test_alternative_rejects_more_than_null(self):
        specs = [SimSpec(n_sites=10, n_weeks=52, seed=19, replications=12,
                         interaction="none"),
                 SimSpec(n_sites=10, n_weeks=52, seed=19, replications=12,
                         interaction="linear")]
        res = size_power_study(specs, workers=1)
        assert res.cells[1].rejection_rate > res.cells[0].rejection_rate

    def test_validation(self):
        with pytest.raises(DomainError):
            size_power_study(self.tiny_specs(reps=0))
        with pytest.raises(DomainError):
            size_power_study(self.tiny_specs(), level=0.0)

    def test_empty_spec_list_gives_empty_result(self):
        assert size_power_study([]).cells == ()

    def test_csv_golden(self, tmp_path):
        res = size_power_study(self.tiny_specs(), workers=1)
        path = tmp_path / "study.csv"
        write_study_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "n,T,interaction,level,replications,rejection_rate,excluded"
        cell = res.cells[0]
        assert lines[1] == (
            f"6,52,none,0.05,4,{cell.rejection_rate:.10g},{cell.excluded}")
