import numpy as np
import pytest

from mesh_core import default_quadrature, jacobians, min_det_jacobian, structured_mesh
from metrics import MetricId, eval_metric_batch
from objective import XiKind
from scenarios import (
    SCENARIOS,
    ScenarioSpec,
    band_indicator,
    build_scenario,
    refinement_study,
    run_ale_cycle,
    smooth_perturbation,
    vortex_velocity,
)
from solver import SolverParams
from targets_fields import DiscreteField, field_at_quadrature, size_from_indicator
from trigger import admissible_from_diagonal, scan_trigger


class TestScenarioSpec:
    def test_defaults_filled_in(self):
        spec = ScenarioSpec("perturbed-square")
        assert (spec.n, spec.degree, spec.amplitude, spec.perturbation) == (8, 3, 0.03, "smooth")
        assert ScenarioSpec("size-band").n == 16

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            ScenarioSpec("triple-point")

    def test_bad_refinements(self):
        with pytest.raises(ValueError, match="refinements"):
            ScenarioSpec("perturbed-square", refinements=-1)

    def test_unknown_override(self):
        with pytest.raises(ValueError, match="override"):
            build_scenario(ScenarioSpec("perturbed-square", n=2, overrides={"smoothing": 3}))


class TestBuild:
    @pytest.mark.parametrize("refinements,elements", [(0, 64), (1, 256), (2, 1024)])
    def test_perturbed_square_counts(self, refinements, elements):
        scenario = build_scenario(ScenarioSpec("perturbed-square", refinements=refinements))
        assert scenario.mesh0.n_elements == elements
        assert scenario.mesh0.degree == 3
        quad = default_quadrature(scenario.mesh0)
        assert min_det_jacobian(scenario.mesh0, quad) > 0

    def test_perturbed_square_config(self):
        scenario = build_scenario(ScenarioSpec("perturbed-square"))
        assert [t.metric for t in scenario.config.metric_terms] == [MetricId.SHAPE_SIZE9]
        assert scenario.config.xi_kind is XiKind.QUADRATIC
        assert scenario.config.delta == 0.1
        assert scenario.target == "ideal-size"

    @pytest.mark.parametrize("name", SCENARIOS)
    def test_deterministic(self, name):
        a = build_scenario(ScenarioSpec(name, seed=3))
        b = build_scenario(ScenarioSpec(name, seed=3))
        np.testing.assert_array_equal(a.mesh0.node_coords, b.mesh0.node_coords)
        for key in a.fields:
            np.testing.assert_array_equal(a.fields[key].nodal_values, b.fields[key].nodal_values)

    def test_smooth_perturbation(self):
        mesh = structured_mesh(4, degree=2, dim=2)
        moved = smooth_perturbation(mesh, 0.03, seed=42)
        shift = moved.node_coords - mesh.node_coords
        assert np.all(shift[mesh.boundary_mask] == 0.0)
        assert np.max(np.abs(shift)) == pytest.approx(0.03, rel=1e-12)
        assert smooth_perturbation(mesh, 0.0, seed=42) is mesh

    def test_local_limit_delta(self):
        scenario = build_scenario(ScenarioSpec("local-limit"))
        delta = scenario.fields["delta"]
        lattice = structured_mesh(8, degree=3, dim=2).node_coords
        expected = np.where(lattice[:, 0] > lattice[:, 1], 1e-4, 1.0)
        np.testing.assert_array_equal(delta.nodal_values, expected)
        on_diagonal = lattice[:, 0] == lattice[:, 1]
        assert on_diagonal.any() and np.all(delta.nodal_values[on_diagonal] == 1.0)
        assert scenario.config.delta is delta

    def test_sine_interface_indicator(self):
        scenario = build_scenario(ScenarioSpec("sine-interface"))
        eta = scenario.indicator.nodal_values
        assert eta.min() >= 0.0 and eta.max() <= 1.0
        assert eta.min() < 1e-6 and eta.max() > 1.0 - 1e-6
        assert scenario.target == "interface"

    def test_band_indicator_ramp(self):
        pts = np.array([[0.5, 0.5], [0.5, 0.6], [0.5, 0.9], [0.5, 0.55]])
        g = band_indicator(pts, ramp=0.05)
        np.testing.assert_allclose(g, [1.0, 0.5, 0.0, 1.0])

    def test_size_band_balance(self):
        scenario = build_scenario(ScenarioSpec("size-band"))
        mesh, g = scenario.mesh0, scenario.indicator
        quad = default_quadrature(mesh)
        measure = np.linalg.det(jacobians(mesh, quad)) * quad.weights
        g_q, _ = field_at_quadrature(g, mesh, quad, with_gradient=False)
        v_g = float((measure * np.clip(g_q, 0.0, 1.0)).sum())
        assert v_g == pytest.approx(0.2, abs=5e-3)
        s = size_from_indicator(mesh, g, scenario.alpha, quad)
        assert v_g / s + (1.0 - v_g) / (scenario.alpha * s) == pytest.approx(mesh.n_elements, rel=1e-10)

    def test_overrides(self):
        scenario = build_scenario(ScenarioSpec("size-band", n=4, overrides={"metric": "mu9", "alpha": 4}))
        assert [t.metric for t in scenario.config.metric_terms] == [MetricId.SHAPE_SIZE9]
        assert scenario.alpha == 4.0


class TestDeformSequence:
    def test_sequence_shape(self):
        scenario = build_scenario(ScenarioSpec("deform-sequence"))
        assert len(scenario.sequence) == 21
        np.testing.assert_array_equal(scenario.sequence[0].node_coords, scenario.mesh0.node_coords)
        np.testing.assert_allclose(scenario.admissible.S, np.diag([1.0, 4.0]))

    def test_first_fire_matches_brute_force(self):
        scenario = build_scenario(ScenarioSpec("deform-sequence"))
        quad = default_quadrature(scenario.mesh0)
        targets = scenario.targets_builder()
        first, results = scan_trigger(scenario.sequence, targets, scenario.admissible, quad)
        brute = next(i for i, m in enumerate(scenario.sequence)
                     if eval_metric_batch(MetricId.SHAPE2, jacobians(m, quad)).max() >= 1.125)
        assert first == brute == 16
        assert not any(r.fires for r in results[:16])

    def test_larger_stretch_fires_later(self):
        scenario = build_scenario(ScenarioSpec("deform-sequence"))
        quad = default_quadrature(scenario.mesh0)
        targets = scenario.targets_builder()
        loose = admissible_from_diagonal([1.0, 4.4], "mu2")
        first, _ = scan_trigger(scenario.sequence, targets, loose, quad)
        assert first is not None and first > 16


class TestStudies:
    def test_refinement_study_rows(self):
        rows = refinement_study("perturbed-square", levels=(0, 1), n=2, params=SolverParams(max_iterations=5))
        assert [r.refinements for r in rows] == [0, 1]
        assert [r.elements for r in rows] == [4, 16]
        for r in rows:
            assert r.final_F == pytest.approx(r.metric_part + r.limiting_part, rel=1e-12)
            assert r.final_F <= 1.0 + 1e-12

    def test_ale_cycle_periodic(self):
        mesh0 = structured_mesh(4, degree=2, dim=2)
        spec = admissible_from_diagonal([1.0, 2.0], "mu2")
        report = run_ale_cycle(mesh0, vortex_velocity, dt=0.01, steps=30, admissible=spec,
                               policy="period", period=10)
        assert report.breakdown_step is None
        assert report.remesh_steps == [10, 20, 30]
        assert report.lagrangian_steps == 30
        assert report.final_min_det > 0

    @pytest.mark.slow
    def test_ale_cycle_triggered(self):
        mesh0 = structured_mesh(4, degree=2, dim=2)
        spec = admissible_from_diagonal([1.0, 2.0], "mu2")
        report = run_ale_cycle(mesh0, vortex_velocity, dt=0.01, steps=40, admissible=spec, policy="trigger")
        assert report.breakdown_step is None
        assert report.remesh_count >= 1
        assert report.final_min_det > 0

    def test_ale_cycle_validation(self):
        mesh0 = structured_mesh(2, degree=1, dim=2)
        spec = admissible_from_diagonal([1.0, 2.0], "mu2")
        with pytest.raises(ValueError, match="policy"):
            run_ale_cycle(mesh0, vortex_velocity, 0.01, 5, spec, policy="sometimes")
        with pytest.raises(ValueError, match="dt"):
            run_ale_cycle(mesh0, vortex_velocity, 0.0, 5, spec)

    def test_indicator_is_clamped_field(self):
        scenario = build_scenario(ScenarioSpec("size-band", n=4))
        assert isinstance(scenario.indicator, DiscreteField)
        assert scenario.indicator.nodal_values.max() <= 1.0
