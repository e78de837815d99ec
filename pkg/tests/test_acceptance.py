"""End-to-end behaviour of the optimizer on the built-in scenarios."""

import math

import numpy as np
import pytest

from mesh_core import (
    default_quadrature,
    element_volumes,
    jacobians,
    perturb_interior,
    scaled,
    structured_mesh,
)
from metrics import MetricId, eval_metric
from objective import (
    MetricTerm,
    ObjectiveConfig,
    XiKind,
    eval_objective,
    finite_difference_gradient,
    make_baseline,
    metric_integrals,
    value_and_gradient,
)
from scenarios import ScenarioSpec, band_indicator, build_scenario, run_scenario, sine_interface_eta
from solver import SolverParams, optimize
from targets_fields import (
    AdaptiveSizeTargets,
    DiscreteField,
    StaticTargets,
    TargetField,
    ideal_uniform_targets,
    sample_field,
)

XI2_AT_ONE_AND_A_HALF = math.exp(12.5)


def _assert_feasible_and_monotone(report):
    assert report.initial.feasible and report.final.feasible
    for record in report.history:
        assert record.objective <= record.objective_before + 1e-14 * max(1.0, abs(record.objective_before))
        assert record.min_det_a > 0 and record.min_det_t > 0


def _shape_problem(mesh, xi_kind=XiKind.NONE, delta=1.0):
    config = ObjectiveConfig([MetricTerm(MetricId.SHAPE2)], xi_kind, delta)
    return config, StaticTargets(ideal_uniform_targets(mesh, config.quadrature(mesh), with_size=False))


def _size_ratio(mesh, builder):
    """Mean element volume where the target is small over the mean where it is large."""
    det_w = builder(mesh).det_W.mean(axis=1)
    small = det_w <= 1.01 * builder.size
    large = det_w >= 0.99 * builder.alpha * builder.size
    assert small.any() and large.any()
    volumes = element_volumes(mesh, default_quadrature(mesh))
    return volumes[small].mean() / volumes[large].mean()


class TestNormalization:
    @pytest.mark.parametrize("refinements", [0, 1, 2])
    @pytest.mark.parametrize("scale", [1.0, 100.0])
    @pytest.mark.parametrize("metrics", [[MetricId.SHAPE2], [MetricId.SHAPE_SIZE9],
                                         [MetricId.SHAPE2, MetricId.SHAPE_SIZE9]])
    def test_parts_start_at_one_over_n(self, refinements, scale, metrics):
        mesh = scaled(build_scenario(ScenarioSpec("perturbed-square", refinements=refinements)).mesh0, scale)
        config = ObjectiveConfig([MetricTerm(m) for m in metrics])
        targets = ideal_uniform_targets(mesh, config.quadrature(mesh), with_size=True)
        value = eval_objective(mesh.node_coords, make_baseline(mesh, targets, config), targets, config)
        for part in value.metric_parts:
            assert abs(part - 1.0 / len(metrics)) <= 1e-12

    def test_measure_is_target_volume(self, square_p2):
        # det A = 1/16, det W = 1/4: the two measures differ by a factor 4
        quad = default_quadrature(square_p2)
        W = np.broadcast_to(0.5 * np.eye(2), (square_p2.n_elements, quad.size, 2, 2))
        targets = TargetField(W, volumetric=True)
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE7)])
        baseline = make_baseline(square_p2, targets, config)
        mu = eval_metric(MetricId.SHAPE_SIZE7, 0.5 * np.eye(2))
        assert mu == pytest.approx(4.5, rel=1e-14)
        integral = metric_integrals(square_p2.node_coords, baseline, targets, config)[0]
        assert integral == pytest.approx(square_p2.n_elements * mu * 0.25, rel=1e-12)
        with_det_a = float(np.sum(np.linalg.det(jacobians(square_p2, quad)) * quad.weights)) * mu
        assert abs(integral - with_det_a) > 0.1 * integral


class TestGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_randomized_configurations(self, seed):
        rng = np.random.default_rng(seed)
        degree = int(rng.integers(1, 4))
        mesh0 = perturb_interior(structured_mesh(2, degree=degree, dim=2), 0.15, seed=seed)
        metrics = list(rng.choice(["mu2", "mu7", "mu9"],
                                  size=int(rng.integers(1, 3)), replace=False))
        xi_kind = [XiKind.NONE, XiKind.QUADRATIC, XiKind.EXPONENTIAL][seed % 3]
        config = ObjectiveConfig([MetricTerm(MetricId(str(m)), float(rng.uniform(0.5, 2.0))) for m in metrics],
                                 xi_kind, float(rng.uniform(0.05, 0.5)))
        quad = config.quadrature(mesh0)
        if seed % 2:
            g = sample_field(mesh0, lambda p: band_indicator(p, ramp=0.2))
            builder = AdaptiveSizeTargets(mesh0, DiscreteField.indicator(mesh0, g.nodal_values), 4.0, quad)
        else:
            builder = StaticTargets(ideal_uniform_targets(mesh0, quad, with_size=bool(rng.integers(0, 2))))
        baseline = make_baseline(mesh0, builder(mesh0), config)

        x = perturb_interior(mesh0, 0.05, seed=seed + 100)
        targets = builder(x)          # lagged: held fixed while differentiating
        value, g_analytic = value_and_gradient(x.node_coords, baseline, targets, config)
        assert value.feasible

        def total(xt):
            return eval_objective(xt, baseline, targets, config).total

        g_fd = finite_difference_gradient(x.node_coords, total, config.free_mask(mesh0), 1e-6)
        # per-component relative check; the floor only covers round-off in F itself
        floor = 1e-9 * max(1.0, abs(value.total))
        np.testing.assert_allclose(g_analytic, g_fd, rtol=1e-6, atol=floor)


class TestConvergence:
    @pytest.mark.slow
    def test_unlimited_shape_returns_to_lattice(self):
        lattice = structured_mesh(8, degree=2, dim=2)
        mesh0 = perturb_interior(lattice, 0.15, seed=7)
        config, builder = _shape_problem(mesh0)
        mesh, report = optimize(mesh0, builder, config, SolverParams(max_iterations=100))
        _assert_feasible_and_monotone(report)
        assert np.max(np.abs(mesh.node_coords - lattice.node_coords)) <= 1e-4 / 8

    @pytest.mark.slow
    def test_exponential_limiting_bound(self):
        lattice = structured_mesh(8, degree=2, dim=2)
        mesh0 = perturb_interior(lattice, 0.15, seed=7)
        perturbation = float(np.max(np.linalg.norm(mesh0.node_coords - lattice.node_coords, axis=1)))
        delta = 0.25 * perturbation
        config, builder = _shape_problem(mesh0, XiKind.EXPONENTIAL, delta)
        mesh, report = optimize(mesh0, builder, config)
        _assert_feasible_and_monotone(report)
        assert report.max_displacement <= 1.05 * delta
        assert report.final.metric_total < report.initial.metric_total

    def test_limiting_dominance(self):
        scenario = build_scenario(ScenarioSpec("perturbed-square"))
        mesh0 = scenario.mesh0
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE9)], XiKind.EXPONENTIAL, 0.1)
        targets = scenario.targets_builder()(mesh0)
        baseline = make_baseline(mesh0, targets, config)
        value = eval_objective(mesh0.node_coords + [0.15, 0.0], baseline, targets, config)
        assert value.metric_total == pytest.approx(1.0, rel=1e-10)
        assert value.limiting_part == pytest.approx(XI2_AT_ONE_AND_A_HALF, rel=1e-10)
        assert value.limiting_part > value.metric_total

    @pytest.mark.slow
    def test_refinement_invariance(self):
        rows = []
        for refinements in (0, 1, 2):
            scenario = build_scenario(ScenarioSpec("perturbed-square", refinements=refinements))
            _, report = run_scenario(scenario)
            _assert_feasible_and_monotone(report)
            assert report.initial.metric_total == pytest.approx(1.0, abs=1e-12)
            final = report.final
            rows.append((final.total, final.metric_total, final.limiting_part, report.max_displacement))
        base = rows[0]
        for row in rows[1:]:
            np.testing.assert_allclose(row, base, rtol=0.01)


class TestLocalAndAdaptive:
    @pytest.mark.slow
    def test_local_limit(self):
        scenario = build_scenario(ScenarioSpec("local-limit"))
        mesh0 = scenario.mesh0
        mesh, report = run_scenario(scenario)
        _assert_feasible_and_monotone(report)

        lattice = structured_mesh(8, degree=3, dim=2).node_coords
        limited = lattice[:, 0] > lattice[:, 1]
        moved = np.linalg.norm(mesh.node_coords - mesh0.node_coords, axis=1)
        assert moved[limited].max() <= 2e-4

        free = np.all(scenario.fields["delta"].nodal_values[mesh0.elements] == 1.0, axis=1)
        assert free.any()
        targets = scenario.targets_builder()(mesh0)
        baseline = make_baseline(mesh0, targets, scenario.config)
        before = metric_integrals(mesh0.node_coords, baseline, targets, scenario.config, free)[0]
        after = metric_integrals(mesh.node_coords, baseline, targets, scenario.config, free)[0]
        assert after <= 0.5 * before

    @pytest.mark.slow
    def test_size_band(self):
        scenario = build_scenario(ScenarioSpec("size-band"))
        builder = scenario.targets_builder()
        mesh, report = run_scenario(scenario)
        _assert_feasible_and_monotone(report)
        ratio = _size_ratio(mesh, builder)
        # straight rows under lagged targets balance at h_small / h_large > alpha^(-2/3)
        assert scenario.alpha ** (-2.0 / 3.0) < ratio <= 0.5

    @pytest.mark.slow
    def test_size_band_leaves_over_compressed_rows(self):
        scenario = build_scenario(ScenarioSpec("size-band"))
        builder = scenario.targets_builder()
        lattice = scenario.mesh0
        # 11.4 of the 16 rows squeezed into the band: h_small / h_large ~ 0.1
        edge = 0.5 - 11.4 / 32.0
        coords = np.array(lattice.node_coords)
        coords[:, 1] = np.interp(coords[:, 1], [0.0, edge, 1.0 - edge, 1.0], [0.0, 0.4, 0.6, 1.0])
        start = lattice.with_coords(coords)
        assert _size_ratio(start, builder) < 2.0 / scenario.alpha

        mesh, report = optimize(start, builder, scenario.config)
        _assert_feasible_and_monotone(report)
        assert _size_ratio(mesh, builder) > 2.0 / scenario.alpha

    @pytest.mark.slow
    def test_sine_interface_concentrates_elements(self):
        scenario = build_scenario(ScenarioSpec("sine-interface"))
        mesh, report = run_scenario(scenario)
        _assert_feasible_and_monotone(report)

        # elements the eta = 1/2 level set passes through on the optimized mesh
        eta = sine_interface_eta(mesh.node_coords)[mesh.elements]
        crossed = (eta.min(axis=1) < 0.5) & (eta.max(axis=1) > 0.5)
        assert crossed.any() and not crossed.all()
        volumes = element_volumes(mesh, default_quadrature(mesh))
        assert volumes[crossed].mean() < 0.8 * volumes.mean()


class TestScaleInvariance:
    @pytest.mark.parametrize("xi_kind", [XiKind.QUADRATIC, XiKind.EXPONENTIAL])
    def test_parts_unchanged_under_scaling(self, perturbed_p2, xi_kind):
        trial = perturb_interior(perturbed_p2, 0.05, seed=11)
        parts = []
        for factor in (1.0, 100.0):
            mesh0 = scaled(perturbed_p2, factor)
            config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE9), MetricTerm(MetricId.SHAPE2)],
                                     xi_kind, 0.05 * factor)
            targets = ideal_uniform_targets(mesh0, config.quadrature(mesh0), with_size=True)
            baseline = make_baseline(mesh0, targets, config)
            value = eval_objective(trial.node_coords * factor, baseline, targets, config)
            parts.append((*value.metric_parts, value.limiting_part))
        np.testing.assert_allclose(parts[1], parts[0], rtol=1e-12)
