import math

import numpy as np
import pytest

from mesh_core import default_quadrature, jacobians, structured_mesh
from metrics import MetricId, eval_metric
from targets_fields import TargetField, ideal_uniform_targets
from trigger import (
    AdmissibleSpec,
    admissible_bound,
    admissible_bounds,
    admissible_from_diagonal,
    check_trigger,
    scan_trigger,
)

STRETCH = admissible_from_diagonal([1.0, 4.0], "mu2")


@pytest.fixture
def lattice():
    return structured_mesh(4, degree=1, dim=2)


def _uniform(mesh, width):
    quad = default_quadrature(mesh)
    return TargetField(np.broadcast_to(width * np.eye(2), (mesh.n_elements, quad.size, 2, 2)), volumetric=True)


class TestBound:
    def test_known_bounds(self):
        assert admissible_bound(STRETCH, np.eye(2)) == 1.125
        assert admissible_bound(AdmissibleSpec(np.eye(2), MetricId.SHAPE2), np.eye(2)) == pytest.approx(0.0, abs=1e-15)
        assert admissible_bound(STRETCH, np.diag([1.0, 4.0])) == pytest.approx(0.0, abs=1e-15)

    def test_bound_grows_with_stretch(self):
        bounds = [admissible_bound(admissible_from_diagonal([1.0, s], "mu2"), np.eye(2)) for s in (1.5, 2.0, 4.0, 8.0)]
        assert bounds == sorted(bounds)

    def test_pointwise_bounds(self, lattice):
        targets = ideal_uniform_targets(lattice, default_quadrature(lattice), with_size=False)
        bounds = admissible_bounds(STRETCH, targets)
        assert bounds.shape == targets.W.shape[:2]
        np.testing.assert_allclose(bounds, 1.125)

    def test_validation(self):
        with pytest.raises(ValueError, match="det S"):
            AdmissibleSpec(np.diag([1.0, -4.0]), MetricId.SHAPE2)
        with pytest.raises(ValueError, match="2 or 3"):
            admissible_from_diagonal([2.0], "mu7")
        with pytest.raises(ValueError, match="det W"):
            admissible_bound(STRETCH, np.diag([1.0, 0.0]))


class TestCheck:
    def test_identity_mesh_never_fires(self, lattice):
        targets = ideal_uniform_targets(lattice, default_quadrature(lattice), with_size=False)
        result = check_trigger(lattice, targets, STRETCH, default_quadrature(lattice))
        assert not result.fires
        assert result.worst_ratio == pytest.approx(0.0, abs=1e-12)
        assert result.infeasible_points == 0 and result.infeasible_bounds == 0

    def test_equality_fires(self, lattice):
        stretched = lattice.with_coords(lattice.node_coords * [1.0, 4.0])
        quad = default_quadrature(stretched)
        # admissible Jacobian equal to the mesh Jacobian at one point: mu(T) == mu(U) there
        spec = AdmissibleSpec(jacobians(stretched, quad)[0, 0], MetricId.SHAPE2)
        targets = ideal_uniform_targets(stretched, quad, with_size=False)
        result = check_trigger(stretched, targets, spec, quad)
        assert result.fires
        assert result.worst_ratio == pytest.approx(1.0, abs=1e-12)
        assert eval_metric(MetricId.SHAPE2, spec.S) == pytest.approx(1.125, abs=1e-12)

    def test_inverted_mesh_fires_with_infinite_ratio(self, lattice):
        flipped = lattice.with_coords(lattice.node_coords * [-1.0, 1.0])
        targets = ideal_uniform_targets(lattice, default_quadrature(lattice), with_size=False)
        result = check_trigger(flipped, targets, STRETCH, default_quadrature(lattice))
        assert result.fires
        assert result.worst_ratio == math.inf
        assert result.infeasible_points == flipped.n_elements * default_quadrature(lattice).size

    def test_adaptive_targets_change_the_verdict(self, lattice):
        spec = AdmissibleSpec(np.diag([0.25, 0.175]), MetricId.SHAPE_SIZE7)
        quad = default_quadrature(lattice)
        assert not check_trigger(lattice, _uniform(lattice, 0.25), spec, quad).fires
        assert check_trigger(lattice, _uniform(lattice, 0.125), spec, quad).fires

    def test_pure_and_repeatable(self, lattice):
        targets = ideal_uniform_targets(lattice, default_quadrature(lattice), with_size=False)
        before = lattice.node_coords.copy()
        a = check_trigger(lattice, targets, STRETCH, default_quadrature(lattice))
        b = check_trigger(lattice, targets, STRETCH, default_quadrature(lattice))
        assert a == b
        np.testing.assert_array_equal(lattice.node_coords, before)

    def test_dimension_mismatch(self, cube_p1):
        targets = ideal_uniform_targets(cube_p1, default_quadrature(cube_p1), with_size=False)
        with pytest.raises(ValueError, match="2D"):
            check_trigger(cube_p1, targets, STRETCH, default_quadrature(cube_p1))


class TestScan:
    @staticmethod
    def _sequence(mesh, factors):
        return [mesh.with_coords(mesh.node_coords * [1.0, f]) for f in factors]

    def test_first_firing_index(self, lattice):
        quad = default_quadrature(lattice)
        meshes = self._sequence(lattice, [1.0, 2.0, 3.0, 4.5, 6.0])
        targets = ideal_uniform_targets(lattice, quad, with_size=False)
        first, results = scan_trigger(meshes, lambda m: targets, STRETCH, quad)
        assert first == 3
        assert [r.fires for r in results] == [False, False, False, True, True]

    def test_never_fires(self, lattice):
        quad = default_quadrature(lattice)
        targets = ideal_uniform_targets(lattice, quad, with_size=False)
        first, results = scan_trigger(self._sequence(lattice, [1.0, 1.5]), lambda m: targets, STRETCH, quad)
        assert first is None and len(results) == 2

    def test_larger_admissible_stretch_fires_no_earlier(self, lattice):
        quad = default_quadrature(lattice)
        meshes = self._sequence(lattice, np.linspace(1.0, 10.0, 19))
        targets = ideal_uniform_targets(lattice, quad, with_size=False)
        firsts = [scan_trigger(meshes, lambda m: targets, admissible_from_diagonal([1.0, s], "mu2"), quad)[0]
                  for s in (2.0, 4.0, 8.0)]
        assert firsts == sorted(firsts)
