"""
targets_fields.py -- Target Jacobians W and discrete scalar fields on meshes.

Fields live on the Lagrangian mesh (mesh0) as nodal values interpolated with
the kinematic basis.  When the solver moves nodes, fields are brought to the
current mesh by interpolation (inverse mapping into mesh0), and target
builders rebuild W from the transferred values.

Usage:
    from targets_fields import sample_field, AdaptiveSizeTargets
    g = sample_field(mesh0, lambda p: (abs(p[:, 1] - 0.5) < 0.1).astype(float))
    builder = AdaptiveSizeTargets(mesh0, g, alpha=10.0)
    targets = builder(mesh0)
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from mesh_core import (
    InfeasibleMeshError,
    Mesh,
    QuadratureRule,
    default_quadrature,
    element_centroids,
    jacobians,
    lattice_edges,
    node_elements,
    reference_table,
    shape_functions,
    shape_functions_batch,
    tensor_multi_index,
)

logger = logging.getLogger(__name__)

# Aspect-ratio clamps for interface targets
R_EPS = 1e-8
R_MIN = 1.0 / 8.0
R_MAX = 8.0

NEWTON_MAX_ITERATIONS = 25
_NEWTON_TOL = 1e-13
_INSIDE_TOL = 1e-10
_FALLBACK_LATTICE = 5


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------
@dataclass
class TransferReport:
    """How each node of the current mesh was located inside mesh0."""
    newton: int = 0
    projected: int = 0
    lattice: int = 0
    lattice_nodes: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.newton + self.projected + self.lattice


@dataclass(frozen=True, eq=False)
class DiscreteField:
    host_mesh: Mesh
    nodal_values: np.ndarray
    transfer_report: TransferReport | None = None

    def __post_init__(self):
        values = np.array(self.nodal_values, dtype=float).reshape(-1)
        if values.shape[0] != self.host_mesh.n_nodes:
            raise ValueError(f"field has {values.shape[0]} values but mesh has {self.host_mesh.n_nodes} nodes")
        values.flags.writeable = False
        object.__setattr__(self, "nodal_values", values)

    @classmethod
    def indicator(cls, mesh: Mesh, values) -> "DiscreteField":
        """Indicator fields are clamped to [0, 1] on ingest."""
        return cls(mesh, np.clip(np.asarray(values, dtype=float), 0.0, 1.0))

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "DiscreteField":
        return cls(mesh, np.full(mesh.n_nodes, float(value)))


@dataclass(frozen=True, eq=False)
class TargetField:
    W: np.ndarray            # (E, Q, d, d)
    volumetric: bool

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        if W.ndim != 4 or W.shape[-1] != W.shape[-2]:
            raise ValueError(f"W must have shape (E, Q, d, d), got {W.shape}")
        det = np.linalg.det(W)
        if not np.all(det > 0):
            e, q = np.unravel_index(int(np.argmin(det)), det.shape)
            raise ValueError(f"target matrix with det W = {det[e, q]:.3e} <= 0 at element {e}, point {q}")
        W.flags.writeable = False
        object.__setattr__(self, "W", W)

    @cached_property
    def det_W(self) -> np.ndarray:
        return np.linalg.det(self.W)

    @cached_property
    def W_inv(self) -> np.ndarray:
        return np.linalg.inv(self.W)


# ---------------------------------------------------------------------------
# Target constructors
# ---------------------------------------------------------------------------
def ideal_uniform_targets(mesh0: Mesh, quadrature: QuadratureRule, with_size: bool) -> TargetField:
    d = mesh0.dim
    shape = (mesh0.n_elements, quadrature.size, d, d)
    if not with_size:
        return TargetField(np.broadcast_to(np.eye(d), shape), volumetric=False)
    det_a = np.linalg.det(jacobians(mesh0, quadrature))
    volume = float((det_a @ quadrature.weights).sum())
    width = (volume / mesh0.n_elements) ** (1.0 / d)
    return TargetField(np.broadcast_to(width * np.eye(d), shape), volumetric=True)


def _composed_batch(size, theta, phi, ratio) -> np.ndarray:
    size, theta, phi, ratio = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (size, theta, phi, ratio)))
    root_s = np.sqrt(size)
    c, s = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    a, b = 1.0 / np.sqrt(ratio), np.sqrt(ratio)
    # sqrt(s) * R(theta) * [[1, cos phi], [0, sin phi]] * diag(1/sqrt r, sqrt r)
    W = np.empty(size.shape + (2, 2))
    W[..., 0, 0] = root_s * c * a
    W[..., 0, 1] = root_s * (c * cp - s * sp) * b
    W[..., 1, 0] = root_s * s * a
    W[..., 1, 1] = root_s * (s * cp + c * sp) * b
    return W


def composed_target(size: float, theta: float, phi: float, ratio: float) -> np.ndarray:
    """Product of volume, orientation, skew and aspect-ratio factors (2D)."""
    if not size > 0:
        raise ValueError(f"size must be > 0, got {size}")
    if not ratio > 0:
        raise ValueError(f"aspect ratio must be > 0, got {ratio}")
    if not 0 < phi < math.pi:
        raise ValueError(f"skew angle must lie in (0, pi), got {phi}")
    return _composed_batch(size, theta, phi, ratio)


def _check_alpha(alpha: float):
    if not alpha >= 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")


def _indicator_integrals(mesh0: Mesh, g: "DiscreteField", quadrature: QuadratureRule) -> tuple[float, float]:
    measure = np.linalg.det(jacobians(mesh0, quadrature)) * quadrature.weights
    g_q = np.clip(field_at_quadrature(g, mesh0, quadrature, with_gradient=False)[0], 0.0, 1.0)
    return float((measure * g_q).sum()), float(measure.sum())


def size_from_indicator(mesh0: Mesh, g: DiscreteField, alpha: float, quadrature: QuadratureRule | None = None) -> float:
    """Small-region size s solving V_g/s + (V - V_g)/(alpha s) = N_E."""
    _check_alpha(alpha)
    quadrature = quadrature or default_quadrature(mesh0)
    v_g, volume = _indicator_integrals(mesh0, g, quadrature)
    return (v_g + (volume - v_g) / alpha) / mesh0.n_elements


def _adaptive_size_batch(g_values, s: float, alpha: float, dim: int) -> np.ndarray:
    g_values = np.asarray(g_values, dtype=float)
    local = g_values * s + (1.0 - g_values) * alpha * s
    return local[..., None, None] ** (1.0 / dim) * np.eye(dim)


def adaptive_size_target(g_value: float, s: float, alpha: float, dim: int) -> np.ndarray:
    if not 0.0 <= g_value <= 1.0:
        raise ValueError(f"indicator value must lie in [0, 1], got {g_value}")
    if not s > 0:
        raise ValueError(f"size must be > 0, got {s}")
    _check_alpha(alpha)
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    return _adaptive_size_batch(g_value, s, alpha, dim)


def interface_indicator(eta: DiscreteField, mesh: Mesh, quadrature: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Normalized gradient magnitude g in [0,1] and the physical gradient at quadrature points."""
    _, grads = field_at_quadrature(eta, mesh, quadrature)
    norms = np.linalg.norm(grads, axis=-1)
    peak = norms.max()
    # roundoff gradients of a constant field must not be normalized up to 1
    g = norms / peak if peak > R_EPS else np.zeros_like(norms)
    return g, grads


def interface_size(mesh0: Mesh, eta: DiscreteField, quadrature: QuadratureRule, alpha: float) -> float:
    """s from the interface indicator, computed once on the Lagrangian mesh."""
    _check_alpha(alpha)
    g, _ = interface_indicator(eta, mesh0, quadrature)
    measure = np.linalg.det(jacobians(mesh0, quadrature)) * quadrature.weights
    v_g, volume = float((measure * g).sum()), float(measure.sum())
    return (v_g + (volume - v_g) / alpha) / mesh0.n_elements


def interface_targets(mesh0: Mesh, eta: DiscreteField, quadrature: QuadratureRule, *,
                      mesh: Mesh | None = None, alpha: float = 10.0, size: float | None = None) -> TargetField:
    """
    Anisotropic targets refining toward the interface of a material indicator.

    The aspect ratio follows |d eta/dx| / |d eta/dy| (clamped), the size
    follows the adaptive-size law with g = |grad eta| / max |grad eta|,
    skew is pi/2 and orientation 0.  `mesh` is the current mesh (eta must
    live on it); `size` is the precomputed s, otherwise computed from eta
    on the mesh given.
    """
    if mesh0.dim != 2:
        raise ValueError(f"interface targets are 2D only, mesh has dim {mesh0.dim}")
    _check_alpha(alpha)
    current = mesh if mesh is not None else mesh0
    g, grads = interface_indicator(eta, current, quadrature)
    if size is None:
        measure = np.linalg.det(jacobians(current, quadrature)) * quadrature.weights
        v_g, volume = float((measure * g).sum()), float(measure.sum())
        size = (v_g + (volume - v_g) / alpha) / current.n_elements

    gx, gy = np.abs(grads[..., 0]), np.abs(grads[..., 1])
    ratio = np.clip(gx / np.maximum(gy, R_EPS), R_MIN, R_MAX)
    ratio = np.where((gx < R_EPS) & (gy < R_EPS), 1.0, ratio)
    local_size = g * size + (1.0 - g) * alpha * size
    W = _composed_batch(local_size, 0.0, math.pi / 2.0, ratio)
    return TargetField(W, volumetric=True)


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------
def sample_field(mesh: Mesh, function) -> DiscreteField:
    """Nodal values of an analytic function called with the (N, d) node array."""
    return DiscreteField(mesh, np.asarray(function(mesh.node_coords), dtype=float).reshape(-1))


def _check_host(field_: DiscreteField, mesh: Mesh):
    if field_.nodal_values.shape[0] != mesh.n_nodes:
        raise ValueError(f"field has {field_.nodal_values.shape[0]} values, mesh has {mesh.n_nodes} nodes")


def eval_field(field_: DiscreteField, mesh: Mesh, elem_index: int, ref_point) -> tuple[float, np.ndarray]:
    _check_host(field_, mesh)
    values, grads = shape_functions(mesh.degree, mesh.dim, ref_point)
    nodes = mesh.elements[elem_index]
    v_e = field_.nodal_values[nodes]
    A = mesh.node_coords[nodes].T @ grads
    det = float(np.linalg.det(A))
    if det <= 0:
        raise InfeasibleMeshError(f"det A = {det:.3e} <= 0 in element {elem_index}", element=elem_index, value=det)
    return float(v_e @ values), np.linalg.solve(A.T, v_e @ grads)


def field_at_quadrature(field_: DiscreteField, mesh: Mesh, quadrature: QuadratureRule,
                        with_gradient: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Values (E, Q) and physical gradients (E, Q, d) at every quadrature point."""
    _check_host(field_, mesh)
    table = reference_table(mesh.degree, mesh.dim, quadrature)
    v_e = field_.nodal_values[mesh.elements]
    values = v_e @ table.values.T
    if not with_gradient:
        return values, None
    ref_grad = np.einsum("ei,qir->eqr", v_e, table.gradients)
    A = jacobians(mesh, quadrature)
    grads = np.linalg.solve(np.swapaxes(A, -1, -2), ref_grad[..., None])[..., 0]
    return values, grads


def bounded_field_at_quadrature(field_: DiscreteField, mesh: Mesh, quadrature: QuadratureRule) -> np.ndarray:
    """Interpolated values clamped to each element's nodal range (no overshoot)."""
    values, _ = field_at_quadrature(field_, mesh, quadrature, with_gradient=False)
    v_e = field_.nodal_values[mesh.elements]
    return np.clip(values, v_e.min(axis=1)[:, None], v_e.max(axis=1)[:, None])


# ---------------------------------------------------------------------------
# Field transfer
# ---------------------------------------------------------------------------
def _newton_inverse(mesh: Mesh, elems: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference coordinates of `points` in elements `elems`; returns (ref, converged)."""
    m, d = points.shape
    x_e = mesh.node_coords[mesh.elements[elems]]
    ref = np.full((m, d), 0.5)
    converged = np.zeros(m, dtype=bool)
    active = np.ones(m, dtype=bool)
    for _ in range(NEWTON_MAX_ITERATIONS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        values, grads = shape_functions_batch(mesh.degree, d, ref[idx])
        phys = np.einsum("mi,mia->ma", values, x_e[idx])
        J = np.einsum("mia,mir->mar", x_e[idx], grads)
        det = np.linalg.det(J)
        singular = ~(np.abs(det) > 1e-300)
        if singular.any():
            active[idx[singular]] = False
            idx, phys, J = idx[~singular], phys[~singular], J[~singular]
        step = np.linalg.solve(J, (phys - points[idx])[..., None])[..., 0]
        ref[idx] = np.clip(ref[idx] - step, -1.0, 2.0)
        done = np.max(np.abs(step), axis=1) < _NEWTON_TOL
        converged[idx[done]] = True
        active[idx[done]] = False
    return ref, converged


def _evaluate_at(mesh: Mesh, values_on_nodes: np.ndarray, elems: np.ndarray, ref: np.ndarray) -> np.ndarray:
    basis, _ = shape_functions_batch(mesh.degree, mesh.dim, ref)
    return np.einsum("mi,mi->m", basis, values_on_nodes[mesh.elements[elems]])


def _map_points(mesh: Mesh, elems: np.ndarray, ref: np.ndarray) -> np.ndarray:
    basis, _ = shape_functions_batch(mesh.degree, mesh.dim, ref)
    return np.einsum("mi,mia->ma", basis, mesh.node_coords[mesh.elements[elems]])


def locate_points(mesh0: Mesh, points: np.ndarray, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray, TransferReport]:
    """
    Element and reference coordinate of each point inside mesh0.

    `candidates` is an (M, c) array of element indices tried in column
    order (-1 pads).  A point is accepted in the first candidate whose
    Newton inverse converges inside the reference cube; otherwise the
    nearest converged projection onto a cube is used; otherwise the nearest
    sample of a 5^d lattice over the candidates.
    """
    m, d = points.shape
    found = np.full(m, -1, dtype=np.int64)
    ref_out = np.zeros((m, d))
    best_dist = np.full(m, np.inf)
    best_elem = np.full(m, -1, dtype=np.int64)
    best_ref = np.zeros((m, d))

    for col in range(candidates.shape[1]):
        idx = np.flatnonzero((found < 0) & (candidates[:, col] >= 0))
        if idx.size == 0:
            continue
        elems = candidates[idx, col]
        ref, converged = _newton_inverse(mesh0, elems, points[idx])
        inside = converged & np.all((ref >= -_INSIDE_TOL) & (ref <= 1.0 + _INSIDE_TOL), axis=1)
        found[idx[inside]] = elems[inside]
        ref_out[idx[inside]] = np.clip(ref[inside], 0.0, 1.0)

        outside = converged & ~inside
        if outside.any():
            proj = np.clip(ref[outside], 0.0, 1.0)
            dist = np.linalg.norm(_map_points(mesh0, elems[outside], proj) - points[idx[outside]], axis=1)
            targets = idx[outside]
            better = dist < best_dist[targets]
            best_dist[targets[better]] = dist[better]
            best_elem[targets[better]] = elems[outside][better]
            best_ref[targets[better]] = proj[better]

    report = TransferReport(newton=int((found >= 0).sum()))
    projected = (found < 0) & (best_elem >= 0)
    found[projected] = best_elem[projected]
    ref_out[projected] = best_ref[projected]
    report.projected = int(projected.sum())

    missing = np.flatnonzero(found < 0)
    if missing.size:
        lattice_t = (np.arange(_FALLBACK_LATTICE) + 0.5) / _FALLBACK_LATTICE
        lattice = lattice_t[tensor_multi_index(_FALLBACK_LATTICE, d)]
        basis, _ = shape_functions_batch(mesh0.degree, d, lattice)
        for i in missing:
            elems = candidates[i][candidates[i] >= 0]
            samples = np.einsum("pi,cia->cpa", basis, mesh0.node_coords[mesh0.elements[elems]])
            dist = np.linalg.norm(samples - points[i], axis=2)
            c, p = np.unravel_index(int(np.argmin(dist)), dist.shape)
            found[i] = elems[c]
            ref_out[i] = lattice[p]
        report.lattice = int(missing.size)
        report.lattice_nodes = [int(i) for i in missing]
        logger.warning(f"field transfer: {missing.size} node(s) resolved by lattice fallback")
    return found, ref_out, report


def transfer_field(field_on_mesh0: DiscreteField, current_mesh: Mesh, neighbours: int = 8) -> DiscreteField:
    """Interpolate a mesh0 field at the node positions of a node-moved copy of mesh0."""
    mesh0 = field_on_mesh0.host_mesh
    if not mesh0.same_topology(current_mesh):
        raise ValueError("current mesh must share topology and degree with the field's host mesh")
    if np.array_equal(mesh0.node_coords, current_mesh.node_coords):
        return DiscreteField(current_mesh, field_on_mesh0.nodal_values,
                             transfer_report=TransferReport(newton=current_mesh.n_nodes))

    points = current_mesh.node_coords
    own = node_elements(mesh0)
    k = min(neighbours, mesh0.n_elements)
    _, near = cKDTree(element_centroids(mesh0)).query(points, k=k)
    near = np.asarray(near).reshape(points.shape[0], k)
    candidates = np.concatenate((own, near), axis=1)

    elems, ref, report = locate_points(mesh0, points, candidates)
    values = _evaluate_at(mesh0, field_on_mesh0.nodal_values, elems, ref)
    logger.debug(f"field transfer: newton={report.newton} projected={report.projected} lattice={report.lattice}")
    return DiscreteField(current_mesh, values, transfer_report=report)


# ---------------------------------------------------------------------------
# Limiting distance from Lagrangian motion
# ---------------------------------------------------------------------------
def limiting_distance_from_motion(mesh_prev: Mesh, mesh_lagrangian: Mesh, fraction: float,
                                  smoothing_passes: int = 0, floor: float = 0.0) -> DiscreteField:
    """
    delta(x0) = fraction * |x_L - x_prev| per node, optionally Jacobi-smoothed
    over the lattice node graph so limited regions get a transition band.
    """
    if not fraction > 0:
        raise ValueError(f"fraction must be > 0, got {fraction}")
    if smoothing_passes < 0:
        raise ValueError(f"smoothing_passes must be >= 0, got {smoothing_passes}")
    if not mesh_prev.same_topology(mesh_lagrangian):
        raise ValueError("meshes must share topology")
    delta = fraction * np.linalg.norm(mesh_lagrangian.node_coords - mesh_prev.node_coords, axis=1)
    if smoothing_passes:
        edges = lattice_edges(mesh_lagrangian)
        degree = np.bincount(edges.ravel(), minlength=mesh_lagrangian.n_nodes).astype(float)
        for _ in range(smoothing_passes):
            sums = delta.copy()
            np.add.at(sums, edges[:, 0], delta[edges[:, 1]])
            np.add.at(sums, edges[:, 1], delta[edges[:, 0]])
            delta = sums / (1.0 + degree)
    return DiscreteField(mesh_lagrangian, np.maximum(delta, floor))


# ---------------------------------------------------------------------------
# Target builders (called by the solver with the current mesh)
# ---------------------------------------------------------------------------
class StaticTargets:
    """Targets that do not depend on node positions."""

    def __init__(self, targets: TargetField):
        self.targets = targets
        self.last_transfer: TransferReport | None = None

    def __call__(self, mesh: Mesh) -> TargetField:
        return self.targets


class AdaptiveSizeTargets:
    """Isotropic size targets from an indicator g defined on mesh0."""

    def __init__(self, mesh0: Mesh, indicator: DiscreteField, alpha: float = 10.0,
                 quadrature: QuadratureRule | None = None):
        _check_alpha(alpha)
        self.mesh0 = mesh0
        self.indicator = indicator
        self.alpha = float(alpha)
        self.quadrature = quadrature or default_quadrature(mesh0)
        self.size = size_from_indicator(mesh0, indicator, alpha, self.quadrature)
        self.last_transfer: TransferReport | None = None

    def __call__(self, mesh: Mesh) -> TargetField:
        g = transfer_field(self.indicator, mesh)
        self.last_transfer = g.transfer_report
        g_q, _ = field_at_quadrature(g, mesh, self.quadrature, with_gradient=False)
        W = _adaptive_size_batch(np.clip(g_q, 0.0, 1.0), self.size, self.alpha, mesh.dim)
        return TargetField(W, volumetric=True)


class InterfaceTargets:
    """Anisotropic interface-refining targets from a material indicator eta on mesh0."""

    def __init__(self, mesh0: Mesh, eta: DiscreteField, alpha: float = 10.0,
                 quadrature: QuadratureRule | None = None):
        if mesh0.dim != 2:
            raise ValueError(f"interface targets are 2D only, mesh has dim {mesh0.dim}")
        self.mesh0 = mesh0
        self.eta = eta
        self.alpha = float(alpha)
        self.quadrature = quadrature or default_quadrature(mesh0)
        self.size = interface_size(mesh0, eta, self.quadrature, alpha)
        self.last_transfer: TransferReport | None = None

    def __call__(self, mesh: Mesh) -> TargetField:
        eta = transfer_field(self.eta, mesh)
        self.last_transfer = eta.transfer_report
        return interface_targets(self.mesh0, eta, self.quadrature, mesh=mesh, alpha=self.alpha, size=self.size)


TARGET_KINDS = ("ideal", "ideal-size", "adaptive-size", "interface")


def make_targets_builder(kind: str, mesh0: Mesh, quadrature: QuadratureRule,
                         indicator: DiscreteField | None = None, alpha: float = 10.0):
    """Target builder for one of TARGET_KINDS; the adaptive kinds need an indicator on mesh0."""
    if kind == "ideal":
        return StaticTargets(ideal_uniform_targets(mesh0, quadrature, with_size=False))
    if kind == "ideal-size":
        return StaticTargets(ideal_uniform_targets(mesh0, quadrature, with_size=True))
    if kind in ("adaptive-size", "interface"):
        if indicator is None:
            raise ValueError(f"target mode {kind!r} needs an indicator field")
        if kind == "adaptive-size":
            return AdaptiveSizeTargets(mesh0, DiscreteField.indicator(mesh0, indicator.nodal_values), alpha, quadrature)
        return InterfaceTargets(mesh0, indicator, alpha, quadrature)
    raise ValueError(f"unknown target mode {kind!r} (expected one of: {', '.join(TARGET_KINDS)})")
