"""
objective.py -- Normalized multi-metric objective F(x) with the limiting term.

    F(x) = (1/n) sum_s  [ sum_E sum_q w_q det W  w_s  mu_s(T) ] / D_s
           + c sum_E sum_q w_q det W  xi(x_q - x0_q, delta(x0_q))

D_s is the same integral evaluated on the Lagrangian mesh, so every metric
term starts at exactly 1/n.  c = 1/V for volumetric targets, 1/N_E otherwise.
Weights and delta are looked up by quadrature-point provenance on mesh0;
node movement never changes which value applies.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from mesh_core import (
    InfeasibleMeshError,
    Mesh,
    QuadratureRule,
    bounding_box_diameter,
    gauss_legendre_rule,
    reference_table,
)
from metrics import MetricId, eval_metric_batch, metric_grad_batch
from targets_fields import DiscreteField, TargetField, bounded_field_at_quadrature

logger = logging.getLogger(__name__)

XI_EXPONENT = 10.0
DELTA_FLOOR = 1e-12           # relative to the bounding-box diameter of mesh0
IDENTITY_NORMALIZATION = 1e-14


class XiKind(str, Enum):
    NONE = "none"
    QUADRATIC = "quadratic"
    EXPONENTIAL = "exponential"


@dataclass
class MetricTerm:
    metric: MetricId
    weight: float | DiscreteField = 1.0

    def __post_init__(self):
        self.metric = MetricId(self.metric)
        if isinstance(self.weight, DiscreteField):
            if np.any(self.weight.nodal_values < 0):
                raise ValueError("metric weights must be >= 0")
        else:
            self.weight = float(self.weight)
            if not self.weight >= 0:
                raise ValueError(f"metric weight must be >= 0, got {self.weight}")


@dataclass
class ObjectiveConfig:
    metric_terms: list[MetricTerm]
    xi_kind: XiKind = XiKind.NONE
    delta: float | DiscreteField = 1.0
    quad_points: int | None = None
    free_nodes: np.ndarray | None = None     # None: every non-boundary node

    def __post_init__(self):
        self.metric_terms = [t if isinstance(t, MetricTerm) else MetricTerm(t) for t in self.metric_terms]
        if not self.metric_terms:
            raise ValueError("at least one metric term is required")
        self.xi_kind = XiKind(self.xi_kind)
        if isinstance(self.delta, DiscreteField):
            if np.any(self.delta.nodal_values < 0):
                raise ValueError("limiting distance field must be >= 0")
        else:
            self.delta = float(self.delta)
            if self.xi_kind is not XiKind.NONE and not self.delta > 0:
                raise ValueError(f"delta must be > 0 when limiting is active, got {self.delta}")
        if self.quad_points is not None and self.quad_points < 1:
            raise ValueError(f"quad_points must be >= 1, got {self.quad_points}")

    @property
    def n_terms(self) -> int:
        return len(self.metric_terms)

    @property
    def is_quadratic(self) -> bool:
        """True for limiting-only xi1 problems (every metric weight zero)."""
        if self.xi_kind is not XiKind.QUADRATIC:
            return False
        for term in self.metric_terms:
            weight = term.weight.nodal_values if isinstance(term.weight, DiscreteField) else term.weight
            if np.any(weight):
                return False
        return True

    def quadrature(self, mesh: Mesh) -> QuadratureRule:
        return gauss_legendre_rule(self.quad_points or mesh.degree + 2, mesh.dim)

    def free_mask(self, mesh: Mesh) -> np.ndarray:
        if self.free_nodes is None:
            return ~mesh.boundary_mask
        mask = np.zeros(mesh.n_nodes, dtype=bool)
        mask[np.asarray(self.free_nodes, dtype=np.int64)] = True
        return mask


@dataclass(frozen=True, eq=False)
class Baseline:
    mesh0: Mesh
    x0: np.ndarray
    denominators: np.ndarray
    identity_normalized: tuple
    limit_scale: float
    targets0: TargetField
    quadrature: QuadratureRule
    weights_q: tuple                 # per term, (E, Q)
    delta_q: np.ndarray              # (E, Q)
    x0_q: np.ndarray                 # (E, Q, d)


@dataclass(frozen=True)
class ObjectiveValue:
    total: float
    metric_parts: tuple
    limiting_part: float
    feasible: bool
    min_det_a: float = math.nan
    min_det_t: float = math.nan

    @property
    def metric_total(self) -> float:
        return float(sum(self.metric_parts))

    def as_dict(self) -> dict:
        return {
            "F": self.total,
            "metric_parts": list(self.metric_parts),
            "metric_part": self.metric_total,
            "limiting_part": self.limiting_part,
            "feasible": self.feasible,
            "min_det_a": self.min_det_a,
            "min_det_t": self.min_det_t,
        }


# ---------------------------------------------------------------------------
# Limiting function
# ---------------------------------------------------------------------------
def _xi_batch(kind: XiKind, disp: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """xi values (...) and d xi / d disp (..., d)."""
    ratio = np.sum(disp * disp, axis=-1) / (delta * delta)
    scale = (2.0 / (delta * delta))[..., None] * disp
    if kind is XiKind.QUADRATIC:
        return ratio, scale
    with np.errstate(over="ignore"):
        value = np.exp(XI_EXPONENT * (ratio - 1.0))
    return value, (XI_EXPONENT * value)[..., None] * scale


def xi(kind, displacement, delta: float) -> float:
    kind = XiKind(kind)
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    if kind is XiKind.NONE:
        return 0.0
    disp = np.asarray(displacement, dtype=float)
    value, _ = _xi_batch(kind, disp, np.asarray(float(delta)))
    return float(value)


# ---------------------------------------------------------------------------
# Baseline
# ---------------------------------------------------------------------------
def _as_nodes(x, mesh: Mesh) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(mesh.n_nodes, mesh.dim)


def _provenance_values(value, mesh0: Mesh, quadrature: QuadratureRule) -> np.ndarray:
    if isinstance(value, DiscreteField):
        return bounded_field_at_quadrature(value, mesh0, quadrature)
    return np.full((mesh0.n_elements, quadrature.size), float(value))


def make_baseline(mesh0: Mesh, targets: TargetField, config: ObjectiveConfig) -> Baseline:
    quadrature = config.quadrature(mesh0)
    table = reference_table(mesh0.degree, mesh0.dim, quadrature)
    x0 = np.array(mesh0.node_coords)
    A0 = np.einsum("eia,qir->eqar", x0[mesh0.elements], table.gradients)
    det_a = np.linalg.det(A0)
    if targets.W.shape[:2] != det_a.shape:
        raise ValueError(f"target field shape {targets.W.shape[:2]} does not match mesh/quadrature {det_a.shape}")
    if det_a.min() <= 0:
        e, q = np.unravel_index(int(np.argmin(det_a)), det_a.shape)
        raise InfeasibleMeshError(f"initial mesh is inverted: det A = {det_a[e, q]:.3e} at element {e}, point {q}",
                                  element=int(e), point=int(q), value=float(det_a[e, q]))

    measure = quadrature.weights * targets.det_W
    T0 = A0 @ targets.W_inv
    weights_q = tuple(_provenance_values(t.weight, mesh0, quadrature) for t in config.metric_terms)

    denominators = np.empty(config.n_terms)
    flags = []
    for s, term in enumerate(config.metric_terms):
        mu0 = eval_metric_batch(term.metric, T0)
        if not np.all(np.isfinite(mu0)):
            e, q = np.unravel_index(int(np.argmax(~np.isfinite(mu0))), mu0.shape)
            raise InfeasibleMeshError(f"metric {term.metric.value} infeasible on the initial mesh at element {e}, point {q}",
                                      element=int(e), point=int(q))
        weighted = measure * weights_q[s]
        value = float(np.sum(weighted * mu0))
        if value <= IDENTITY_NORMALIZATION * float(np.sum(weighted)) or value <= 0.0:
            logger.info(f"metric term {s} ({term.metric.value}) is already optimal on mesh0; using raw integral")
            value = 1.0
            flags.append(True)
        else:
            flags.append(False)
        denominators[s] = value

    if targets.volumetric:
        limit_scale = 1.0 / float(np.sum(quadrature.weights * det_a))
    else:
        limit_scale = 1.0 / mesh0.n_elements

    floor = DELTA_FLOOR * bounding_box_diameter(mesh0)
    if isinstance(config.delta, DiscreteField):
        # interpolate the stiffness 1/delta^2 so one strongly limited node
        # dominates the quadrature points around it
        stiffness = DiscreteField(mesh0, 1.0 / np.maximum(config.delta.nodal_values, floor) ** 2)
        delta_q = 1.0 / np.sqrt(bounded_field_at_quadrature(stiffness, mesh0, quadrature))
    else:
        delta_q = _provenance_values(config.delta, mesh0, quadrature)
    delta_q = np.maximum(delta_q, floor)
    x0_q = np.einsum("qi,eia->eqa", table.values, x0[mesh0.elements])
    return Baseline(mesh0=mesh0, x0=x0, denominators=denominators, identity_normalized=tuple(flags),
                    limit_scale=limit_scale, targets0=targets, quadrature=quadrature,
                    weights_q=weights_q, delta_q=delta_q, x0_q=x0_q)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def _evaluate(x, baseline: Baseline, targets: TargetField, config: ObjectiveConfig,
              want_gradient: bool) -> tuple[ObjectiveValue, np.ndarray | None]:
    mesh0 = baseline.mesh0
    quadrature = baseline.quadrature
    table = reference_table(mesh0.degree, mesh0.dim, quadrature)
    nodes = _as_nodes(x, mesh0)
    x_e = nodes[mesh0.elements]
    A = np.einsum("eia,qir->eqar", x_e, table.gradients)
    det_a = np.linalg.det(A)
    T = A @ targets.W_inv
    det_t = det_a / targets.det_W
    measure = quadrature.weights * targets.det_W
    n = config.n_terms
    min_det_a, min_det_t = float(det_a.min()), float(det_t.min())

    parts = []
    feasible = True
    dF_dT = np.zeros_like(T) if want_gradient else None
    for s, term in enumerate(config.metric_terms):
        mu = eval_metric_batch(term.metric, T)
        if not np.all(np.isfinite(mu)):
            feasible = False
            break
        coef = measure * baseline.weights_q[s] / (n * baseline.denominators[s])
        parts.append(float(np.sum(coef * mu)))
        if want_gradient:
            dF_dT += coef[..., None, None] * metric_grad_batch(term.metric, T)

    if not feasible:
        value = ObjectiveValue(math.inf, tuple(math.inf for _ in range(n)), math.inf, False, min_det_a, min_det_t)
        if want_gradient:
            e, q = np.unravel_index(int(np.argmin(det_t)), det_t.shape)
            raise InfeasibleMeshError(f"objective gradient requested at an infeasible point "
                                      f"(det T = {det_t[e, q]:.3e} at element {e}, point {q})",
                                      element=int(e), point=int(q), value=float(det_t[e, q]))
        return value, None

    limiting = 0.0
    dxi = None
    if config.xi_kind is not XiKind.NONE:
        x_q = np.einsum("qi,eia->eqa", table.values, x_e)
        xi_q, dxi = _xi_batch(config.xi_kind, x_q - baseline.x0_q, baseline.delta_q)
        limiting = float(baseline.limit_scale * np.sum(measure * xi_q))
        if want_gradient:
            dxi = (baseline.limit_scale * measure)[..., None] * dxi

    total = float(sum(parts) + limiting)
    value = ObjectiveValue(total, tuple(parts), limiting, True, min_det_a, min_det_t)
    if not want_gradient:
        return value, None

    # dF/dA = dF/dT W^-t, then chain through dA/dx_E = grad w_i
    dF_dA = np.einsum("eqab,eqcb->eqac", dF_dT, targets.W_inv)
    d_xe = np.einsum("eqar,qir->eia", dF_dA, table.gradients)
    if dxi is not None:
        d_xe += np.einsum("eqa,qi->eia", dxi, table.values)

    grad = np.empty((mesh0.n_nodes, mesh0.dim))
    flat_nodes = mesh0.elements.ravel()
    for a in range(mesh0.dim):
        grad[:, a] = np.bincount(flat_nodes, weights=d_xe[..., a].ravel(), minlength=mesh0.n_nodes)
    grad[~config.free_mask(mesh0)] = 0.0
    return value, grad


def eval_objective(x, baseline: Baseline, targets: TargetField, config: ObjectiveConfig) -> ObjectiveValue:
    value, _ = _evaluate(x, baseline, targets, config, want_gradient=False)
    return value


def objective_gradient(x, baseline: Baseline, targets: TargetField, config: ObjectiveConfig) -> np.ndarray:
    """dF/dx with W held constant; same shape as x, zero on fixed nodes."""
    _, grad = _evaluate(x, baseline, targets, config, want_gradient=True)
    return grad.reshape(np.shape(x))


def value_and_gradient(x, baseline: Baseline, targets: TargetField,
                       config: ObjectiveConfig) -> tuple[ObjectiveValue, np.ndarray]:
    value, grad = _evaluate(x, baseline, targets, config, want_gradient=True)
    return value, grad.reshape(np.shape(x))


def finite_difference_gradient(x, evaluate, free_mask: np.ndarray | None = None, step: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function over the free coordinates of x."""
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    if free_mask is None:
        dofs = np.arange(flat.size)
    else:
        mask = np.asarray(free_mask, dtype=bool)
        if mask.size != flat.size:
            mask = np.repeat(mask, flat.size // mask.size)
        dofs = np.flatnonzero(mask)
    for i in dofs:
        saved = flat[i]
        flat[i] = saved + step
        f_plus = evaluate(x)
        flat[i] = saved - step
        f_minus = evaluate(x)
        flat[i] = saved
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def metric_integrals(x, baseline: Baseline, targets: TargetField, config: ObjectiveConfig,
                     element_mask: np.ndarray | None = None) -> np.ndarray:
    """Raw (unnormalized) metric integrals, optionally restricted to some elements."""
    mesh0 = baseline.mesh0
    table = reference_table(mesh0.degree, mesh0.dim, baseline.quadrature)
    A = np.einsum("eia,qir->eqar", _as_nodes(x, mesh0)[mesh0.elements], table.gradients)
    T = A @ targets.W_inv
    measure = baseline.quadrature.weights * targets.det_W
    mask = np.ones(mesh0.n_elements, dtype=bool) if element_mask is None else np.asarray(element_mask, dtype=bool)
    return np.array([
        float(np.sum((measure * baseline.weights_q[s] * eval_metric_batch(term.metric, T))[mask]))
        for s, term in enumerate(config.metric_terms)
    ])


def worst_point(x, baseline: Baseline, targets: TargetField) -> tuple[int, int, float]:
    """(element, quadrature point, det T) of the smallest weighted Jacobian determinant."""
    mesh0 = baseline.mesh0
    table = reference_table(mesh0.degree, mesh0.dim, baseline.quadrature)
    A = np.einsum("eia,qir->eqar", _as_nodes(x, mesh0)[mesh0.elements], table.gradients)
    det_t = np.linalg.det(A) / targets.det_W
    e, q = np.unravel_index(int(np.argmin(det_t)), det_t.shape)
    return int(e), int(q), float(det_t[e, q])
