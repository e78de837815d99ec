"""
trigger.py -- Remesh trigger based on an admissible Jacobian S.

The worst tolerable element has Jacobian S; with U = S W^-1 the bound
mu(U) is the largest acceptable metric value.  A mesh "fires" the trigger
when mu(T) >= mu(U) at any quadrature point.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from mesh_core import Mesh, QuadratureRule, jacobians
from metrics import MetricId, eval_metric, eval_metric_batch, metric_from_name
from targets_fields import TargetField

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class AdmissibleSpec:
    S: np.ndarray
    metric: MetricId

    def __post_init__(self):
        S = np.array(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"S must be a square matrix, got shape {S.shape}")
        if not np.linalg.det(S) > 0:
            raise ValueError(f"admissible Jacobian must have det S > 0, got {np.linalg.det(S):.3e}")
        S.flags.writeable = False
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "metric", MetricId(self.metric))


class TriggerResult(NamedTuple):
    fires: bool
    worst_ratio: float
    worst_location: tuple
    infeasible_points: int = 0
    infeasible_bounds: int = 0


def admissible_from_diagonal(values, metric) -> AdmissibleSpec:
    values = [float(v) for v in values]
    if len(values) not in (2, 3):
        raise ValueError(f"admissible diagonal needs 2 or 3 entries, got {len(values)}")
    return AdmissibleSpec(np.diag(values), metric_from_name(metric) if isinstance(metric, str) else metric)


def admissible_bound(spec: AdmissibleSpec, W) -> float:
    W = np.asarray(W, dtype=float)
    if not np.linalg.det(W) > 0:
        raise ValueError("target matrix must have det W > 0")
    return eval_metric(spec.metric, spec.S @ np.linalg.inv(W))


def admissible_bounds(spec: AdmissibleSpec, targets: TargetField) -> np.ndarray:
    """mu(S W^-1) at every stored target point, shape (E, Q)."""
    return eval_metric_batch(spec.metric, spec.S @ targets.W_inv)


def check_trigger(mesh: Mesh, targets: TargetField, spec: AdmissibleSpec,
                  quadrature: QuadratureRule) -> TriggerResult:
    """
    Fires iff mu(T) >= mu(U) anywhere.  Infeasible T (ratio inf) and
    infeasible bounds both fire.  Ties in the worst ratio resolve to the
    lowest (element, point) index.
    """
    if spec.S.shape[0] != mesh.dim:
        raise ValueError(f"admissible Jacobian is {spec.S.shape[0]}D, mesh is {mesh.dim}D")
    T = jacobians(mesh, quadrature) @ targets.W_inv
    mu_t = eval_metric_batch(spec.metric, T)
    mu_u = admissible_bounds(spec, targets)
    bad_bounds = ~np.isfinite(mu_u)
    bad_points = ~np.isfinite(mu_t)

    ratio = mu_t / np.maximum(np.where(bad_bounds, RATIO_FLOOR, mu_u), RATIO_FLOOR)
    ratio = np.where(bad_points, np.inf, ratio)
    flat = int(np.argmax(ratio))
    e, q = np.unravel_index(flat, ratio.shape)
    fires = bool(np.any(bad_points) or np.any(bad_bounds) or np.any(mu_t >= mu_u))
    if bad_bounds.any():
        logger.warning(f"trigger: admissible bound infeasible at {int(bad_bounds.sum())} point(s); treated as firing")
    return TriggerResult(fires=fires, worst_ratio=float(ratio[e, q]), worst_location=(int(e), int(q)),
                         infeasible_points=int(bad_points.sum()), infeasible_bounds=int(bad_bounds.sum()))


def scan_trigger(meshes, targets_for, spec: AdmissibleSpec,
                 quadrature: QuadratureRule) -> tuple[int | None, list[TriggerResult]]:
    """Evaluate a mesh sequence; returns the first firing index (or None) and all results."""
    results = []
    first = None
    for index, mesh in enumerate(meshes):
        result = check_trigger(mesh, targets_for(mesh), spec, quadrature)
        results.append(result)
        if result.fires and first is None:
            first = index
            logger.info(f"trigger fires at sequence index {index} (worst ratio {result.worst_ratio:.4f})")
    return first, results
