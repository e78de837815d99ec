"""
solver.py -- Minimize F over the free node coordinates.

Newton-Krylov by default: truncated conjugate gradients on Hessian-vector
products taken as central differences of the analytic gradient, so only
first derivatives of the metrics are ever needed.  A limited-memory
quasi-Newton mode is available as a fallback.  Every trial point goes
through a backtracking line search that rejects infeasible meshes
(det A <= 0 or det T <= 0 anywhere) before testing sufficient decrease.

In lagged-target mode the target builder is re-invoked after each accepted
step; inside a step W is constant.
"""

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from mesh_core import InfeasibleMeshError, Mesh, local_edge_lengths
from objective import (
    Baseline,
    ObjectiveConfig,
    ObjectiveValue,
    eval_objective,
    finite_difference_gradient,
    make_baseline,
    value_and_gradient,
    worst_point,
)
from targets_fields import StaticTargets, TargetField

logger = logging.getLogger(__name__)

# forcing term for problems whose F is exactly quadratic in x
QUADRATIC_FORCING = 1e-10


class SolverMode(str, Enum):
    NEWTON_KRYLOV = "newton"
    QUASI_NEWTON = "lbfgs"


class TargetUpdate(str, Enum):
    LAGGED = "lagged"
    FROZEN_AT_START = "frozen"


class GradientMode(str, Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "finite-difference"


class Termination(str, Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    LINE_SEARCH_STALLED = "line_search_stalled"


@dataclass
class SolverParams:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    linear_max_iterations: int = 200
    linear_tolerance: float | None = None     # None: adaptive forcing term
    contraction: float = 0.5
    max_halvings: int = 30
    armijo: float = 1e-4
    mode: SolverMode = SolverMode.NEWTON_KRYLOV
    target_update: TargetUpdate = TargetUpdate.LAGGED
    gradient_mode: GradientMode = GradientMode.ANALYTIC
    lbfgs_history: int = 10
    f_floor: float = 1e-14
    plateau_tolerance: float = 1e-12
    fd_step: float = 1e-6

    def __post_init__(self):
        self.mode = SolverMode(self.mode)
        self.target_update = TargetUpdate(self.target_update)
        self.gradient_mode = GradientMode(self.gradient_mode)
        for name in ("max_iterations", "linear_max_iterations", "max_halvings", "lbfgs_history"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("gradient_tolerance", "armijo", "fd_step", "f_floor", "plateau_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.contraction < 1:
            raise ValueError(f"contraction must lie in (0, 1), got {self.contraction}")
        if self.linear_tolerance is not None and not self.linear_tolerance > 0:
            raise ValueError(f"linear_tolerance must be > 0, got {self.linear_tolerance}")


@dataclass
class IterationRecord:
    iteration: int
    objective_before: float
    objective: float
    metric_parts: tuple
    limiting_part: float
    gradient_norm: float
    min_det_a: float
    min_det_t: float
    step: float
    linear_iterations: int
    direction: str


@dataclass
class SolverReport:
    iterations: int
    history: list[IterationRecord]
    initial: ObjectiveValue
    final: ObjectiveValue
    max_displacement: float
    termination: Termination
    initial_gradient_norm: float
    final_gradient_norm: float
    target_refreshes: int = 0
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "termination": self.termination.value,
            "max_displacement": self.max_displacement,
            "initial_gradient_norm": self.initial_gradient_norm,
            "final_gradient_norm": self.final_gradient_norm,
            "target_refreshes": self.target_refreshes,
            "warnings": list(self.warnings),
            "history": [{**asdict(h), "metric_parts": list(h.metric_parts)} for h in self.history],
        }


# ---------------------------------------------------------------------------
# Directions
# ---------------------------------------------------------------------------
def fd_hess_vec(gradient_fn, x: np.ndarray, free: np.ndarray):
    """H v ~ (g(x + eps v) - g(x - eps v)) / (2 eps), eps = 1e-6 |x|_inf / |v|_inf."""
    x_scale = max(float(np.max(np.abs(x))), 1e-12)

    def product(v: np.ndarray) -> np.ndarray:
        v = np.where(free, v, 0.0)
        v_scale = float(np.max(np.abs(v)))
        if v_scale == 0.0:
            return np.zeros_like(x)
        eps = 1e-6 * x_scale / v_scale
        for _ in range(4):
            try:
                hv = (gradient_fn(x + eps * v) - gradient_fn(x - eps * v)) / (2.0 * eps)
            except InfeasibleMeshError:
                eps *= 0.1
                continue
            hv[~free] = 0.0
            return hv
        return np.full_like(x, np.nan)

    return product


def newton_step(x: np.ndarray, gradient: np.ndarray, hess_vec_product, params: SolverParams,
                forcing: float | None = None, stats: dict | None = None) -> np.ndarray:
    """
    Truncated CG for H p = -g.  Stops on the forcing-term residual, on the
    iteration cap, or on non-positive curvature (returning the current
    iterate, or -g if that happens on the first iteration).
    """
    g = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient must be finite")
    stats = stats if stats is not None else {}
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        stats.update(iterations=0, reason="zero-gradient", kind="newton")
        return np.zeros_like(g)

    eta = params.linear_tolerance if params.linear_tolerance is not None else (forcing if forcing is not None else 0.5)
    tol = eta * g_norm
    p = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = float(r @ r)
    reason = "max-iterations"
    iterations = 0
    for iterations in range(1, params.linear_max_iterations + 1):
        hd = hess_vec_product(d)
        curvature = float(d @ hd)
        if not math.isfinite(curvature) or curvature <= 0.0:
            reason = "negative-curvature"
            if iterations == 1:
                p = -g
            logger.debug(f"CG truncated on curvature {curvature:.3e} at iteration {iterations}")
            break
        alpha = rr / curvature
        p = p + alpha * d
        r = r - alpha * hd
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= tol:
            reason = "converged"
            break
        d = r + (rr_new / rr) * d
        rr = rr_new

    kind = "newton"
    if float(g @ p) >= 0.0:
        logger.debug("CG direction is not a descent direction; using -g")
        p = -g
        kind = "steepest"
    stats.update(iterations=iterations, reason=reason, kind=kind)
    return p


def lbfgs_direction(gradient: np.ndarray, memory) -> np.ndarray:
    """Two-loop recursion over (s, y, 1/(y.s)) pairs, oldest first."""
    q = gradient.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if memory:
        s, y, _ = memory[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


# ---------------------------------------------------------------------------
# Line search
# ---------------------------------------------------------------------------
@dataclass
class LineSearchResult:
    step: float
    value: ObjectiveValue
    x: np.ndarray
    halvings: int


def line_search(x: np.ndarray, direction: np.ndarray, evaluate, params: SolverParams, *,
                current: ObjectiveValue, gradient: np.ndarray) -> LineSearchResult | None:
    """
    Backtrack from step 1.  A trial is accepted when the mesh is feasible
    (min det A > 0, min det T > 0, all metrics finite) and
    F(x + a p) <= F(x) + armijo * a * g.p (plus a 1e-14 relative slack).
    Returns None on a non-descent direction or after max_halvings.
    """
    slope = float(gradient @ direction)
    if not np.any(direction) or not slope < 0.0:
        logger.debug(f"line search rejected a non-descent direction (g.p = {slope:.3e})")
        return None
    slack = 1e-14 * max(abs(current.total), 1.0)
    step = 1.0
    for halving in range(params.max_halvings + 1):
        trial = x + step * direction
        value = evaluate(trial)
        if not (value.feasible and value.min_det_a > 0 and value.min_det_t > 0):
            logger.debug(f"  step {step:.3e}: infeasible (min det A {value.min_det_a:.3e})")
        elif value.total <= current.total + params.armijo * step * slope + slack:
            return LineSearchResult(step=step, value=value, x=trial, halvings=halving)
        else:
            logger.debug(f"  step {step:.3e}: insufficient decrease ({value.total:.6e} vs {current.total:.6e})")
        step *= params.contraction
    return None


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------
def optimize(mesh: Mesh, targets_builder, config: ObjectiveConfig, params: SolverParams | None = None,
             baseline: Baseline | None = None) -> tuple[Mesh, SolverReport]:
    """
    Minimize F starting from `mesh`.  `targets_builder` maps a mesh to a
    TargetField (a TargetField is accepted and treated as static).  The
    baseline defaults to one built on `mesh` itself.
    """
    params = params or SolverParams()
    if isinstance(targets_builder, TargetField):
        targets_builder = StaticTargets(targets_builder)
    targets = targets_builder(mesh)
    if baseline is None:
        baseline = make_baseline(mesh, targets, config)
    mesh0 = baseline.mesh0
    if not mesh0.same_topology(mesh):
        raise ValueError("mesh and baseline must share topology")

    free = np.repeat(config.free_mask(mesh0), mesh.dim)
    x = np.array(mesh.node_coords, dtype=float).reshape(-1)
    lagged = params.target_update is TargetUpdate.LAGGED
    quadratic = config.is_quadratic

    def evaluate(xv, tf=None):
        return eval_objective(xv, baseline, tf if tf is not None else targets, config)

    def gradient(xv):
        if params.gradient_mode is GradientMode.ANALYTIC:
            return value_and_gradient(xv, baseline, targets, config)[1]

        def total(xt):
            tf = targets_builder(mesh.with_coords(xt)) if lagged else targets
            return evaluate(xt, tf).total

        return finite_difference_gradient(xv, total, free, params.fd_step)

    value = evaluate(x)
    if not (value.feasible and value.min_det_a > 0 and value.min_det_t > 0):
        e, q, det = worst_point(x, baseline, targets)
        raise InfeasibleMeshError(f"initial mesh is infeasible: det T = {det:.3e} at element {e}, point {q}",
                                  element=e, point=q, value=det)
    initial = value
    g = gradient(x)
    g0 = float(np.max(np.abs(g))) if g.size else 0.0
    h_min = float(local_edge_lengths(mesh).min())

    def steepest(gv):
        scale = float(np.max(np.abs(gv)))
        return -gv * (0.25 * h_min / scale) if scale > 0 else np.zeros_like(gv)

    history: list[IterationRecord] = []
    memory = deque(maxlen=params.lbfgs_history)
    termination = Termination.MAX_ITERATIONS
    warnings: list[str] = []
    refreshes = 0
    logger.info(f"optimize: {mesh0.n_elements} elements, {int(free.sum())} free dofs, "
                f"F0 = {value.total:.6e}, |g0| = {g0:.3e}, mode={params.mode.value}")

    for it in range(1, params.max_iterations + 2):
        g_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if g_norm <= params.gradient_tolerance * g0 or value.total <= params.f_floor:
            termination = Termination.CONVERGED
            break
        if it > params.max_iterations:
            break

        stats: dict = {}
        if params.mode is SolverMode.NEWTON_KRYLOV:
            forcing = QUADRATIC_FORCING if quadratic else min(0.5, math.sqrt(g_norm / g0))
            p = newton_step(x, g, fd_hess_vec(gradient, x, free), params, forcing=forcing, stats=stats)
            if stats.get("kind") == "steepest":
                p = steepest(g)
        else:
            p = lbfgs_direction(g, memory) if memory else steepest(g)
            stats.update(iterations=0, kind="lbfgs" if memory else "steepest")
            if float(g @ p) >= 0.0:
                p, stats["kind"] = steepest(g), "steepest"
        p[~free] = 0.0

        result = line_search(x, p, evaluate, params, current=value, gradient=g)
        if result is None and stats.get("kind") != "steepest":
            msg = f"iteration {it}: line search failed on the {stats.get('kind')} direction; trying steepest descent"
            logger.warning(msg)
            warnings.append(msg)
            memory.clear()
            stats["kind"] = "steepest"
            result = line_search(x, steepest(g), evaluate, params, current=value, gradient=g)
        if result is None:
            msg = f"iteration {it}: line search stalled after {params.max_halvings} halvings"
            logger.warning(msg)
            warnings.append(msg)
            termination = Termination.LINE_SEARCH_STALLED
            break

        f_before = value.total
        accepted = result.value
        s_vec = result.x - x
        x = result.x
        if lagged and not isinstance(targets_builder, StaticTargets):
            targets = targets_builder(mesh.with_coords(x))
            refreshes += 1
            value = evaluate(x)
        else:
            value = accepted
        new_g = gradient(x)
        y_vec = new_g - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-12 * float(np.linalg.norm(s_vec) * np.linalg.norm(y_vec)):
            memory.append((s_vec, y_vec, 1.0 / sy))
        g = new_g

        record = IterationRecord(
            iteration=it,
            objective_before=f_before,
            objective=accepted.total,
            metric_parts=accepted.metric_parts,
            limiting_part=accepted.limiting_part,
            gradient_norm=float(np.max(np.abs(g))),
            min_det_a=accepted.min_det_a,
            min_det_t=accepted.min_det_t,
            step=result.step,
            linear_iterations=int(stats.get("iterations", 0)),
            direction=str(stats.get("kind", "newton")),
        )
        history.append(record)
        logger.info(f"  it {it:3d}  F {record.objective:.8e}  metric {sum(record.metric_parts):.6e}  "
                    f"limit {record.limiting_part:.3e}  |g| {record.gradient_norm:.3e}  "
                    f"minDetA {record.min_det_a:.3e}  step {record.step:.3g}  cg {record.linear_iterations}")

        if f_before - accepted.total <= params.plateau_tolerance * max(abs(f_before), 1e-300):
            termination = Termination.CONVERGED
            break

    final_mesh = mesh.with_coords(x)
    displacement = np.linalg.norm(final_mesh.node_coords - baseline.x0, axis=1)
    report = SolverReport(
        iterations=len(history),
        history=history,
        initial=initial,
        final=value,
        max_displacement=float(displacement.max()) if displacement.size else 0.0,
        termination=termination,
        initial_gradient_norm=g0,
        final_gradient_norm=float(np.max(np.abs(g))) if g.size else 0.0,
        target_refreshes=refreshes,
        warnings=warnings,
    )
    logger.info(f"optimize: {termination.value} after {report.iterations} iteration(s), "
                f"F = {value.total:.8e}, max displacement {report.max_displacement:.3e}")
    return final_mesh, report
