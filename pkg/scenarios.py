"""
scenarios.py -- Built-in reproducible optimization problems.

    perturbed-square   n x n degree-3 unit square with a smooth seeded
                       perturbation, mu9 + xi1, delta = 0.1, ideal equal-size targets
    local-limit        nodal seeded perturbation, delta = 1e-4 where x > y on the lattice, else 1.0
    sine-interface     material indicator with a sine-shaped interface,
                       interface targets + mu9
    size-band          horizontal band indicator (width 0.2), adaptive size
                       targets with alpha = 10, mu7
    deform-sequence    x(t) = x0 + t u(x0), t = 0, 0.05, ..., 1, for trigger scans

Every scenario is fully determined by its ScenarioSpec (name + seed + sizes).

Usage:
    from scenarios import ScenarioSpec, build_scenario, run_scenario
    scenario = build_scenario(ScenarioSpec("perturbed-square", refinements=1))
    mesh, report = run_scenario(scenario)
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from mesh_core import (
    InfeasibleMeshError,
    Lcg64,
    Mesh,
    default_quadrature,
    min_det_jacobian,
    perturb_interior,
    structured_mesh,
    uniform_refine,
)
from metrics import MetricId, metric_from_name
from objective import MetricTerm, ObjectiveConfig, XiKind
from solver import SolverParams, SolverReport, optimize
from targets_fields import (
    DiscreteField,
    StaticTargets,
    ideal_uniform_targets,
    limiting_distance_from_motion,
    make_targets_builder,
    sample_field,
)
from trigger import AdmissibleSpec, check_trigger

logger = logging.getLogger(__name__)

SCENARIOS = ("perturbed-square", "local-limit", "sine-interface", "size-band", "deform-sequence")

_DEFAULTS = {
    "perturbed-square": {"n": 8, "degree": 3, "amplitude": 0.03, "perturbation": "smooth"},
    "local-limit": {"n": 8, "degree": 3, "amplitude": 0.2, "perturbation": "nodal"},
    "sine-interface": {"n": 16, "degree": 2, "amplitude": 0.0, "perturbation": "none"},
    "size-band": {"n": 16, "degree": 2, "amplitude": 0.0, "perturbation": "none"},
    "deform-sequence": {"n": 8, "degree": 2, "amplitude": 0.0, "perturbation": "none"},
}

BAND_CENTER = 0.5
BAND_WIDTH = 0.2
INTERFACE_THICKNESS = 0.02
SEQUENCE_STEPS = 21
SEQUENCE_S22 = 4.0


@dataclass
class ScenarioSpec:
    name: str
    n: int | None = None
    degree: int | None = None
    refinements: int = 0
    seed: int = 42
    amplitude: float | None = None
    perturbation: str | None = None          # smooth | nodal | none
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r} (expected one of: {', '.join(SCENARIOS)})")
        defaults = _DEFAULTS[self.name]
        for key in ("n", "degree", "amplitude", "perturbation"):
            if getattr(self, key) is None:
                setattr(self, key, defaults[key])
        if self.refinements < 0:
            raise ValueError(f"refinements must be >= 0, got {self.refinements}")
        if self.perturbation not in ("smooth", "nodal", "none"):
            raise ValueError(f"unknown perturbation {self.perturbation!r}")


@dataclass
class Scenario:
    spec: ScenarioSpec
    mesh0: Mesh
    fields: dict
    config: ObjectiveConfig
    target: str
    alpha: float = 10.0
    sequence: list = field(default_factory=list)
    admissible: AdmissibleSpec | None = None

    @property
    def indicator(self) -> DiscreteField | None:
        return self.fields.get("indicator")

    def targets_builder(self):
        return make_targets_builder(self.target, self.mesh0, self.config.quadrature(self.mesh0),
                                    self.indicator, self.alpha)


# ---------------------------------------------------------------------------
# Indicator functions and perturbations
# ---------------------------------------------------------------------------
def sine_interface_eta(points: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * (1.0 + np.tanh((y - 0.4 - 0.1 * np.sin(2.0 * np.pi * x)) / INTERFACE_THICKNESS))


def band_indicator(points: np.ndarray, ramp: float) -> np.ndarray:
    """1 inside |y - 0.5| < 0.1, 0 outside, C1 ramp of width `ramp` centred on the band edge."""
    dist = np.abs(points[:, 1] - BAND_CENTER) - 0.5 * BAND_WIDTH
    t = np.clip(0.5 - dist / ramp, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def deform_displacement(points: np.ndarray) -> np.ndarray:
    """u(x, y) = (0, 2 y^2): vertical stretch growing toward the top."""
    u = np.zeros_like(points)
    u[:, 1] = 2.0 * points[:, 1] ** 2
    return u


def vortex_velocity(points: np.ndarray) -> np.ndarray:
    """Divergence-free single vortex vanishing on the unit-square boundary."""
    x, y = points[:, 0], points[:, 1]
    v = np.empty_like(points)
    v[:, 0] = -np.sin(np.pi * x) ** 2 * np.sin(2.0 * np.pi * y)
    v[:, 1] = np.sin(2.0 * np.pi * x) * np.sin(np.pi * y) ** 2
    return v


def smooth_perturbation(mesh: Mesh, amplitude: float, seed: int) -> Mesh:
    """
    Interior nodes displaced by a seeded sum of sin(m1 pi x) sin(m2 pi y)
    modes (m in {1, 2}), scaled so the largest nodal displacement component
    equals `amplitude`.  The field is defined in physical space, so the
    same seed gives the same geometry on any mesh of the unit square.
    """
    if amplitude <= 0:
        return mesh
    rng = Lcg64(seed)
    coeffs = rng.uniform(2 * 4, -1.0, 1.0).reshape(2, 2, 2)
    pts = mesh.node_coords
    u = np.zeros_like(pts)
    for a in range(2):
        for m1 in (1, 2):
            for m2 in (1, 2):
                u[:, a] += coeffs[a, m1 - 1, m2 - 1] * np.sin(m1 * np.pi * pts[:, 0]) * np.sin(m2 * np.pi * pts[:, 1])
    peak = float(np.max(np.abs(u)))
    if peak > 0:
        u *= amplitude / peak
    u[mesh.boundary_mask] = 0.0
    return mesh.with_coords(pts + u)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------
def _apply_overrides(config: ObjectiveConfig, overrides: dict) -> tuple[ObjectiveConfig, float | None]:
    alpha = None
    terms = config.metric_terms
    xi_kind, delta, quad = config.xi_kind, config.delta, config.quad_points
    for key, value in overrides.items():
        if key == "metric":
            names = value.split(",") if isinstance(value, str) else list(value)
            terms = [MetricTerm(metric_from_name(n)) for n in names]
        elif key == "xi":
            xi_kind = XiKind(value)
        elif key == "delta":
            delta = value
        elif key == "quad_points":
            quad = int(value)
        elif key == "alpha":
            alpha = float(value)
        else:
            raise ValueError(f"unknown scenario override {key!r}")
    return ObjectiveConfig(terms, xi_kind, delta, quad, config.free_nodes), alpha


def _base_mesh(spec: ScenarioSpec) -> tuple[Mesh, Mesh]:
    """The scenario mesh and its unperturbed lattice (same node numbering)."""
    lattice = structured_mesh(spec.n, degree=spec.degree, dim=2)
    mesh = lattice
    if spec.perturbation == "smooth":
        mesh = smooth_perturbation(mesh, spec.amplitude, spec.seed)
    for _ in range(spec.refinements):
        mesh = uniform_refine(mesh)
        lattice = uniform_refine(lattice)
    if spec.perturbation == "nodal":
        mesh = perturb_interior(mesh, spec.amplitude, spec.seed)
    return mesh, lattice


def build_scenario(spec: ScenarioSpec) -> Scenario:
    mesh, lattice = _base_mesh(spec)
    fields: dict = {}
    alpha = 10.0
    sequence: list = []
    admissible = None

    if spec.name == "perturbed-square":
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE9)], XiKind.QUADRATIC, delta=0.1)
        target = "ideal-size"
    elif spec.name == "local-limit":
        # classified on the unperturbed lattice so the split follows lattice lines
        p = lattice.node_coords
        delta = DiscreteField(mesh, np.where(p[:, 0] > p[:, 1], 1e-4, 1.0))
        fields["delta"] = delta
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE9)], XiKind.QUADRATIC, delta=delta)
        target = "ideal-size"
    elif spec.name == "sine-interface":
        fields["indicator"] = sample_field(mesh, sine_interface_eta)
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE9)])
        target = "interface"
    elif spec.name == "size-band":
        spacing = 1.0 / (spec.n * spec.degree * 2 ** spec.refinements)
        g = band_indicator(mesh.node_coords, ramp=2.0 * spacing)
        fields["indicator"] = DiscreteField.indicator(mesh, g)
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE_SIZE7)])
        target = "adaptive-size"
    else:
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE2)])
        target = "ideal"
        u = deform_displacement(mesh.node_coords)
        sequence = [mesh.with_coords(mesh.node_coords + t * u) for t in np.linspace(0.0, 1.0, SEQUENCE_STEPS)]
        admissible = AdmissibleSpec(np.diag([1.0, SEQUENCE_S22]), MetricId.SHAPE2)

    if spec.overrides:
        config, override_alpha = _apply_overrides(config, spec.overrides)
        alpha = override_alpha if override_alpha is not None else alpha
    logger.debug(f"scenario {spec.name}: {mesh.n_elements} elements, {mesh.n_nodes} nodes, target={target}")
    return Scenario(spec=spec, mesh0=mesh, fields=fields, config=config, target=target,
                    alpha=alpha, sequence=sequence, admissible=admissible)


def run_scenario(scenario: Scenario, params: SolverParams | None = None) -> tuple[Mesh, SolverReport]:
    return optimize(scenario.mesh0, scenario.targets_builder(), scenario.config, params)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------
@dataclass
class StudyRow:
    refinements: int
    elements: int
    final_F: float
    metric_part: float
    limiting_part: float
    max_displacement: float
    iterations: int
    termination: str


def refinement_study(name: str = "perturbed-square", levels=(0, 1, 2), seed: int = 42,
                     params: SolverParams | None = None, n: int | None = None) -> list[StudyRow]:
    """Optimize the same physical problem at several refinement levels."""
    rows = []
    for level in levels:
        scenario = build_scenario(ScenarioSpec(name, n=n, refinements=level, seed=seed))
        _, report = run_scenario(scenario, params)
        rows.append(StudyRow(
            refinements=level,
            elements=scenario.mesh0.n_elements,
            final_F=report.final.total,
            metric_part=report.final.metric_total,
            limiting_part=report.final.limiting_part,
            max_displacement=report.max_displacement,
            iterations=report.iterations,
            termination=report.termination.value,
        ))
        logger.info(f"study {name} r={level}: E={rows[-1].elements} F={rows[-1].final_F:.6f} "
                    f"metric={rows[-1].metric_part:.6f} limit={rows[-1].limiting_part:.6f} "
                    f"disp={rows[-1].max_displacement:.6f}")
    return rows


@dataclass
class AleCycleReport:
    lagrangian_steps: int
    remesh_steps: list[int]
    final_mesh: Mesh
    final_min_det: float
    breakdown_step: int | None = None

    @property
    def remesh_count(self) -> int:
        return len(self.remesh_steps)


def run_ale_cycle(mesh0: Mesh, velocity, dt: float, steps: int, admissible: AdmissibleSpec,
                  policy: str = "trigger", period: int = 50, fraction: float = 0.5,
                  params: SolverParams | None = None, smoothing_passes: int = 1) -> AleCycleReport:
    """
    Synthetic ALE loop: nodes move with `velocity` for `steps` Lagrangian
    steps; a remesh (optimization with mu2, ideal shape targets and xi1
    limiting at `fraction` of the motion since the previous remesh) happens
    when the admissible-Jacobian trigger fires or every `period` steps.
    Stops early if the Lagrangian mesh inverts.
    """
    if policy not in ("trigger", "period"):
        raise ValueError(f"policy must be 'trigger' or 'period', got {policy!r}")
    if dt <= 0 or steps < 1:
        raise ValueError("dt must be > 0 and steps >= 1")
    quadrature = default_quadrature(mesh0)
    params = params or SolverParams(max_iterations=30, gradient_tolerance=1e-6)
    ideal = ideal_uniform_targets(mesh0, quadrature, with_size=False)
    mesh = mesh0
    last_remesh = mesh0
    remeshes: list[int] = []
    breakdown = None

    for step in range(1, steps + 1):
        mesh = mesh.with_coords(mesh.node_coords + dt * velocity(mesh.node_coords))
        if policy == "trigger":
            due = check_trigger(mesh, ideal, admissible, quadrature).fires
        else:
            due = step % period == 0
        if min_det_jacobian(mesh, quadrature) <= 0:
            breakdown = step
            logger.warning(f"ALE cycle: Lagrangian mesh inverted at step {step}")
            break
        if not due:
            continue
        motion = np.linalg.norm(mesh.node_coords - last_remesh.node_coords, axis=1)
        floor = max(1e-3 * float(motion.max()), 1e-12)
        delta = limiting_distance_from_motion(last_remesh, mesh, fraction, smoothing_passes, floor=floor)
        config = ObjectiveConfig([MetricTerm(MetricId.SHAPE2)], XiKind.QUADRATIC, delta=delta)
        try:
            mesh, report = optimize(mesh, StaticTargets(ideal), config, params)
        except InfeasibleMeshError as exc:
            breakdown = step
            logger.warning(f"ALE cycle: remesh failed at step {step}: {exc}")
            break
        remeshes.append(step)
        last_remesh = mesh
        logger.info(f"ALE cycle: remesh at step {step}, {report.iterations} iteration(s), "
                    f"F {report.initial.total:.4f} -> {report.final.total:.4f}")

    return AleCycleReport(lagrangian_steps=step, remesh_steps=remeshes, final_mesh=mesh,
                          final_min_det=min_det_jacobian(mesh, quadrature), breakdown_step=breakdown)
