"""
mesh_io.py -- Text formats for meshes, fields and run configs; VTK export; run reports.

Mesh file (`homesh 1`):
    homesh 1
    dim D
    degree K
    elements E
    <E lines of (K+1)^D zero-based node indices, lexicographic, x fastest>
    nodes N
    <N lines of D coordinates, shortest round-trip decimal>

Field file (`hofield 1`):
    hofield 1
    nodes N
    <N lines, one value each>

Run config: flat `key = value` lines, `#` comments, see CONFIG_KEYS.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import meshio
import numpy as np

from mesh_core import Mesh, tensor_multi_index
from metrics import MetricId, metric_from_name
from objective import MetricTerm, ObjectiveConfig, XiKind
from solver import GradientMode, SolverMode, SolverParams, TargetUpdate
from targets_fields import TARGET_KINDS, DiscreteField
from trigger import AdmissibleSpec, admissible_from_diagonal

logger = logging.getLogger(__name__)

MESH_MAGIC = "homesh 1"
FIELD_MAGIC = "hofield 1"


class MeshFormatError(ValueError):
    """Malformed mesh or field file; carries the path and 1-based line number."""

    def __init__(self, path, line: int | None, problem: str):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {problem}")


class ConfigError(ValueError):
    """Bad run-config entry; carries the offending key (if known)."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        super().__init__(message)


# ---------------------------------------------------------------------------
# Number formatting
# ---------------------------------------------------------------------------
def _fmt(value: float) -> str:
    # repr of a Python float is the shortest string that round-trips
    return repr(float(value))


# ---------------------------------------------------------------------------
# Mesh files
# ---------------------------------------------------------------------------
def write_mesh(mesh: Mesh, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [MESH_MAGIC, f"dim {mesh.dim}", f"degree {mesh.degree}", f"elements {mesh.n_elements}"]
    lines.extend(" ".join(str(int(i)) for i in row) for row in mesh.elements)
    lines.append(f"nodes {mesh.n_nodes}")
    lines.extend(" ".join(_fmt(c) for c in row) for row in mesh.node_coords)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class _LineReader:
    def __init__(self, path):
        self.path = Path(path)
        try:
            text = self.path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise MeshFormatError(self.path, None, f"not a text file ({exc})") from None
        self.lines = text.splitlines()
        while self.lines and not self.lines[-1].strip():
            self.lines.pop()
        self.pos = 0

    def error(self, problem: str, line: int | None = None) -> MeshFormatError:
        return MeshFormatError(self.path, line if line is not None else self.pos, problem)

    def next(self, expected: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.lines):
            raise MeshFormatError(self.path, len(self.lines) + 1, f"unexpected end of file, expected {expected}")
        self.pos += 1
        return self.pos, self.lines[self.pos - 1].split()

    def header(self, keyword: str) -> int:
        lineno, tokens = self.next(f"section '{keyword}'")
        if len(tokens) != 2 or tokens[0] != keyword:
            raise self.error(f"expected section '{keyword} <count>', got {' '.join(tokens)!r}", lineno)
        try:
            value = int(tokens[1])
        except ValueError:
            raise self.error(f"'{keyword}' needs an integer, got {tokens[1]!r}", lineno) from None
        if value < 0:
            raise self.error(f"'{keyword}' must be >= 0, got {value}", lineno)
        return value

    def magic(self, magic: str):
        lineno, tokens = self.next(f"header '{magic}'")
        if " ".join(tokens) != magic:
            raise self.error(f"expected header '{magic}', got {' '.join(tokens)!r}", lineno)

    def rows(self, count: int, width: int, kind, section: str) -> np.ndarray:
        out = np.empty((count, width), dtype=kind)
        for r in range(count):
            lineno, tokens = self.next(f"{count} lines in section '{section}'")
            if len(tokens) != width:
                raise self.error(f"expected {width} values, got {len(tokens)}", lineno)
            try:
                out[r] = [kind(t) for t in tokens]
            except ValueError:
                raise self.error(f"non-numeric value in {' '.join(tokens)!r}", lineno) from None
        return out

    def finish(self):
        if self.pos < len(self.lines):
            raise self.error("unexpected trailing content", self.pos + 1)


def read_mesh(path) -> Mesh:
    reader = _LineReader(path)
    reader.magic(MESH_MAGIC)
    dim = reader.header("dim")
    degree = reader.header("degree")
    if dim not in (2, 3):
        raise reader.error(f"dim must be 2 or 3, got {dim}", 2)
    if degree < 1:
        raise reader.error(f"degree must be >= 1, got {degree}", 3)
    n_elements = reader.header("elements")
    first_element_line = reader.pos + 1
    elements = reader.rows(n_elements, (degree + 1) ** dim, int, "elements")
    n_nodes = reader.header("nodes")
    coords = reader.rows(n_nodes, dim, float, "nodes")
    reader.finish()

    if elements.size:
        bad = np.argwhere((elements < 0) | (elements >= n_nodes))
        if bad.size:
            r = int(bad[0][0])
            raise reader.error(f"node index {elements[r, bad[0][1]]} out of range [0, {n_nodes})", first_element_line + r)
    try:
        return Mesh(dim=dim, degree=degree, node_coords=coords, elements=elements)
    except ValueError as exc:
        raise MeshFormatError(path, None, str(exc)) from None


# ---------------------------------------------------------------------------
# Field files
# ---------------------------------------------------------------------------
def write_field(field_: DiscreteField, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [FIELD_MAGIC, f"nodes {field_.nodal_values.shape[0]}"]
    lines.extend(_fmt(v) for v in field_.nodal_values)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_field(path, mesh: Mesh) -> DiscreteField:
    reader = _LineReader(path)
    reader.magic(FIELD_MAGIC)
    count = reader.header("nodes")
    if count != mesh.n_nodes:
        raise reader.error(f"field has {count} nodes but the mesh has {mesh.n_nodes}")
    values = reader.rows(count, 1, float, "nodes")[:, 0]
    reader.finish()
    return DiscreteField(mesh, values)


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------
CONFIG_KEYS = (
    "metric", "weights", "xi", "delta", "target", "alpha", "quad_points",
    "solver.max_iters", "solver.grad_tol", "solver.mode", "solver.target_update",
    "solver.linear_tol", "solver.gradient_mode", "trigger.S", "trigger.metric",
)


@dataclass
class RunConfig:
    metrics: list = field(default_factory=lambda: [MetricId.SHAPE2])
    weights: list = field(default_factory=list)        # floats or Paths to field files
    xi: XiKind = XiKind.NONE
    delta: float | Path = 1.0
    target: str = "ideal"
    alpha: float = 10.0
    quad_points: int | None = None
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    mode: SolverMode = SolverMode.NEWTON_KRYLOV
    target_update: TargetUpdate = TargetUpdate.LAGGED
    linear_tolerance: float | None = None
    gradient_mode: GradientMode = GradientMode.ANALYTIC
    trigger_S: list | None = None
    trigger_metric: MetricId | None = None

    def objective_config(self, mesh: Mesh) -> ObjectiveConfig:
        weights = self.weights or [1.0] * len(self.metrics)
        if len(weights) != len(self.metrics):
            raise ConfigError(f"weights has {len(weights)} entries for {len(self.metrics)} metrics", key="weights")
        terms = [MetricTerm(m, read_field(w, mesh) if isinstance(w, Path) else w)
                 for m, w in zip(self.metrics, weights)]
        delta = read_field(self.delta, mesh) if isinstance(self.delta, Path) else self.delta
        return ObjectiveConfig(terms, self.xi, delta, self.quad_points)

    def solver_params(self) -> SolverParams:
        return SolverParams(max_iterations=self.max_iterations, gradient_tolerance=self.gradient_tolerance,
                            mode=self.mode, target_update=self.target_update,
                            linear_tolerance=self.linear_tolerance, gradient_mode=self.gradient_mode)

    def admissible(self) -> AdmissibleSpec | None:
        if self.trigger_S is None:
            return None
        return admissible_from_diagonal(self.trigger_S, self.trigger_metric or self.metrics[0])

    def as_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, Path):
                out[key] = f"@{value}"
            elif hasattr(value, "value"):
                out[key] = value.value
        out["metrics"] = [m.value for m in self.metrics]
        out["weights"] = [f"@{w}" if isinstance(w, Path) else w for w in self.weights]
        return out


def _float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", key=key) from None


def _int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", key=key) from None


def _choice(key, text, enum):
    try:
        return enum(text)
    except ValueError:
        valid = ", ".join(e.value for e in enum)
        raise ConfigError(f"{key}: {text!r} is not one of {valid}", key=key) from None


def _file_ref(text: str, base: Path) -> Path:
    ref = Path(text[1:].strip())
    return ref if ref.is_absolute() else base / ref


def _apply_config_key(cfg: RunConfig, key: str, value: str, base: Path):
    if key == "metric":
        try:
            cfg.metrics = [metric_from_name(v) for v in value.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"metric: {exc}", key=key) from None
        if not cfg.metrics:
            raise ConfigError("metric: at least one metric is required", key=key)
    elif key == "weights":
        cfg.weights = [_file_ref(v.strip(), base) if v.strip().startswith("@") else _float(key, v)
                       for v in value.split(",")]
    elif key == "xi":
        cfg.xi = _choice(key, value, XiKind)
    elif key == "delta":
        cfg.delta = _file_ref(value, base) if value.startswith("@") else _float(key, value)
    elif key == "target":
        if value not in TARGET_KINDS:
            raise ConfigError(f"target: {value!r} is not one of {', '.join(TARGET_KINDS)}", key=key)
        cfg.target = value
    elif key == "alpha":
        cfg.alpha = _float(key, value)
    elif key == "quad_points":
        cfg.quad_points = _int(key, value)
    elif key == "solver.max_iters":
        cfg.max_iterations = _int(key, value)
    elif key == "solver.grad_tol":
        cfg.gradient_tolerance = _float(key, value)
    elif key == "solver.mode":
        cfg.mode = _choice(key, value, SolverMode)
    elif key == "solver.target_update":
        cfg.target_update = _choice(key, value, TargetUpdate)
    elif key == "solver.linear_tol":
        cfg.linear_tolerance = _float(key, value) if value else None
    elif key == "solver.gradient_mode":
        cfg.gradient_mode = _choice(key, value, GradientMode)
    elif key == "trigger.S":
        cfg.trigger_S = [_float(key, v) for v in value.split(",")]
        if len(cfg.trigger_S) not in (2, 3) or min(cfg.trigger_S) <= 0:
            raise ConfigError("trigger.S: expected 2 or 3 positive diagonal entries", key=key)
    elif key == "trigger.metric":
        try:
            cfg.trigger_metric = metric_from_name(value)
        except ValueError as exc:
            raise ConfigError(f"trigger.metric: {exc}", key=key) from None
    else:
        raise ConfigError(f"unknown config key {key!r}", key=key)


def parse_config(text: str, base: Path | None = None) -> RunConfig:
    base = base or Path(".")
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key=key, line=lineno)
        seen.add(key)
        _apply_config_key(cfg, key, value, base)
    return cfg


def read_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def write_config(config: RunConfig, path) -> Path:
    """Write a RunConfig back as `key = value` text; file references stay relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def ref(value):
        if isinstance(value, Path):
            try:
                return "@" + str(value.relative_to(path.parent))
            except ValueError:
                return "@" + str(value)
        return _fmt(value)

    lines = [
        f"metric = {','.join(m.value for m in config.metrics)}",
        f"xi = {config.xi.value}",
        f"delta = {ref(config.delta)}",
        f"target = {config.target}",
        f"alpha = {_fmt(config.alpha)}",
        f"solver.max_iters = {config.max_iterations}",
        f"solver.grad_tol = {_fmt(config.gradient_tolerance)}",
        f"solver.mode = {config.mode.value}",
        f"solver.target_update = {config.target_update.value}",
        f"solver.gradient_mode = {config.gradient_mode.value}",
    ]
    if config.weights:
        lines.append(f"weights = {','.join(ref(w) for w in config.weights)}")
    if config.quad_points is not None:
        lines.append(f"quad_points = {config.quad_points}")
    if config.linear_tolerance is not None:
        lines.append(f"solver.linear_tol = {_fmt(config.linear_tolerance)}")
    if config.trigger_S is not None:
        lines.append(f"trigger.S = {','.join(_fmt(v) for v in config.trigger_S)}")
    if config.trigger_metric is not None:
        lines.append(f"trigger.metric = {config.trigger_metric.value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# VTK export
# ---------------------------------------------------------------------------
_VTK_CORNERS_2D = ((0, 0), (1, 0), (1, 1), (0, 1))
_VTK_CORNERS_3D = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                   (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))


def _sub_cells(mesh: Mesh) -> np.ndarray:
    """(E * k^d, 2^d) linear sub-cells on each element's node lattice, VTK corner order."""
    k, d = mesh.degree, mesh.dim
    strides = (k + 1) ** np.arange(d)
    corners = np.array(_VTK_CORNERS_2D if d == 2 else _VTK_CORNERS_3D, dtype=np.int64)
    origins = tensor_multi_index(k, d)
    local = ((origins[:, None, :] + corners[None, :, :]) * strides).sum(axis=2)
    return mesh.elements[:, local].reshape(-1, corners.shape[0])


def export_vtk(mesh: Mesh, fields: dict, path) -> Path:
    """
    Legacy ASCII VTK: every element split into k^d quads/hexes on its own
    node lattice.  Points are the mesh nodes (padded to 3D) in node order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = np.zeros((mesh.n_nodes, 3))
    points[:, :mesh.dim] = mesh.node_coords
    point_data = {}
    for name, values in (fields or {}).items():
        data = values.nodal_values if isinstance(values, DiscreteField) else np.asarray(values, dtype=float)
        if data.shape[0] != mesh.n_nodes:
            raise ValueError(f"field {name!r} has {data.shape[0]} values, mesh has {mesh.n_nodes} nodes")
        point_data[name] = np.asarray(data, dtype=float)
    cell_type = "quad" if mesh.dim == 2 else "hexahedron"
    out = meshio.Mesh(points, [(cell_type, _sub_cells(mesh))], point_data=point_data)
    meshio.write(str(path), out, file_format="vtk", binary=False)
    logger.debug(f"wrote {path} ({mesh.n_elements * mesh.degree ** mesh.dim} cells)")
    return path


# ---------------------------------------------------------------------------
# Run reports
# ---------------------------------------------------------------------------
@dataclass
class RunReport:
    config: dict
    solver: dict
    initial: dict
    final: dict
    trigger: dict | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        missing = {"config", "solver", "initial", "final"} - set(data)
        if missing:
            raise ValueError(f"report is missing keys: {', '.join(sorted(missing))}")
        return cls(config=data["config"], solver=data["solver"], initial=data["initial"],
                   final=data["final"], trigger=data.get("trigger"), wall_time_s=float(data.get("wall_time_s", 0.0)))


def write_report(report: RunReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    return path


def read_report(path) -> RunReport:
    return RunReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
