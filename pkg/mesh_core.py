"""
mesh_core.py -- High-order quad/hex meshes: basis, quadrature, Jacobians, refinement.

Conventions (fixed for the whole code base):
  - reference element is the unit cube [0,1]^d
  - interpolation nodes are Gauss-Lobatto points; element nodes are stored in
    lexicographic tensor order with the FIRST coordinate running fastest,
    so for degree 1 in 2D the corners are (0,0), (1,0), (0,1), (1,1)
  - quadrature is tensor Gauss-Legendre on [0,1]^d, weights summing to 1

Usage:
    from mesh_core import structured_mesh, gauss_legendre_rule, min_det_jacobian
    mesh = structured_mesh(8, degree=2, dim=2)
    quad = gauss_legendre_rule(mesh.degree + 2, mesh.dim)
    print(min_det_jacobian(mesh, quad))
"""

import copy
import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

_LCG_MULTIPLIER = 6364136223846793005
_LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


class InfeasibleMeshError(RuntimeError):
    """A mesh (or trial mesh) has a non-positive Jacobian determinant somewhere."""

    def __init__(self, message: str, element: int | None = None,
                 point: int | None = None, value: float | None = None):
        super().__init__(message)
        self.element = element
        self.point = point
        self.value = value


def _check_dim_degree(degree: int, dim: int):
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if int(degree) != degree or degree < 1:
        raise ValueError(f"degree must be an integer >= 1, got {degree}")


# ---------------------------------------------------------------------------
# 1D building blocks
# ---------------------------------------------------------------------------
@lru_cache(maxsize=None)
def _gauss_lobatto_tuple(degree: int) -> tuple:
    if degree == 1:
        return (0.0, 1.0)
    interior = np.polynomial.legendre.Legendre.basis(degree).deriv().roots().real
    nodes = np.concatenate(([-1.0], np.sort(interior), [1.0]))
    nodes = 0.5 * (nodes + 1.0)
    # symmetrize so the midpoint (even degree) is exactly 0.5
    nodes = 0.5 * (nodes + (1.0 - nodes[::-1]))
    nodes[0], nodes[-1] = 0.0, 1.0
    return tuple(float(v) for v in nodes)


def gauss_lobatto_nodes(degree: int) -> np.ndarray:
    """Gauss-Lobatto interpolation nodes on [0,1], ascending, endpoints included."""
    if int(degree) != degree or degree < 1:
        raise ValueError(f"degree must be an integer >= 1, got {degree}")
    return np.array(_gauss_lobatto_tuple(int(degree)))


def _lagrange_1d(nodes: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the 1D Lagrange basis on `nodes` at points t (M,)."""
    n = len(nodes)
    diff = t[:, None] - nodes[None, :]
    vals = np.empty((t.shape[0], n))
    ders = np.zeros((t.shape[0], n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        denom = np.prod(nodes[i] - nodes[others])
        vals[:, i] = np.prod(diff[:, others], axis=1) / denom
        for m in others:
            rest = [j for j in others if j != m]
            ders[:, i] += np.prod(diff[:, rest], axis=1) / denom
    return vals, ders


@lru_cache(maxsize=None)
def _tensor_multi_index_tuple(n: int, dim: int) -> tuple:
    # itertools.product runs the LAST slot fastest; reversing puts x first
    return tuple(p[::-1] for p in itertools.product(range(n), repeat=dim))


def tensor_multi_index(n: int, dim: int) -> np.ndarray:
    """(n^dim, dim) per-axis indices of a tensor lattice, first axis fastest."""
    return np.array(_tensor_multi_index_tuple(n, dim), dtype=np.int64)


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------
def shape_functions_batch(degree: int, dim: int, ref_points) -> tuple[np.ndarray, np.ndarray]:
    """
    Tensor-product Lagrange basis at many reference points.

    Returns values (M, Nw) and reference gradients (M, Nw, dim).
    """
    _check_dim_degree(degree, dim)
    pts = np.atleast_2d(np.asarray(ref_points, dtype=float))
    if pts.shape[1] != dim:
        raise ValueError(f"reference points must have {dim} coordinates, got {pts.shape[1]}")
    nodes = gauss_lobatto_nodes(degree)
    multi = tensor_multi_index(degree + 1, dim)
    per_axis = [_lagrange_1d(nodes, pts[:, r]) for r in range(dim)]

    factors = np.stack([per_axis[r][0][:, multi[:, r]] for r in range(dim)])   # (dim, M, Nw)
    dfactors = np.stack([per_axis[r][1][:, multi[:, r]] for r in range(dim)])
    values = np.prod(factors, axis=0)
    grads = np.empty(values.shape + (dim,))
    for r in range(dim):
        g = dfactors[r].copy()
        for s in range(dim):
            if s != r:
                g *= factors[s]
        grads[:, :, r] = g
    return values, grads


def shape_functions(degree: int, dim: int, ref_point) -> tuple[np.ndarray, np.ndarray]:
    """Basis values (Nw,) and reference gradients (Nw, dim) at one reference point."""
    values, grads = shape_functions_batch(degree, dim, np.asarray(ref_point, dtype=float)[None, :])
    return values[0], grads[0]


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor Gauss-Legendre rule on [0,1]^d; weights sum to 1."""
    points: np.ndarray       # (Q, d)
    weights: np.ndarray      # (Q,)
    points_per_dim: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@lru_cache(maxsize=None)
def _gauss_legendre_cached(points_per_dim: int, dim: int) -> QuadratureRule:
    x, w = np.polynomial.legendre.leggauss(points_per_dim)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    multi = tensor_multi_index(points_per_dim, dim)
    points = x[multi]
    weights = np.prod(w[multi], axis=1)
    points.flags.writeable = False
    weights.flags.writeable = False
    return QuadratureRule(points=points, weights=weights, points_per_dim=points_per_dim)


def gauss_legendre_rule(points_per_dim: int, dim: int) -> QuadratureRule:
    """Exact for tensor polynomials of degree <= 2*points_per_dim - 1 per axis."""
    if int(points_per_dim) != points_per_dim or points_per_dim < 1:
        raise ValueError(f"points_per_dim must be an integer >= 1, got {points_per_dim}")
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    return _gauss_legendre_cached(int(points_per_dim), int(dim))


def default_quadrature(mesh: "Mesh") -> QuadratureRule:
    return gauss_legendre_rule(mesh.degree + 2, mesh.dim)


@dataclass(frozen=True, eq=False)
class ReferenceTable:
    """Basis tabulated at the points of a quadrature rule."""
    values: np.ndarray      # (Q, Nw)
    gradients: np.ndarray   # (Q, Nw, d)
    weights: np.ndarray     # (Q,)


@lru_cache(maxsize=64)
def _reference_table_cached(degree: int, dim: int, points_per_dim: int) -> ReferenceTable:
    rule = gauss_legendre_rule(points_per_dim, dim)
    values, grads = shape_functions_batch(degree, dim, rule.points)
    values.flags.writeable = False
    grads.flags.writeable = False
    return ReferenceTable(values=values, gradients=grads, weights=rule.weights)


def reference_table(degree: int, dim: int, quadrature: QuadratureRule) -> ReferenceTable:
    return _reference_table_cached(degree, dim, quadrature.points_per_dim)


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------
def _local_face_nodes(degree: int, dim: int) -> np.ndarray:
    """(2*dim, (k+1)^(dim-1)) local node indices of each reference face."""
    multi = tensor_multi_index(degree + 1, dim)
    faces = []
    for r in range(dim):
        for side in (0, degree):
            faces.append(np.flatnonzero(multi[:, r] == side))
    return np.array(faces, dtype=np.int64)


def _local_face_corners(degree: int, dim: int) -> np.ndarray:
    multi = tensor_multi_index(degree + 1, dim)
    is_corner = np.all((multi == 0) | (multi == degree), axis=1)
    faces = []
    for r in range(dim):
        for side in (0, degree):
            faces.append(np.flatnonzero((multi[:, r] == side) & is_corner))
    return np.array(faces, dtype=np.int64)


def _find_boundary_nodes(elements: np.ndarray, degree: int, dim: int) -> np.ndarray:
    corners = _local_face_corners(degree, dim)
    face_nodes = _local_face_nodes(degree, dim)
    keys = np.sort(elements[:, corners], axis=2).reshape(-1, corners.shape[1])
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    lonely = (counts[inverse] < 2).reshape(elements.shape[0], corners.shape[0])
    nodes = elements[:, face_nodes][lonely]
    return np.unique(nodes)


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Continuous high-order quad (2D) or hex (3D) mesh.

    node_coords is the optimization variable; everything else is topology.
    boundary_nodes is derived from the connectivity (faces shared by fewer
    than two elements) and is never taken as input.
    """
    dim: int
    degree: int
    node_coords: np.ndarray                 # (N, d)
    elements: np.ndarray                    # (E, (k+1)^d)
    boundary_nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        _check_dim_degree(self.degree, self.dim)
        coords = np.array(self.node_coords, dtype=float)
        elems = np.array(self.elements, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != self.dim:
            raise ValueError(f"node_coords must have shape (N, {self.dim}), got {coords.shape}")
        nw = (self.degree + 1) ** self.dim
        if elems.ndim != 2 or elems.shape[1] != nw:
            raise ValueError(f"elements must have {nw} node indices each, got shape {elems.shape}")
        n_nodes = coords.shape[0]
        if elems.size and (elems.min() < 0 or elems.max() >= n_nodes):
            raise ValueError(f"element node index out of range [0, {n_nodes})")
        srt = np.sort(elems, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            bad = int(np.flatnonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))[0])
            raise ValueError(f"element {bad} repeats a node index")
        referenced = np.zeros(n_nodes, dtype=bool)
        referenced[elems.ravel()] = True
        if not referenced.all():
            raise ValueError(f"node {int(np.flatnonzero(~referenced)[0])} is not used by any element")
        coords.flags.writeable = False
        elems.flags.writeable = False
        boundary = _find_boundary_nodes(elems, self.degree, self.dim)
        boundary.flags.writeable = False
        object.__setattr__(self, "node_coords", coords)
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "boundary_nodes", boundary)

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def nodes_per_element(self) -> int:
        return self.elements.shape[1]

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    def same_topology(self, other: "Mesh") -> bool:
        return (self.dim == other.dim and self.degree == other.degree
                and self.elements.shape == other.elements.shape
                and (self.elements is other.elements or np.array_equal(self.elements, other.elements)))

    def with_coords(self, coords) -> "Mesh":
        """Node-moved copy sharing topology and boundary."""
        coords = np.array(coords, dtype=float).reshape(self.n_nodes, self.dim)
        coords.flags.writeable = False
        moved = copy.copy(self)
        object.__setattr__(moved, "node_coords", coords)
        return moved


def structured_mesh(n: int, degree: int = 1, dim: int = 2, lower: float = 0.0, upper: float = 1.0) -> Mesh:
    """n^dim element box mesh with Gauss-Lobatto nodes inside each element."""
    _check_dim_degree(degree, dim)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = degree
    m = n * k + 1
    t = gauss_lobatto_nodes(k)
    coords_1d = np.empty(m)
    for e in range(n):
        coords_1d[e * k:(e + 1) * k + 1] = (e + t) / n
    coords_1d[-1] = 1.0
    coords_1d = lower + (upper - lower) * coords_1d

    strides = m ** np.arange(dim)
    global_multi = tensor_multi_index(m, dim)
    coords = coords_1d[global_multi]

    elem_multi = tensor_multi_index(n, dim)
    local_multi = tensor_multi_index(k + 1, dim)
    lattice = elem_multi[:, None, :] * k + local_multi[None, :, :]
    elements = (lattice * strides).sum(axis=2)
    return Mesh(dim=dim, degree=degree, node_coords=coords, elements=elements)


# ---------------------------------------------------------------------------
# Jacobians and geometric quantities
# ---------------------------------------------------------------------------
def element_map(mesh: Mesh, elem_index: int, ref_point) -> np.ndarray:
    values, _ = shape_functions(mesh.degree, mesh.dim, ref_point)
    return values @ mesh.node_coords[mesh.elements[elem_index]]


def element_jacobian(mesh: Mesh, elem_index: int, ref_point) -> np.ndarray:
    """A = sum_i x_{E,i} (grad w_i)^T, a d x d matrix."""
    if not 0 <= elem_index < mesh.n_elements:
        raise ValueError(f"element index {elem_index} out of range")
    _, grads = shape_functions(mesh.degree, mesh.dim, ref_point)
    x_e = mesh.node_coords[mesh.elements[elem_index]]
    return x_e.T @ grads


def jacobians(mesh: Mesh, quadrature: QuadratureRule, coords=None) -> np.ndarray:
    """Jacobians at every element quadrature point, shape (E, Q, d, d)."""
    table = reference_table(mesh.degree, mesh.dim, quadrature)
    x = mesh.node_coords if coords is None else np.asarray(coords, dtype=float).reshape(mesh.n_nodes, mesh.dim)
    return np.einsum("eia,qir->eqar", x[mesh.elements], table.gradients)


def physical_quadrature_points(mesh: Mesh, quadrature: QuadratureRule, coords=None) -> np.ndarray:
    table = reference_table(mesh.degree, mesh.dim, quadrature)
    x = mesh.node_coords if coords is None else np.asarray(coords, dtype=float).reshape(mesh.n_nodes, mesh.dim)
    return np.einsum("qi,eia->eqa", table.values, x[mesh.elements])


def min_det_jacobian(mesh: Mesh, quadrature: QuadratureRule) -> float:
    return float(np.linalg.det(jacobians(mesh, quadrature)).min())


def element_volumes(mesh: Mesh, quadrature: QuadratureRule) -> np.ndarray:
    det = np.linalg.det(jacobians(mesh, quadrature))
    return det @ quadrature.weights


def domain_volume(mesh: Mesh, quadrature: QuadratureRule) -> float:
    return float(element_volumes(mesh, quadrature).sum())


def element_centroids(mesh: Mesh) -> np.ndarray:
    values, _ = shape_functions(mesh.degree, mesh.dim, np.full(mesh.dim, 0.5))
    return np.einsum("i,eia->ea", values, mesh.node_coords[mesh.elements])


def bounding_box_diameter(mesh: Mesh) -> float:
    return float(np.linalg.norm(mesh.node_coords.max(axis=0) - mesh.node_coords.min(axis=0)))


def scaled(mesh: Mesh, factor: float) -> Mesh:
    return mesh.with_coords(mesh.node_coords * factor)


# ---------------------------------------------------------------------------
# Node graph helpers
# ---------------------------------------------------------------------------
@lru_cache(maxsize=None)
def _local_lattice_edges(degree: int, dim: int) -> tuple:
    multi = tensor_multi_index(degree + 1, dim)
    strides = (degree + 1) ** np.arange(dim)
    pairs = []
    for r in range(dim):
        lower = np.flatnonzero(multi[:, r] < degree)
        pairs.extend((int(i), int(i + strides[r])) for i in lower)
    return tuple(pairs)


def lattice_edges(mesh: Mesh) -> np.ndarray:
    """Unique (i, j) node pairs joined by an edge of an element's tensor lattice."""
    local = np.array(_local_lattice_edges(mesh.degree, mesh.dim), dtype=np.int64)
    pairs = mesh.elements[:, local].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def local_edge_lengths(mesh: Mesh) -> np.ndarray:
    """Shortest lattice edge incident to each node."""
    edges = lattice_edges(mesh)
    lengths = np.linalg.norm(mesh.node_coords[edges[:, 0]] - mesh.node_coords[edges[:, 1]], axis=1)
    h = np.full(mesh.n_nodes, np.inf)
    np.minimum.at(h, edges[:, 0], lengths)
    np.minimum.at(h, edges[:, 1], lengths)
    return h


def node_elements(mesh: Mesh) -> np.ndarray:
    """(N, max valence) incident element indices, padded with -1, ascending."""
    flat_nodes = mesh.elements.ravel()
    flat_elems = np.repeat(np.arange(mesh.n_elements), mesh.nodes_per_element)
    order = np.lexsort((flat_elems, flat_nodes))
    flat_nodes, flat_elems = flat_nodes[order], flat_elems[order]
    keep = np.ones(flat_nodes.size, dtype=bool)
    keep[1:] = (flat_nodes[1:] != flat_nodes[:-1]) | (flat_elems[1:] != flat_elems[:-1])
    flat_nodes, flat_elems = flat_nodes[keep], flat_elems[keep]
    counts = np.bincount(flat_nodes, minlength=mesh.n_nodes)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slot = np.arange(flat_nodes.size) - starts[flat_nodes]
    table = np.full((mesh.n_nodes, counts.max()), -1, dtype=np.int64)
    table[flat_nodes, slot] = flat_elems
    return table


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------
def uniform_refine(mesh: Mesh) -> Mesh:
    """
    Split every element into 2^d children of the same degree.

    Child nodes are images of the parent map at the child Gauss-Lobatto
    nodes, so the refined mesh covers exactly the same point set.
    """
    k, d = mesh.degree, mesh.dim
    t = gauss_lobatto_nodes(k)
    r1d = np.concatenate((0.5 * t, 0.5 * (1.0 + t[1:])))       # 2k+1 values
    lattice_multi = tensor_multi_index(2 * k + 1, d)
    lattice_ref = r1d[lattice_multi]
    values, _ = shape_functions_batch(k, d, lattice_ref)
    points = np.einsum("pi,eia->epa", values, mesh.node_coords[mesh.elements])
    n_lattice = lattice_ref.shape[0]

    lattice_strides = (2 * k + 1) ** np.arange(d)
    child_offsets = tensor_multi_index(2, d)
    local_multi = tensor_multi_index(k + 1, d)
    child_lattice = ((child_offsets[:, None, :] * k + local_multi[None, :, :]) * lattice_strides).sum(axis=2)

    flat_points = points.reshape(-1, d)
    h_min = float(local_edge_lengths(mesh).min())
    tree = cKDTree(flat_points)
    pairs = tree.query_pairs(r=1e-6 * h_min, output_type="ndarray")
    labels = np.arange(flat_points.shape[0])
    if pairs.size:
        np.minimum.at(labels, pairs[:, 1], pairs[:, 0])
        np.minimum.at(labels, pairs[:, 0], pairs[:, 1])
    unique_labels, inverse = np.unique(labels, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    coords = flat_points[unique_labels]

    parent_offset = (np.arange(mesh.n_elements) * n_lattice)[:, None, None]
    elements = inverse[(parent_offset + child_lattice[None, :, :]).reshape(-1, (k + 1) ** d)]
    refined = Mesh(dim=d, degree=k, node_coords=coords, elements=elements)
    logger.debug(f"uniform_refine: {mesh.n_elements} -> {refined.n_elements} elements, "
                 f"{mesh.n_nodes} -> {refined.n_nodes} nodes")
    return refined


# ---------------------------------------------------------------------------
# Deterministic perturbation
# ---------------------------------------------------------------------------
class Lcg64:
    """
    64-bit linear congruential generator (Knuth MMIX constants).

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2^64;
    each draw returns the top 53 bits scaled to [0, 1).  Identical on
    every platform.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_float(self) -> float:
        self.state = (_LCG_MULTIPLIER * self.state + _LCG_INCREMENT) & _MASK64
        return (self.state >> 11) * (1.0 / (1 << 53))

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        draws = np.array([self.next_float() for _ in range(count)])
        return low + (high - low) * draws


def perturb_interior(mesh: Mesh, amplitude: float, seed: int) -> Mesh:
    """
    Move each interior node by a pseudo-random vector with max-norm at most
    amplitude * (shortest incident lattice edge).  Boundary nodes stay put.
    Inverted elements are allowed; check min_det_jacobian afterwards.
    """
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    coords = np.array(mesh.node_coords)
    if amplitude == 0:
        return mesh.with_coords(coords)
    h = local_edge_lengths(mesh)
    interior = np.flatnonzero(~mesh.boundary_mask)
    rng = Lcg64(seed)
    shifts = rng.uniform(interior.size * mesh.dim, -1.0, 1.0).reshape(interior.size, mesh.dim)
    coords[interior] += amplitude * h[interior, None] * shifts
    return mesh.with_coords(coords)
