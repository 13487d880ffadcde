"""Lagrange finite elements on criss-cross meshes of the unit square.

Provides P1/P2 scalar and vector spaces with periodic identification of
opposite-face degrees of freedom, nodal interpolation, quadrature-point
evaluation (values, gradients, divergence, planar rot), mass/stiffness
assembly, L2 projection of gradient fields, and the problem-adapted norm

    |||(w, u)|||_lam^2 = ||Dw||^2 + 2 lam ||grad u||^2 + lam^2 ||u||^2.

Periodic identification is done through a lattice key: with denominator
d = degree * N every Lagrange node sits at a point (i/d, j/d); nodes whose
integer keys agree modulo d are the same point on the torus and share one
global degree of freedom (in particular the four cell corners collapse to a
single DOF).  The ``zero_mean`` constraint is only recorded on the space;
it is enforced at solve time by scalar Lagrange multipliers.

Spaces are immutable after construction; FeFunction coefficient vectors are
plain arrays.  Vector functions store coefficients in component-major blocks:
``coeffs[c * n_dofs + i]`` is component ``c`` at scalar DOF ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

__all__ = [
    "FunctionSpace",
    "FeFunction",
    "build_space",
    "interpolate",
    "eval_at_qp",
    "triple_norm",
    "l2_project",
    "mass_matrix",
    "stiffness_matrix",
    "gram_triple_matrix",
    "quadrature_rule",
    "export_csv",
]


# ----------------------------------------------------------------------------
# quadrature on the reference triangle (barycentric points, weights sum to 1)

def _perm3(a, b, c):
    return [(a, b, c), (c, a, b), (b, c, a)]


_RULES = {}

_RULES[1] = (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]))

_RULES[2] = (
    np.array(_perm3(2 / 3, 1 / 6, 1 / 6)),
    np.full(3, 1 / 3),
)

_RULES[3] = (
    np.array([[1 / 3, 1 / 3, 1 / 3]] + _perm3(0.6, 0.2, 0.2)),
    np.array([-27 / 48] + [25 / 48] * 3),
)

_a4, _b4 = 0.445948490915965, 0.091576213509771
_RULES[4] = (
    np.array(_perm3(1 - 2 * _a4, _a4, _a4) + _perm3(1 - 2 * _b4, _b4, _b4)),
    np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
)

_a5, _b5 = 0.470142064105115, 0.101286507323456
_RULES[5] = (
    np.array([[1 / 3, 1 / 3, 1 / 3]]
             + _perm3(1 - 2 * _a5, _a5, _a5) + _perm3(1 - 2 * _b5, _b5, _b5)),
    np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3),
)

_a6, _b6 = 0.063089014491502, 0.249286745170910
_c6, _d6 = 0.310352451033785, 0.053145049844816
_RULES[6] = (
    np.array(
        _perm3(1 - 2 * _a6, _a6, _a6)
        + _perm3(1 - 2 * _b6, _b6, _b6)
        + [(_c6, _d6, 1 - _c6 - _d6), (_d6, 1 - _c6 - _d6, _c6),
           (1 - _c6 - _d6, _c6, _d6), (_d6, _c6, 1 - _c6 - _d6),
           (_c6, 1 - _c6 - _d6, _d6), (1 - _c6 - _d6, _d6, _c6)]
    ),
    np.array([0.050844906370207] * 3 + [0.116786275726379] * 3
             + [0.082851075618374] * 6),
)


def quadrature_rule(order: int):
    """Barycentric points and weights of a rule exact to polynomial ``order``.

    Weights sum to 1 (multiply by the element area to integrate).
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    for deg in sorted(_RULES):
        if deg >= order:
            return _RULES[deg]
    raise ValueError(f"no triangle quadrature rule of order {order} available")


# ----------------------------------------------------------------------------
# reference basis

def _local_nodes(degree):
    """Barycentric coordinates of the Lagrange nodes (vertices first)."""
    if degree == 1:
        return np.eye(3)
    if degree == 2:
        return np.array([
            [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
            [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0],
        ])
    raise ValueError(f"unsupported degree {degree}")


def _basis(degree, bary):
    """Values and barycentric derivatives of the local basis.

    Returns (vals (nq, nloc), dlam (nq, nloc, 3)).
    """
    bary = np.asarray(bary, dtype=float)
    nq = bary.shape[0]
    if degree == 1:
        vals = bary.copy()
        dlam = np.broadcast_to(np.eye(3), (nq, 3, 3)).copy()
        return vals, dlam
    if degree == 2:
        vals = np.empty((nq, 6))
        dlam = np.zeros((nq, 6, 3))
        for i in range(3):
            li = bary[:, i]
            vals[:, i] = li * (2 * li - 1)
            dlam[:, i, i] = 4 * li - 1
        # edge bubbles opposite each vertex: 4 * l_j * l_k
        for i, (j, k) in enumerate([(1, 2), (2, 0), (0, 1)]):
            vals[:, 3 + i] = 4 * bary[:, j] * bary[:, k]
            dlam[:, 3 + i, j] = 4 * bary[:, k]
            dlam[:, 3 + i, k] = 4 * bary[:, j]
        return vals, dlam
    raise ValueError(f"unsupported degree {degree}")


# ----------------------------------------------------------------------------
# function spaces

@dataclass(frozen=True)
class FunctionSpace:
    """Lagrange space S^q over a Mesh, scalar or 2-vector valued.

    ``dof_map[e, l]`` is the global scalar DOF of local node ``l`` on element
    ``e`` after periodic identification.  ``n_dofs`` counts scalar DOFs; a
    vector function has ``2 * n_dofs`` coefficients in component-major order.
    """

    mesh: Mesh
    degree: int
    components: int
    constraint: str
    n_dofs: int
    dof_map: np.ndarray = field(repr=False)
    dof_points: np.ndarray = field(repr=False)
    vertex_dofs: np.ndarray = field(repr=False)
    boundary_dofs: np.ndarray = field(repr=False)
    integral_weights: np.ndarray = field(repr=False)

    @property
    def n_coeffs(self) -> int:
        return self.n_dofs * self.components

    def zero_function(self) -> "FeFunction":
        return FeFunction(self, np.zeros(self.n_coeffs))


@dataclass
class FeFunction:
    """Finite element function: a space plus its coefficient vector."""

    space: FunctionSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_coeffs,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} does not match "
                f"space with {self.space.n_coeffs} coefficients"
            )

    def component_coeffs(self, c: int) -> np.ndarray:
        n = self.space.n_dofs
        return self.coeffs[c * n:(c + 1) * n]

    def integral(self) -> np.ndarray:
        """Exact integral over the domain, one value per component."""
        w = self.space.integral_weights
        return np.array([w @ self.component_coeffs(c)
                         for c in range(self.space.components)])

    def copy(self) -> "FeFunction":
        return FeFunction(self.space, self.coeffs.copy())


def build_space(mesh: Mesh, degree: int = 1, components: int = 1,
                constraint: str = "none") -> FunctionSpace:
    """Construct a Lagrange space with the mesh's flavor of identification."""
    if degree not in (1, 2):
        raise ValueError(f"unsupported degree {degree}; only q in {{1, 2}}")
    if components not in (1, 2):
        raise ValueError("components must be 1 or 2")
    if constraint not in ("none", "zero_mean"):
        raise ValueError(f"unknown constraint {constraint!r}")

    denom = degree * mesh.N
    nodes_bary = _local_nodes(degree)          # (nloc, 3)
    p = mesh.vertices[mesh.elements]           # (n_e, 3, 2)
    # physical coordinates of all element-local nodes
    node_xy = np.einsum("li,eid->eld", nodes_bary, p)   # (n_e, nloc, 2)
    keys = np.rint(node_xy * denom).astype(np.int64)
    if not np.allclose(keys / denom, node_xy, atol=1e-12):
        raise AssertionError("Lagrange nodes do not sit on the expected lattice")
    if mesh.flavor == "periodic":
        keys = np.mod(keys, denom)

    flat = keys[:, :, 0] * (denom + 1) + keys[:, :, 1]
    uniq, dof_map_flat = np.unique(flat.ravel(), return_inverse=True)
    dof_map = dof_map_flat.reshape(flat.shape).astype(np.int64)
    n_dofs = uniq.shape[0]

    kx, ky = uniq // (denom + 1), uniq % (denom + 1)
    dof_points = np.column_stack([kx, ky]) / denom

    if mesh.flavor == "dirichlet":
        on_bnd = (kx == 0) | (kx == denom) | (ky == 0) | (ky == denom)
        boundary_dofs = np.nonzero(on_bnd)[0]
    else:
        boundary_dofs = np.empty(0, dtype=np.int64)

    vertex_keys = np.rint(mesh.vertices * denom).astype(np.int64)
    if mesh.flavor == "periodic":
        vertex_keys = np.mod(vertex_keys, denom)
    vflat = vertex_keys[:, 0] * (denom + 1) + vertex_keys[:, 1]
    vertex_dofs = np.searchsorted(uniq, vflat).astype(np.int64)

    bary, w = quadrature_rule(degree)
    vals, _ = _basis(degree, bary)
    local_int = w @ vals                       # (nloc,) reference integrals
    integral_weights = np.zeros(n_dofs)
    np.add.at(integral_weights, dof_map,
              mesh.areas[:, None] * local_int[None, :])

    space = FunctionSpace(
        mesh=mesh, degree=degree, components=components,
        constraint=constraint, n_dofs=n_dofs, dof_map=dof_map,
        dof_points=dof_points, vertex_dofs=vertex_dofs,
        boundary_dofs=boundary_dofs, integral_weights=integral_weights,
    )
    for arr in (dof_map, dof_points, vertex_dofs, boundary_dofs,
                integral_weights):
        arr.setflags(write=False)
    return space


def interpolate(space: FunctionSpace, g) -> FeFunction:
    """Nodal interpolant of the callable ``g``.

    ``g(point)`` must return a scalar (components == 1) or a length-2
    sequence (components == 2); for periodic spaces ``g`` must be Y-periodic
    (the caller's responsibility -- nodes are evaluated at their canonical
    representatives in [0, 1)).
    """
    pts = space.dof_points
    vals = np.array([g(p) for p in pts], dtype=float)
    if space.components == 1:
        if vals.shape != (space.n_dofs,):
            raise ValueError("g must return scalars for a scalar space")
        return FeFunction(space, vals)
    if vals.shape != (space.n_dofs, 2):
        raise ValueError("g must return length-2 vectors for a vector space")
    return FeFunction(space, vals.T.reshape(-1).copy())


@dataclass(frozen=True)
class QpData:
    """Per-element, per-quadrature-point evaluation record."""

    points: np.ndarray        # (n_e, nq, 2) physical coordinates
    weights: np.ndarray       # (n_e, nq) quadrature weights incl. areas
    values: np.ndarray        # scalar: (n_e, nq); vector: (n_e, nq, 2)
    gradients: np.ndarray     # scalar: (n_e, nq, 2); vector: (n_e, nq, 2, 2)
    divergence: np.ndarray | None = None   # vector only: (n_e, nq)
    rot2d: np.ndarray | None = None        # vector only: (n_e, nq)


def _geometry_at(space: FunctionSpace, quad_order: int):
    """Quadrature geometry shared by evaluation and assembly.

    Returns (bary, w, vals (nq, nloc), grad_phys (n_e, nq, nloc, 2)).
    """
    bary, w = quadrature_rule(quad_order)
    vals, dlam = _basis(space.degree, bary)
    grad_phys = np.einsum("qli,eid->eqld", dlam, space.mesh.grad_bary)
    return bary, w, vals, grad_phys


def eval_at_qp(fn: FeFunction, quad_order: int = 4) -> QpData:
    """Evaluate ``fn`` at Gauss points of every element.

    For vector functions, ``gradients[e, q, d, c]`` is the derivative of
    component ``d`` in direction ``c``; divergence and the planar rotation
    rot(w) = d_2 w_1 - d_1 w_2 are included.
    """
    space = fn.space
    mesh = space.mesh
    bary, w, vals, grad_phys = _geometry_at(space, quad_order)
    p = mesh.vertices[mesh.elements]
    points = np.einsum("qi,eid->eqd", bary, p)
    weights = mesh.areas[:, None] * w[None, :]

    if space.components == 1:
        ce = fn.coeffs[space.dof_map]                       # (n_e, nloc)
        values = np.einsum("ql,el->eq", vals, ce)
        gradients = np.einsum("eqld,el->eqd", grad_phys, ce)
        return QpData(points, weights, values, gradients)

    n = space.n_dofs
    ce = np.stack([fn.coeffs[c * n:][space.dof_map] for c in range(2)],
                  axis=-1)                                  # (n_e, nloc, 2)
    values = np.einsum("ql,elc->eqc", vals, ce)
    gradients = np.stack(
        [np.einsum("eqld,el->eqd", grad_phys, ce[..., d]) for d in range(2)],
        axis=2,
    )                                                       # (n_e, nq, d, c)
    divergence = gradients[..., 0, 0] + gradients[..., 1, 1]
    rot2d = gradients[..., 0, 1] - gradients[..., 1, 0]
    return QpData(points, weights, values, gradients, divergence, rot2d)


def triple_norm(w: FeFunction | None, u: FeFunction, lam: float,
                quad_order: int | None = None) -> float:
    """The norm |||(w, u)|||_lam; ``w = None`` is treated as the zero field."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if w is not None and w.space.mesh is not u.space.mesh:
        raise ValueError("w and u must live on the same mesh")
    if quad_order is None:
        quad_order = 2 * u.space.degree
    total = 0.0
    if w is not None:
        dw = eval_at_qp(w, quad_order)
        total += np.sum(dw.weights * np.sum(dw.gradients ** 2, axis=(2, 3)))
    du = eval_at_qp(u, quad_order)
    total += 2.0 * lam * np.sum(du.weights * np.sum(du.gradients ** 2, axis=2))
    total += lam ** 2 * np.sum(du.weights * du.values ** 2)
    return float(np.sqrt(total))


# ----------------------------------------------------------------------------
# matrix assembly

def _scatter(space, local, ncomp_blocks=1):
    """Assemble (n_e, nloc, nloc) local blocks into a CSR matrix."""
    dm = space.dof_map
    rows = np.broadcast_to(dm[:, :, None], local.shape)
    cols = np.broadcast_to(dm[:, None, :], local.shape)
    n = space.n_dofs
    mat = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
                        shape=(n, n)).tocsr()
    if ncomp_blocks == 1:
        return mat
    return sp.block_diag([mat] * ncomp_blocks, format="csr")


def mass_matrix(space: FunctionSpace) -> sp.csr_matrix:
    """Mass matrix; block diagonal over components for vector spaces."""
    bary, w, vals, _ = _geometry_at(space, 2 * space.degree)
    ref = np.einsum("q,qi,qj->ij", w, vals, vals)
    local = space.mesh.areas[:, None, None] * ref[None, :, :]
    return _scatter(space, local, space.components)


def stiffness_matrix(space: FunctionSpace) -> sp.csr_matrix:
    """Stiffness matrix int grad(phi_i) . grad(phi_j), blocked per component."""
    _, w, _, grad_phys = _geometry_at(space, max(1, 2 * (space.degree - 1)))
    local = np.einsum("q,eqid,eqjd->eij", w, grad_phys, grad_phys)
    local *= space.mesh.areas[:, None, None]
    return _scatter(space, local, space.components)


def gram_triple_matrix(space_w: FunctionSpace, space_u: FunctionSpace,
                       lam: float) -> sp.csr_matrix:
    """Gram matrix of the |||.|||_lam inner product on X_h = W_h x U_h.

    Coefficient layout: [w component 0, w component 1, u].
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    kw = stiffness_matrix(
        build_space(space_w.mesh, space_w.degree, 1, "none"))
    ku = stiffness_matrix(
        build_space(space_u.mesh, space_u.degree, 1, "none"))
    mu = mass_matrix(build_space(space_u.mesh, space_u.degree, 1, "none"))
    return sp.block_diag([kw, kw, 2.0 * lam * ku + lam ** 2 * mu],
                         format="csr")


def l2_project(target_space: FunctionSpace, source: FeFunction,
               lumped: bool = False) -> FeFunction:
    """L2-project the gradient of ``source`` onto a vector space.

    Solves int w . v = int grad(source) . v for all basis fields v of
    ``target_space`` over all degrees of freedom (no boundary treatment).
    With ``lumped`` the mass matrix is row-sum lumped, which turns the
    projection into local gradient averaging; on the uniform criss-cross
    mesh this recovers the gradients of quadratics exactly at interior
    nodes, while the consistent solve leaves a mesh-locked sawtooth whose
    elementwise derivative does not vanish under refinement.
    """
    if target_space.components != 2:
        raise ValueError("projection target must be a vector space")
    if target_space.mesh is not source.space.mesh:
        raise ValueError("projection requires spaces over the same mesh")
    order = source.space.degree + target_space.degree
    grad = eval_at_qp(source, order).gradients        # (n_e, nq, 2)
    bary, w, vals, _ = _geometry_at(target_space, order)
    wq = target_space.mesh.areas[:, None] * w[None, :]
    n = target_space.n_dofs
    rhs = np.zeros(2 * n)
    for c in range(2):
        loc = np.einsum("eq,ql->el", wq * grad[..., c], vals)
        np.add.at(rhs, c * n + target_space.dof_map, loc)
    if lumped:
        if target_space.degree != 1:
            raise ValueError("lumped projection requires P1 (zero row sums "
                             "occur for higher-order vertex functions)")
        scalar = build_space(target_space.mesh, 1, 1, "none")
        lump = scalar.integral_weights     # row sums of the mass matrix
        coeffs = np.concatenate([rhs[:n] / lump, rhs[n:] / lump])
    else:
        m_scalar = mass_matrix(
            build_space(target_space.mesh, target_space.degree, 1, "none"))
        lu = spla.splu(m_scalar.tocsc())
        coeffs = np.concatenate([lu.solve(rhs[:n]), lu.solve(rhs[n:])])
    return FeFunction(target_space, coeffs)


def eval_points(fn: FeFunction, points) -> np.ndarray:
    """Evaluate a P1 function at arbitrary points of the unit square.

    Uses the structured criss-cross layout for O(1) element location;
    periodic functions wrap their argument into [0, 1).  Returns (n,) for
    scalar and (n, 2) for vector functions.
    """
    space = fn.space
    if space.degree != 1:
        raise NotImplementedError("point evaluation is implemented for P1")
    mesh = space.mesh
    N = mesh.N
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if mesh.flavor == "periodic":
        pts = np.mod(pts, 1.0)
    i = np.clip(np.floor(pts[:, 0] * N).astype(np.int64), 0, N - 1)
    j = np.clip(np.floor(pts[:, 1] * N).astype(np.int64), 0, N - 1)
    xi = pts[:, 0] * N - i
    et = pts[:, 1] * N - j
    lower = xi >= et
    elem = 2 * (i * N + j) + np.where(lower, 0, 1)
    # local barycentric coordinates in the element's vertex order
    lam = np.where(
        lower[:, None],
        np.column_stack([1.0 - xi, xi - et, et]),
        np.column_stack([1.0 - et, xi, et - xi]),
    )
    dofs = space.dof_map[elem]                       # (n, 3)
    if space.components == 1:
        return np.einsum("nl,nl->n", fn.coeffs[dofs], lam)
    n = space.n_dofs
    return np.stack(
        [np.einsum("nl,nl->n", fn.coeffs[c * n:][dofs], lam)
         for c in range(2)], axis=-1)


def export_csv(fn: FeFunction, path) -> None:
    """Write vertex values as CSV rows (vertex id, x, y, value(s))."""
    space = fn.space
    mesh = space.mesh
    cols = [fn.component_coeffs(c)[space.vertex_dofs]
            for c in range(space.components)]
    header = "vertex,x,y," + ",".join(
        f"value{c}" for c in range(space.components))
    data = np.column_stack(
        [np.arange(mesh.n_vertices), mesh.vertices] + cols)
    fmt = ["%d", "%.17g", "%.17g"] + ["%.17g"] * space.components
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)
