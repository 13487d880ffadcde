"""Structured criss-cross triangulations of the unit square.

Both the periodicity cell Y = (0,1)^2 and the macroscopic domain
Omega = (0,1)^2 are meshed by an N x N grid of squares, each split into two
triangles by the diagonal of positive slope.  The mesh carries an eagerly
computed geometry cache (areas, barycenters, gradients of the barycentric
coordinate functions) because assembly and pointwise Hamiltonian evaluation
dominate runtime.

Meshes come in two flavors:

* ``periodic``  -- used for cell problems; vertices on opposite faces sit at
  matching coordinates so that function spaces can identify them.
* ``dirichlet`` -- used for boundary-value problems on Omega; all vertices on
  the boundary of the square are listed in ``boundary_vertex_ids``.

Meshes are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Mesh", "build_uniform_mesh", "barycenter"]


@dataclass(frozen=True)
class Mesh:
    """Triangulation of the unit square.

    Attributes
    ----------
    N : int
        Number of subdivisions per side; the mesh size is h = sqrt(2)/N.
    vertices : (n_vertices, 2) float array
        Vertex coordinates on the closed square [0,1]^2.
    elements : (n_elements, 3) int array
        Counterclockwise vertex-index triples.
    flavor : str
        Either ``"periodic"`` or ``"dirichlet"``.
    boundary_vertex_ids : int array
        Vertices on the boundary of the square (dirichlet flavor only;
        empty for periodic meshes).
    areas : (n_elements,) float array
        Element areas, each exactly 1/(2 N^2).
    barycenters : (n_elements, 2) float array
        Element barycenters.
    grad_bary : (n_elements, 3, 2) float array
        Gradients of the three barycentric coordinate (P1 hat) functions
        of each element; constant per element.
    """

    N: int
    vertices: np.ndarray
    elements: np.ndarray
    flavor: str
    boundary_vertex_ids: np.ndarray
    areas: np.ndarray = field(repr=False)
    barycenters: np.ndarray = field(repr=False)
    grad_bary: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        """Mesh size: the diameter sqrt(2)/N of every triangle."""
        return np.sqrt(2.0) / self.N

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


def build_uniform_mesh(N: int, flavor: str = "periodic") -> Mesh:
    """Build the uniform criss-cross triangulation of (0,1)^2.

    Each of the N x N squares is split by its diagonal of positive slope,
    giving 2 N^2 triangles of area 1/(2 N^2) and diameter sqrt(2)/N.

    Parameters
    ----------
    N : int
        Subdivisions per side, N >= 1.
    flavor : str
        ``"periodic"`` or ``"dirichlet"``.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if flavor not in ("periodic", "dirichlet"):
        raise ValueError(f"unknown mesh flavor {flavor!r}")

    side = np.linspace(0.0, 1.0, N + 1)
    X, Y = np.meshgrid(side, side, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (N + 1) + j

    elements = np.empty((2 * N * N, 3), dtype=np.int64)
    k = 0
    for i in range(N):
        for j in range(N):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v01 = vid(i, j + 1)
            v11 = vid(i + 1, j + 1)
            # positive-slope diagonal v00 -- v11; both triples counterclockwise
            elements[k] = (v00, v10, v11)
            elements[k + 1] = (v00, v11, v01)
            k += 2

    if flavor == "dirichlet":
        on_bnd = (
            (vertices[:, 0] == 0.0)
            | (vertices[:, 0] == 1.0)
            | (vertices[:, 1] == 0.0)
            | (vertices[:, 1] == 1.0)
        )
        boundary_vertex_ids = np.nonzero(on_bnd)[0]
    else:
        boundary_vertex_ids = np.empty(0, dtype=np.int64)

    p = vertices[elements]  # (n_e, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    twice_area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(twice_area <= 0):
        raise AssertionError("element orientation is not counterclockwise")
    areas = 0.5 * twice_area
    barycenters = p.mean(axis=1)

    # grad of barycentric lambda_i: rotate the opposite edge by 90 degrees
    grad_bary = np.empty((elements.shape[0], 3, 2))
    for loc in range(3):
        a = p[:, (loc + 1) % 3]
        b = p[:, (loc + 2) % 3]
        edge = b - a
        grad_bary[:, loc, 0] = -edge[:, 1]
        grad_bary[:, loc, 1] = edge[:, 0]
    grad_bary /= twice_area[:, None, None]

    mesh = Mesh(
        N=int(N),
        vertices=vertices,
        elements=elements,
        flavor=flavor,
        boundary_vertex_ids=boundary_vertex_ids,
        areas=areas,
        barycenters=barycenters,
        grad_bary=grad_bary,
    )
    for arr in (mesh.vertices, mesh.elements, mesh.boundary_vertex_ids,
                mesh.areas, mesh.barycenters, mesh.grad_bary):
        arr.setflags(write=False)
    return mesh


def barycenter(mesh: Mesh, e: int) -> np.ndarray:
    """Barycenter of element ``e`` (arithmetic mean of its three vertices)."""
    if not 0 <= e < mesh.n_elements:
        raise IndexError(f"element index {e} out of range [0, {mesh.n_elements})")
    return mesh.barycenters[e].copy()
