import numpy as np
import pytest

from hjbhom.mesh import barycenter, build_uniform_mesh


def test_smallest_periodic_grid():
    mesh = build_uniform_mesh(1, "periodic")
    assert mesh.n_vertices == 4
    assert mesh.n_elements == 2
    assert mesh.h == pytest.approx(np.sqrt(2.0))


def test_dirichlet_counts():
    mesh = build_uniform_mesh(2, "dirichlet")
    assert mesh.n_vertices == 9
    assert mesh.n_elements == 8
    assert len(mesh.boundary_vertex_ids) == 8


def test_fine_cell_mesh_size():
    mesh = build_uniform_mesh(2 ** 7, "periodic")
    assert mesh.h == pytest.approx(np.sqrt(2.0) * 2.0 ** -7)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        build_uniform_mesh(0)
    with pytest.raises(ValueError):
        build_uniform_mesh(-3)
    with pytest.raises(ValueError):
        build_uniform_mesh(2, "neumann")


def test_barycenters_of_unit_grid():
    mesh = build_uniform_mesh(1, "periodic")
    got = sorted(tuple(barycenter(mesh, e)) for e in range(mesh.n_elements))
    assert np.allclose(got, [(1 / 3, 2 / 3), (2 / 3, 1 / 3)], atol=1e-14)


def test_barycenter_rejects_bad_index():
    mesh = build_uniform_mesh(2, "periodic")
    with pytest.raises(IndexError):
        barycenter(mesh, mesh.n_elements)
    with pytest.raises(IndexError):
        barycenter(mesh, -1)


@pytest.mark.parametrize("N,flavor", [(1, "periodic"), (3, "dirichlet"),
                                      (8, "periodic")])
def test_areas_and_orientation(N, flavor):
    mesh = build_uniform_mesh(N, flavor)
    assert abs(mesh.areas.sum() - 1.0) <= 1e-14
    assert np.allclose(mesh.areas, 1.0 / (2 * N * N))
    p = mesh.vertices[mesh.elements]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    assert np.all(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] > 0)


def test_edge_sharing():
    N = 4
    mesh = build_uniform_mesh(N, "dirichlet")
    counts = {}
    for tri in mesh.elements:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = tuple(sorted((tri[a], tri[b])))
            counts[key] = counts.get(key, 0) + 1
    for (a, b), c in counts.items():
        pa, pb = mesh.vertices[a], mesh.vertices[b]
        mid = 0.5 * (pa + pb)
        on_face = np.any(np.isclose(mid, 0.0)) or np.any(np.isclose(mid, 1.0))
        assert c == (1 if on_face else 2)


def test_periodic_face_edges_have_partners():
    N = 3
    mesh = build_uniform_mesh(N, "periodic")
    face_mids = []
    for tri in mesh.elements:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            mid = 0.5 * (mesh.vertices[tri[a]] + mesh.vertices[tri[b]])
            if np.any(np.isclose(mid, 0.0)) or np.any(np.isclose(mid, 1.0)):
                face_mids.append(mid)
    face_mids = np.array(face_mids)
    wrapped = np.round(np.mod(face_mids, 1.0), 12)
    # each wrapped midpoint must occur an even number of times (edge + partner)
    _, counts = np.unique(wrapped, axis=0, return_counts=True)
    assert np.all(counts % 2 == 0)


def test_barycentric_gradients_reproduce_affine():
    mesh = build_uniform_mesh(5, "dirichlet")
    coef = np.array([0.3, -1.2])
    vals = mesh.vertices @ coef + 0.7
    p = vals[mesh.elements]                       # (n_e, 3)
    grads = np.einsum("el,eld->ed", p, mesh.grad_bary)
    assert np.allclose(grads, coef[None, :], atol=1e-13)


def test_mesh_is_read_only():
    mesh = build_uniform_mesh(2, "periodic")
    with pytest.raises(ValueError):
        mesh.vertices[0, 0] = 5.0
