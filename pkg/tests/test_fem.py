import numpy as np
import pytest

from hjbhom import fem
from hjbhom.fem import (FeFunction, build_space, eval_at_qp, interpolate,
                        l2_project, mass_matrix, stiffness_matrix,
                        triple_norm)
from hjbhom.mesh import build_uniform_mesh


def random_fn(space, rng, zero_mean=False):
    coeffs = rng.normal(size=space.n_coeffs)
    if zero_mean:
        n = space.n_dofs
        for c in range(space.components):
            block = coeffs[c * n:(c + 1) * n]
            block -= (space.integral_weights @ block)  # unit cell area 1
    return FeFunction(space, coeffs)


# ----------------------------------------------------------------------------
# space construction

def test_full_corner_identification():
    space = build_space(build_uniform_mesh(1, "periodic"), 1, 1)
    assert space.n_dofs == 1


def test_periodic_vertex_classes():
    space = build_space(build_uniform_mesh(2, "periodic"), 1, 1)
    assert space.n_dofs == 4


def test_dirichlet_interior_dof():
    space = build_space(build_uniform_mesh(2, "dirichlet"), 1, 1)
    assert space.n_dofs == 9
    assert len(space.boundary_dofs) == 8
    interior = np.setdiff1d(np.arange(space.n_dofs), space.boundary_dofs)
    assert interior.size == 1
    assert np.allclose(space.dof_points[interior[0]], [0.5, 0.5])


def test_p2_periodic_count():
    space = build_space(build_uniform_mesh(2, "periodic"), 2, 1)
    assert space.n_dofs == 4 * 2 * 2      # vertices + three edge classes per square


def test_unsupported_degree():
    mesh = build_uniform_mesh(2, "periodic")
    with pytest.raises(ValueError):
        build_space(mesh, 3, 1)


def test_dof_map_is_surjective():
    space = build_space(build_uniform_mesh(4, "periodic"), 1, 1)
    assert set(space.dof_map.ravel()) == set(range(space.n_dofs))


# ----------------------------------------------------------------------------
# interpolation

def test_interpolate_constant():
    space = build_space(build_uniform_mesh(3, "periodic"), 1, 1)
    fn = interpolate(space, lambda p: 3.0)
    assert np.allclose(fn.coeffs, 3.0)


def test_interpolate_nodal_values():
    space = build_space(build_uniform_mesh(4, "periodic"), 1, 1)
    fn = interpolate(space, lambda p: np.cos(2 * np.pi * p[0]))
    expect = np.cos(2 * np.pi * space.dof_points[:, 0])
    assert np.allclose(fn.coeffs, expect)


def test_interpolation_projects_members():
    space = build_space(build_uniform_mesh(3, "dirichlet"), 1, 1)
    rng = np.random.default_rng(3)
    member = random_fn(space, rng)

    def g(p):
        return fem.eval_points(member, p[None, :])[0]

    again = interpolate(space, g)
    assert np.allclose(again.coeffs, member.coeffs, atol=1e-12)


# ----------------------------------------------------------------------------
# evaluation

def test_linear_vector_fields():
    mesh = build_uniform_mesh(3, "dirichlet")
    vspace = build_space(mesh, 1, 2)
    w = interpolate(vspace, lambda p: (p[1], 0.0))
    data = eval_at_qp(w, 2)
    assert np.allclose(data.rot2d, 1.0)
    assert np.allclose(data.divergence, 0.0, atol=1e-13)

    w2 = interpolate(vspace, lambda p: (p[0], p[1]))
    data2 = eval_at_qp(w2, 2)
    assert np.allclose(data2.divergence, 2.0)
    assert np.allclose(data2.rot2d, 0.0, atol=1e-13)


def test_scalar_gradient():
    mesh = build_uniform_mesh(3, "dirichlet")
    space = build_space(mesh, 1, 1)
    u = interpolate(space, lambda p: p[0])
    data = eval_at_qp(u, 1)
    assert np.allclose(data.gradients[..., 0], 1.0)
    assert np.allclose(data.gradients[..., 1], 0.0, atol=1e-13)


def test_eval_points_matches_nodal_values():
    mesh = build_uniform_mesh(5, "dirichlet")
    space = build_space(mesh, 1, 1)
    rng = np.random.default_rng(11)
    fn = random_fn(space, rng)
    got = fem.eval_points(fn, space.dof_points)
    assert np.allclose(got, fn.coeffs, atol=1e-13)
    # affine functions are reproduced anywhere
    aff = interpolate(space, lambda p: 2.0 * p[0] - 0.5 * p[1] + 1.0)
    pts = rng.random((40, 2))
    assert np.allclose(fem.eval_points(aff, pts),
                       2.0 * pts[:, 0] - 0.5 * pts[:, 1] + 1.0, atol=1e-12)


# ----------------------------------------------------------------------------
# the problem-adapted norm

def test_triple_norm_constant():
    mesh = build_uniform_mesh(2, "dirichlet")
    u = interpolate(build_space(mesh, 1, 1), lambda p: 1.5)
    w = build_space(mesh, 1, 2).zero_function()
    assert triple_norm(w, u, 2.0) == pytest.approx(2.0 * 1.5)


def test_triple_norm_linear_profile():
    mesh = build_uniform_mesh(4, "dirichlet")
    u = interpolate(build_space(mesh, 1, 1), lambda p: p[0])
    # 2 lam |grad u|^2 + lam^2 int x^2 = 1 + 0.25/3 at lam = 1/2
    assert triple_norm(None, u, 0.5) == pytest.approx(np.sqrt(13.0 / 12.0))


def test_triple_norm_homogeneity():
    mesh = build_uniform_mesh(4, "periodic")
    space = build_space(mesh, 1, 1)
    rng = np.random.default_rng(5)
    u = random_fn(space, rng)
    t = -2.75
    scaled = FeFunction(space, t * u.coeffs)
    assert triple_norm(None, scaled, 0.7) == pytest.approx(
        abs(t) * triple_norm(None, u, 0.7))


def test_triple_norm_rejects_bad_lambda():
    mesh = build_uniform_mesh(2, "periodic")
    u = build_space(mesh, 1, 1).zero_function()
    with pytest.raises(ValueError):
        triple_norm(None, u, 0.0)


# ----------------------------------------------------------------------------
# L2 projection of gradients

def test_project_affine_gradient():
    mesh = build_uniform_mesh(4, "dirichlet")
    u = interpolate(build_space(mesh, 1, 1), lambda p: 3.0 * p[0] - p[1])
    w = l2_project(build_space(mesh, 1, 2), u)
    n = w.space.n_dofs
    assert np.allclose(w.coeffs[:n], 3.0, atol=1e-11)
    assert np.allclose(w.coeffs[n:], -1.0, atol=1e-11)


def test_projection_identity_residual():
    mesh = build_uniform_mesh(6, "dirichlet")
    space = build_space(mesh, 1, 1)
    rng = np.random.default_rng(7)
    u = random_fn(space, rng)
    vspace = build_space(mesh, 1, 2)
    w = l2_project(vspace, u)
    # int w . v == int grad u . v for every basis field v
    m = mass_matrix(vspace)
    grad = eval_at_qp(u, 2).gradients
    _, qw, vals, _ = fem._geometry_at(vspace, 2)
    wq = mesh.areas[:, None] * qw[None, :]
    rhs = np.zeros(2 * vspace.n_dofs)
    for c in range(2):
        np.add.at(rhs, c * vspace.n_dofs + vspace.dof_map,
                  np.einsum("eq,ql->el", wq * grad[..., c], vals))
    assert np.max(np.abs(m @ w.coeffs - rhs)) <= 1e-12


def test_projected_gradient_converges():
    errs = []
    for N in (16, 32):
        mesh = build_uniform_mesh(N, "dirichlet")
        u = interpolate(build_space(mesh, 1, 1),
                        lambda p: 0.5 * (p[0] ** 2 + p[1] ** 2))
        w = l2_project(build_space(mesh, 1, 2), u)
        data = eval_at_qp(w, 4)
        err2 = np.sum(data.weights
                      * np.sum((data.values - data.points) ** 2, axis=2))
        errs.append(np.sqrt(err2))
    assert errs[1] < errs[0]
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.5)


# ----------------------------------------------------------------------------
# structural invariants

def test_maxwell_identity_random_fields():
    rng = np.random.default_rng(2024)
    for N in (4, 8):
        vspace = build_space(build_uniform_mesh(N, "periodic"), 1, 2)
        for _ in range(20):
            w = random_fn(vspace, rng)
            data = eval_at_qp(w, 2)
            dw2 = np.sum(data.weights * np.sum(data.gradients ** 2, (2, 3)))
            rot2 = np.sum(data.weights * data.rot2d ** 2)
            div2 = np.sum(data.weights * data.divergence ** 2)
            assert abs(dw2 - rot2 - div2) <= 1e-10 * dw2


def test_periodic_poincare():
    rng = np.random.default_rng(99)
    space = build_space(build_uniform_mesh(8, "periodic"), 1, 1)
    const = np.sqrt(2.0) / np.pi
    for _ in range(50):
        v = random_fn(space, rng, zero_mean=True)
        data = eval_at_qp(v, 2)
        l2 = np.sqrt(np.sum(data.weights * data.values ** 2))
        h1 = np.sqrt(np.sum(data.weights * np.sum(data.gradients ** 2, 2)))
        assert l2 <= const * h1 * (1.0 + 1e-12)


def test_matrix_properties():
    space = build_space(build_uniform_mesh(4, "periodic"), 1, 1)
    m = mass_matrix(space).toarray()
    k = stiffness_matrix(space).toarray()
    assert np.allclose(m, m.T)
    assert np.allclose(k, k.T)
    assert np.all(np.linalg.eigvalsh(m) > 0)
    ev = np.linalg.eigvalsh(k)
    assert ev[0] > -1e-12
    assert np.sum(ev < 1e-10) == 1          # kernel = constants
    assert np.max(np.abs(k @ np.ones(space.n_dofs))) <= 1e-12


def test_export_csv(tmp_path):
    space = build_space(build_uniform_mesh(2, "dirichlet"), 1, 1)
    fn = interpolate(space, lambda p: p[0] + 2.0 * p[1])
    path = tmp_path / "field.csv"
    fem.export_csv(fn, path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (9, 4)
    assert np.allclose(rows[:, 3], rows[:, 1] + 2.0 * rows[:, 2])
