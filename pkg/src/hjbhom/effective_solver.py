"""Two-scale least-squares solver for the homogenized Dirichlet problem.

The homogenized problem u0 + H(D^2 u0) = 0 on Omega = (0,1)^2 with zero
boundary values is discretized by minimizing

    J(v) = || v + Htilde(D^2_h v) ||_{L^2(Omega)}^2

over continuous piecewise affine v vanishing on the boundary.  Here D^2_h v
is the discrete Hessian -- the elementwise derivative of the L2 projection of
grad v onto the vector P1 space (symmetrized) -- and Htilde is the continuous
piecewise affine function obtained by nodal averaging of the elementwise
Hamiltonian values.  The Hamiltonian per element is either the exact
benchmark formula or a cell-problem solve (cached) at the element's Hessian.

The same machinery applied to the oscillating operator itself (coefficients
evaluated at the element barycenter x and fast variable x/eps) yields
reference solutions of the eps-problem.

Minimization uses L-BFGS-B on the interior coefficients with an analytic
semismooth gradient assembled by the chain rule through the nodal averaging,
the elementwise Hamiltonian and the projection mass solves; the gradient is
cross-checked against forward differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize

from . import fem
from .control import CoefficientFamily, select_lambda
from .fem import FeFunction, FunctionSpace
from .homogenization import (BENCHMARK_R, CellProblemSpec, exact_H_batch,
                             solve_cell)
from .control import BENCHMARK_B
from .mesh import Mesh, build_uniform_mesh

__all__ = [
    "TwoScaleConfig",
    "EffectiveSolution",
    "discrete_hessian",
    "averaged_hamiltonian",
    "solve_effective",
    "solve_eps_problem",
    "linear_effective_solution",
]

_BENCHMARK_NAMES = ("fo-benchmark", "fo-benchmark-const")


@dataclass(frozen=True)
class TwoScaleConfig:
    """Parameters of one two-scale effective solve."""

    omega_mesh_N: int
    cell_mesh_N: int = 4
    sigma: float = 0.1
    hamiltonian_mode: str = "cell"     # "cell" or "exact"
    cell_tol: float = 1e-10
    ftol: float = 1e-14
    gtol: float = 1e-10
    max_evals: int = 20000
    max_restarts: int = 3
    quad_order: int = 4

    def __post_init__(self):
        if self.omega_mesh_N < 1 or self.cell_mesh_N < 1:
            raise ValueError("mesh parameters must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.hamiltonian_mode not in ("cell", "exact"):
            raise ValueError("hamiltonian_mode must be 'cell' or 'exact'")


@dataclass
class EffectiveSolution:
    """Minimizer of the least-squares functional with diagnostics."""

    u: FeFunction
    objective: float
    evaluations: int
    htilde: FeFunction
    converged: bool
    message: str = ""


# ----------------------------------------------------------------------------
# discrete Hessian and nodal averaging

def discrete_hessian(u: FeFunction,
                     vector_space: FunctionSpace | None = None) -> np.ndarray:
    """Elementwise symmetric discrete Hessian of a P1 function.

    Projects grad u onto the vector P1 space over the full mesh (boundary
    vertices included), differentiates elementwise and symmetrizes.
    Returns (n_elements, 2, 2).
    """
    space = u.space
    if space.degree != 1 or space.components != 1:
        raise ValueError("discrete_hessian expects a scalar P1 function")
    if vector_space is None:
        vector_space = fem.build_space(space.mesh, 1, 2, "none")
    w = fem.l2_project(vector_space, u, lumped=True)
    return _element_jacobian(vector_space, w.coeffs, symmetrize=True)


def _element_jacobian(vspace: FunctionSpace, wcoeffs: np.ndarray,
                      symmetrize: bool = True) -> np.ndarray:
    gb = vspace.mesh.grad_bary                    # (n_e, 3, 2)
    dm = vspace.dof_map
    n = vspace.n_dofs
    jac = np.empty((vspace.mesh.n_elements, 2, 2))
    for d in range(2):
        cd = wcoeffs[d * n:][dm]                  # (n_e, 3)
        jac[:, d, :] = np.einsum("el,elc->ec", cd, gb)
    if symmetrize:
        jac = 0.5 * (jac + np.swapaxes(jac, 1, 2))
    return jac


def _averaging_operator(space: FunctionSpace):
    """Sparse nodal-averaging map from element values to P1 coefficients."""
    dm = space.dof_map[:, :3]
    n_e = dm.shape[0]
    deg = np.zeros(space.n_dofs)
    np.add.at(deg, dm, 1.0)
    rows = dm.ravel()
    cols = np.repeat(np.arange(n_e), 3)
    vals = 1.0 / deg[rows]
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(space.n_dofs, n_e)).tocsr()


def averaged_hamiltonian(hessians: np.ndarray, h_eval, omega_mesh: Mesh,
                         space: FunctionSpace | None = None) -> FeFunction:
    """Nodal average of the per-element Hamiltonian values as a P1 function.

    ``h_eval`` maps a symmetric 2x2 matrix to a real value; evaluation
    failures are re-raised with the offending element id attached.  Every
    vertex value is the arithmetic mean over its incident elements (boundary
    vertices average their incident elements only).
    """
    hessians = np.asarray(hessians, dtype=float)
    if hessians.shape != (omega_mesh.n_elements, 2, 2):
        raise ValueError("need one 2x2 matrix per element")
    if space is None:
        space = fem.build_space(omega_mesh, 1, 1, "none")
    values = np.empty(omega_mesh.n_elements)
    for e in range(omega_mesh.n_elements):
        try:
            values[e] = h_eval(hessians[e])
        except Exception as exc:
            raise RuntimeError(
                f"Hamiltonian evaluation failed on element {e}") from exc
    avg = _averaging_operator(space)
    return FeFunction(space, avg @ values)


# ----------------------------------------------------------------------------
# element Hamiltonian evaluators (batched, with semismooth gradients)

def _exact_evaluator(family_name: str):
    if family_name not in _BENCHMARK_NAMES:
        raise ValueError("exact Hamiltonian mode requires a benchmark family")

    def evaluate(S, qbar, mids):
        values, grads = exact_H_batch(S, family_name)
        return values, grads, None

    return evaluate


def _cell_evaluator(family: CoefficientFamily, certificate, sigma: float,
                    cell_N: int, cell_tol: float, mids, fd_step: float = 1e-6):
    """Cell-problem Hamiltonian with forward-difference matrix gradients.

    The macroscopic point is the element barycenter for x-dependent families
    and a fixed point otherwise, so that caching collapses identical solves.
    """
    n_e = mids.shape[0]
    if family.x_dependent:
        s_of = [mids[e] for e in range(n_e)]
    else:
        s_of = [np.array([0.5, 0.5])] * n_e
    p0 = np.zeros(2)

    def value_at(e, R):
        spec = CellProblemSpec(s_of[e], p0, R, sigma, family, certificate)
        return solve_cell(spec, cell_N, tol=cell_tol).value

    basis = [np.array([[1.0, 0.0], [0.0, 0.0]]),
             np.array([[0.0, 0.0], [0.0, 1.0]]),
             np.array([[0.0, 0.5], [0.5, 0.0]])]
    pick = [(0, 0), (1, 1), (0, 1)]

    def evaluate(S, qbar, mids_unused):
        values = np.empty(n_e)
        grads = np.empty((n_e, 2, 2))
        for e in range(n_e):
            R = 0.5 * (S[e] + S[e].T)
            v0 = value_at(e, R)
            values[e] = v0
            h = fd_step * (1.0 + float(np.abs(R).max()))
            for k, E in enumerate(basis):
                dv = (value_at(e, R + h * E) - v0) / h
                a, b = pick[k]
                if a == b:
                    grads[e, a, b] = dv
                else:
                    grads[e, a, b] = grads[e, b, a] = 0.5 * dv
        return values, grads, None

    return evaluate


def _eps_evaluator(family: CoefficientFamily, eps: float, mids):
    """Raw oscillating Bellman operator at element barycenters.

    Evaluates sup_alpha { -A^alpha(x, x/eps) : S - b^alpha . q - f^alpha }
    with x the barycenter; subgradients come from the maximizing control.
    The zeroth-order coefficient is the unit one of the eps-framework.
    """
    ys = mids / eps
    n_e = mids.shape[0]
    n_ctrl = len(family.controls)
    A_all = np.empty((n_ctrl, n_e, 2, 2))
    b_all = np.empty((n_ctrl, n_e, 2))
    f_all = np.empty((n_ctrl, n_e))
    for k, alpha in enumerate(family.controls.values):
        if family.x_dependent:
            for e in range(n_e):
                A_all[k, e] = family.A(mids[e], ys[e], alpha)
                b_all[k, e] = family.b(mids[e], ys[e], alpha)
                f_all[k, e] = family.f(mids[e], ys[e], alpha)
        else:
            A_all[k] = family.A(None, ys, alpha)
            b_all[k] = family.b(None, ys, alpha)
            f_all[k] = family.f(None, ys, alpha)

    def evaluate(S, qbar, mids_unused):
        vals = (-np.einsum("kedc,edc->ke", A_all, S)
                - np.einsum("kec,ec->ke", b_all, qbar) - f_all)
        idx = np.argmax(vals, axis=0)
        values = np.take_along_axis(vals, idx[None], axis=0)[0]
        ar = np.arange(n_e)
        grads = -A_all[idx, ar]
        grad_q = -b_all[idx, ar]
        return values, grads, grad_q

    return evaluate


# ----------------------------------------------------------------------------
# least-squares machinery

class _LeastSquares:
    """Objective J(v) = ||v + Htilde(D^2_h v)||^2 and its gradient."""

    def __init__(self, omega_mesh: Mesh, evaluator, quad_order: int = 4):
        self.mesh = omega_mesh
        self.space = fem.build_space(omega_mesh, 1, 1, "none")
        self.vspace = fem.build_space(omega_mesh, 1, 2, "none")
        s = self.space
        self.interior = np.setdiff1d(np.arange(s.n_dofs), s.boundary_dofs)
        self.mass = fem.mass_matrix(s)
        self.lump = s.integral_weights     # row-sum lumped projection mass
        self.avg = _averaging_operator(s)
        self.evaluator = evaluator
        self.mids = omega_mesh.barycenters
        self.evaluations = 0

        # gradient operators (G_c v)_j = int d_c v phi_j, P1 exact
        gb = omega_mesh.grad_bary
        dm = s.dof_map
        n_e = omega_mesh.n_elements
        self.G = []
        for c in range(2):
            rows = np.repeat(dm, 3, axis=1).ravel()          # destinations j
            cols = np.tile(dm, (1, 3)).ravel()               # sources l
            # int d_c(phi_l) phi_j = |T| gb[l, c] / 3, value follows source
            vals = np.tile(omega_mesh.areas[:, None] / 3.0
                           * gb[:, :, c], (1, 3)).ravel()
            self.G.append(sp.coo_matrix(
                (vals, (rows, cols)),
                shape=(s.n_dofs, s.n_dofs)).tocsr())
        self.dm = dm
        self.gb = gb
        self.n_e = n_e

    @property
    def n_free(self) -> int:
        return self.interior.size

    def scatter(self, x: np.ndarray) -> np.ndarray:
        v = np.zeros(self.space.n_dofs)
        v[self.interior] = x
        return v

    def project(self, v: np.ndarray) -> np.ndarray:
        """Coefficients of the lumped-L2-projected gradient, (2, n_dofs)."""
        return np.stack([(self.G[c] @ v) / self.lump for c in range(2)])

    def fields(self, v: np.ndarray):
        w = self.project(v)
        wloc = w[:, self.dm]                                 # (2, n_e, 3)
        jac = np.einsum("del,elc->edc", wloc, self.gb)       # (n_e, d, c)
        S = 0.5 * (jac + np.swapaxes(jac, 1, 2))
        qbar = wloc.mean(axis=2).T                           # (n_e, 2)
        return w, S, qbar

    def htilde_values(self, v: np.ndarray):
        _, S, qbar = self.fields(v)
        values, _, _ = self.evaluator(S, qbar, self.mids)
        return self.avg @ values

    def objective(self, x: np.ndarray, need_grad: bool = True):
        self.evaluations += 1
        v = self.scatter(x)
        w, S, qbar = self.fields(v)
        values, grad_S, grad_q = self.evaluator(S, qbar, self.mids)
        r = v + self.avg @ values
        Mr = self.mass @ r
        J = float(r @ Mr)
        if not need_grad:
            return J, None
        z = 2.0 * Mr
        zeta = self.avg.T @ z                                # (n_e,)
        xi = np.zeros((2, self.space.n_dofs))
        # chain rule through S = sym(Dw): d(eta)/d(w_d at local l)
        contrib = np.einsum("e,edc,elc->del", zeta, grad_S, self.gb)
        if grad_q is not None:
            contrib = contrib + (zeta[:, None] * grad_q / 3.0).T[:, :, None]
        for d in range(2):
            np.add.at(xi[d], self.dm, contrib[d])
        grad_v = z.copy()
        for d in range(2):
            grad_v += self.G[d].T @ (xi[d] / self.lump)
        return J, grad_v[self.interior]


def linear_effective_solution(omega_mesh: Mesh, Abar: np.ndarray,
                              fbar=1.0) -> FeFunction:
    """P1 weak solution of u - Abar : D^2 u = fbar, zero boundary values.

    For constant symmetric Abar this is the divergence-form problem
    int (Abar grad u . grad v + u v) = int fbar v, solved over interior
    vertices; serves both as initial guess and as independent oracle for
    linear effective Hamiltonians H(R) = -Abar : R - fbar.
    """
    Abar = np.asarray(Abar, dtype=float)
    space = fem.build_space(omega_mesh, 1, 1, "none")
    gb = omega_mesh.grad_bary
    loc = np.einsum("eld,dc,emc->elm", gb, Abar, gb) \
        * omega_mesh.areas[:, None, None]
    dm = space.dof_map
    rows = np.broadcast_to(dm[:, :, None], loc.shape).ravel()
    cols = np.broadcast_to(dm[:, None, :], loc.shape).ravel()
    n = space.n_dofs
    K = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A = K + fem.mass_matrix(space)
    if callable(fbar):
        fe = np.array([fbar(m) for m in omega_mesh.barycenters])
        rhs = np.zeros(n)
        np.add.at(rhs, dm, (omega_mesh.areas * fe)[:, None] / 3.0)
    else:
        rhs = float(fbar) * space.integral_weights
    interior = np.setdiff1d(np.arange(n), space.boundary_dofs)
    coeffs = np.zeros(n)
    if interior.size:
        Aii = A[interior][:, interior].tocsc()
        coeffs[interior] = spla.splu(Aii).solve(rhs[interior])
    return FeFunction(space, coeffs)


def _minimize(ls: _LeastSquares, x0: np.ndarray, ftol: float, gtol: float,
              max_evals: int, max_restarts: int):
    """L-BFGS-B with restarts, tracking the best-so-far point."""
    best_x = x0.copy()
    best_J = ls.objective(x0, need_grad=False)[0]
    converged = False
    message = ""
    x = x0.copy()
    for _ in range(max(1, max_restarts)):
        if ls.evaluations >= max_evals:
            message = "evaluation budget exhausted"
            break
        res = minimize(
            ls.objective, x, jac=True, method="L-BFGS-B",
            options={"ftol": ftol, "gtol": gtol,
                     "maxfun": max(1, max_evals - ls.evaluations),
                     "maxiter": max(1, max_evals - ls.evaluations)})
        improved = res.fun < best_J - ftol * (1.0 + abs(best_J))
        if res.fun < best_J:
            best_J, best_x = float(res.fun), res.x.copy()
        converged = bool(res.success) or res.status == 0
        message = str(res.message)
        x = best_x.copy()
        if not improved:
            break
    return best_x, best_J, converged, message


def solve_effective(config: TwoScaleConfig,
                    family: CoefficientFamily) -> EffectiveSolution:
    """Minimize the two-scale least-squares functional for the homogenized
    problem and return the discrete solution with diagnostics."""
    omega_mesh = build_uniform_mesh(config.omega_mesh_N, "dirichlet")
    if config.hamiltonian_mode == "exact":
        evaluator = _exact_evaluator(family.name)
    else:
        certificate = select_lambda(family)
        evaluator = _cell_evaluator(family, certificate, config.sigma,
                                    config.cell_mesh_N, config.cell_tol,
                                    omega_mesh.barycenters)
    ls = _LeastSquares(omega_mesh, evaluator, config.quad_order)
    return _run_least_squares(ls, family, config)


def solve_eps_problem(eps: float, omega_mesh_N: int,
                      family: CoefficientFamily,
                      ftol: float = 1e-14, gtol: float = 1e-10,
                      max_evals: int = 20000,
                      max_restarts: int = 3) -> EffectiveSolution:
    """Least-squares approximation of the eps-problem itself.

    Minimizes ||v + Ftilde_eps(D^2_h v)||^2 where Ftilde_eps is the nodal
    average of the barycenter evaluation of the oscillating Bellman operator
    (projected gradient used for the drift term).  Returns an
    EffectiveSolution; the field is in ``.u``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    omega_mesh = build_uniform_mesh(omega_mesh_N, "dirichlet")
    evaluator = _eps_evaluator(family, eps, omega_mesh.barycenters)
    ls = _LeastSquares(omega_mesh, evaluator)
    config = TwoScaleConfig(omega_mesh_N=omega_mesh_N, ftol=ftol, gtol=gtol,
                            max_evals=max_evals, max_restarts=max_restarts)
    return _run_least_squares(ls, family, config)


def _run_least_squares(ls: _LeastSquares, family,
                       config) -> EffectiveSolution:
    if ls.n_free == 0:
        u = ls.space.zero_function()
        ht = FeFunction(ls.space, ls.htilde_values(u.coeffs))
        return EffectiveSolution(u, float("nan"), 0, ht, True,
                                 "no interior degrees of freedom")
    if family.name in _BENCHMARK_NAMES:
        init = linear_effective_solution(ls.mesh, BENCHMARK_B, 1.0)
        x0 = init.coeffs[ls.interior]
    else:
        x0 = np.zeros(ls.n_free)
    best_x, best_J, converged, message = _minimize(
        ls, x0, config.ftol, config.gtol, config.max_evals,
        config.max_restarts)
    v = ls.scatter(best_x)
    u = FeFunction(ls.space, v)
    htilde = FeFunction(ls.space, ls.htilde_values(v))
    return EffectiveSolution(u, best_J, ls.evaluations, htilde,
                             converged, message)
