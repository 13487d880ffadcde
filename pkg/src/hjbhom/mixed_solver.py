"""Policy iteration for the discrete mixed formulation of periodic HJB.

The problem: find m_h in M_h and (w_h, u_h) in X_h = W_h x U_h with

    a((w_h,u_h),(w',u')) + b(m_h,(w',u')) = 0   for all (w',u') in X_h,
    b(m',(w_h,u_h)) = 0                         for all m' in M_h,

where

    a((w,u),(w',u')) = int F_gamma[(w,u)] L_lam(w',u')
                       + sigma1 int rot(w) rot(w')
                       + sigma2 int (grad u - w).(grad u' - w'),
    b(m,(w,u)) = int grad m . (grad u - w),
    sigma1 = 1 - sqrt(1-delta)/2,
    sigma2 = lam ((1-sqrt(1-delta))/2 + 1/(4(1-sqrt(1-delta)))).

W_h is the zero-mean periodic P_q vector space, U_h the periodic P_l space,
and M_h either {0} (default) or the zero-mean periodic scalar space.  Zero
means are enforced by scalar Lagrange multipliers, so the linear systems are
built over full nodal coefficient vectors with layout

    [w component 0 | w component 1 | u | (m) | mu_w (2) | (rho)].

The nonlinearity F_gamma is a pointwise maximum of affine operators, so the
nonlinear system is solved by Howard's policy iteration (semismooth Newton):
freeze the argmax control at every quadrature point, solve the resulting
linear mixed system, recompute the argmax, repeat.  A step-halving safeguard
keeps the residual decreasing.  The residual is measured in the dual norm of
|||.|||_lam over the zero-mean test space (Gram-preconditioned), plus the
Euclidean norm of the linear constraint rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .control import CoefficientFamily, CordesCertificate, gamma_at
from .fem import FeFunction, FunctionSpace
from .mesh import Mesh

__all__ = [
    "MixedProblem",
    "MixedState",
    "make_mixed_problem",
    "sigma_constants",
    "assemble_policy_system",
    "howard_solve",
    "nonlinear_residual",
]


def sigma_constants(delta: float, lam: float) -> tuple[float, float]:
    """Stabilization weights (sigma1, sigma2) of the mixed form."""
    root = np.sqrt(1.0 - delta)
    sigma1 = 1.0 - 0.5 * root
    sigma2 = lam * ((1.0 - root) / 2.0 + 1.0 / (4.0 * (1.0 - root)))
    return float(sigma1), float(sigma2)


@dataclass
class MixedProblem:
    """Discrete mixed HJB problem on a periodic mesh."""

    space_w: FunctionSpace
    space_u: FunctionSpace
    m_space: FunctionSpace | None
    family: CoefficientFamily
    certificate: CordesCertificate
    sigma1: float
    sigma2: float
    frozen_x: np.ndarray | None = None
    quad_order: int = 4
    _ops: "_Operator" = field(default=None, repr=False)

    @property
    def lam(self) -> float:
        return self.certificate.lam

    def ops(self) -> "_Operator":
        if self._ops is None:
            self._ops = _Operator(self)
        return self._ops


def make_mixed_problem(mesh: Mesh, family: CoefficientFamily,
                       certificate: CordesCertificate,
                       frozen_x=None, m_mode: str = "trivial",
                       quad_order: int = 4, degree: int = 1) -> MixedProblem:
    """Set up spaces and constants of the discrete mixed formulation."""
    if mesh.flavor != "periodic":
        raise ValueError("the mixed HJB problem needs a periodic mesh")
    if m_mode not in ("trivial", "full"):
        raise ValueError("m_mode must be 'trivial' or 'full'")
    space_w = fem.build_space(mesh, degree, 2, "zero_mean")
    space_u = fem.build_space(mesh, degree, 1, "none")
    m_space = fem.build_space(mesh, degree, 1, "zero_mean") \
        if m_mode == "full" else None
    sigma1, sigma2 = sigma_constants(certificate.delta, certificate.lam)
    return MixedProblem(space_w, space_u, m_space, family, certificate,
                        sigma1, sigma2,
                        None if frozen_x is None else np.asarray(frozen_x),
                        quad_order)


@dataclass
class MixedState:
    """Solution fields of one mixed solve plus solver diagnostics."""

    w: FeFunction
    u: FeFunction
    m: FeFunction | None
    policy: np.ndarray               # (n_elements, n_qp) chosen controls
    iterations: int
    residual_history: list
    converged: bool
    multipliers: np.ndarray
    vector: np.ndarray = field(repr=False, default=None)


class _Operator:
    """Precomputed tensors and constant matrix blocks of one problem."""

    def __init__(self, problem: MixedProblem):
        self.problem = problem
        sw, su = problem.space_w, problem.space_u
        mesh = sw.mesh
        lam = problem.lam
        if su.mesh is not mesh or sw.degree != su.degree:
            raise ValueError("w and u spaces must share mesh and degree")

        bary, qw, vals, grad = fem._geometry_at(su, problem.quad_order)
        self.n = n = su.n_dofs
        self.nX = 3 * n
        self.n_e, self.nq = grad.shape[0], grad.shape[1]
        nloc = vals.shape[1]
        self.weights = mesh.areas[:, None] * qw[None, :]     # (n_e, nq)
        p = mesh.vertices[mesh.elements]
        self.qp_x = np.einsum("qi,eid->eqd", bary, p)

        # element-local X dofs: [w1 | w2 | u], shape (n_e, 3 nloc)
        dm = su.dof_map
        self.x_dofs = np.concatenate([dm, dm + n, dm + 2 * n], axis=1)

        ne, nq = self.n_e, self.nq
        z = np.zeros((ne, nq, nloc))
        vv = np.broadcast_to(vals, (ne, nq, nloc))
        # L_lam(w', u') = -div w' + lam u'
        self.L = np.concatenate(
            [-grad[..., 0], -grad[..., 1], lam * vv], axis=2)
        # rot(w') = d2 w'_1 - d1 w'_2
        self.rot = np.concatenate([grad[..., 1], -grad[..., 0], z], axis=2)
        # (grad u' - w') components
        self.gap = [
            np.concatenate([-vv, z, grad[..., 0]], axis=2),
            np.concatenate([z, -vv, grad[..., 1]], axis=2),
        ]
        self.grad = grad
        self.vals = vals

        # frozen-control coefficient fields at quadrature points
        fam, cert, x = problem.family, problem.certificate, problem.frozen_x
        ys = self.qp_x.reshape(-1, 2)
        n_ctrl = len(fam.controls)
        self.gA = np.empty((n_ctrl, ne, nq, 2, 2))
        self.gb = np.empty((n_ctrl, ne, nq, 2))
        self.gc = np.empty((n_ctrl, ne, nq))
        self.gf = np.empty((n_ctrl, ne, nq))
        for k, alpha in enumerate(fam.controls.values):
            gam = gamma_at(fam, cert, x, ys, alpha).reshape(ne, nq)
            self.gA[k] = gam[..., None, None] * \
                fam.A(x, ys, alpha).reshape(ne, nq, 2, 2)
            self.gb[k] = gam[..., None] * \
                fam.b(x, ys, alpha).reshape(ne, nq, 2)
            self.gc[k] = gam * fam.c(x, ys, alpha).reshape(ne, nq)
            self.gf[k] = gam * fam.f(x, ys, alpha).reshape(ne, nq)

        # gamma^a (-A:Dw' - b.grad u' + c u') as a row on local X dofs
        self.trial = np.empty((n_ctrl, ne, nq, 3 * nloc))
        for k in range(n_ctrl):
            tw = -np.einsum("eqdc,eqlc->eqdl", self.gA[k], grad)
            tu = (-np.einsum("eqc,eqlc->eql", self.gb[k], grad)
                  + self.gc[k][..., None] * vv)
            self.trial[k] = np.concatenate([tw[:, :, 0], tw[:, :, 1], tu],
                                           axis=2)

        self._build_constant_blocks()
        self._gram_factor = None

    # ------------------------------------------------------------------
    def _scatter_x(self, local):
        rows = np.broadcast_to(self.x_dofs[:, :, None], local.shape)
        cols = np.broadcast_to(self.x_dofs[:, None, :], local.shape)
        return sp.coo_matrix(
            (local.ravel(), (rows.ravel(), cols.ravel())),
            shape=(self.nX, self.nX)).tocsr()

    def _build_constant_blocks(self):
        pb = self.problem
        w = self.weights
        stab = pb.sigma1 * np.einsum("eq,eqi,eqj->eij", w, self.rot, self.rot)
        for g in self.gap:
            stab += pb.sigma2 * np.einsum("eq,eqi,eqj->eij", w, g, g)
        self.A_stab = self._scatter_x(stab)

        n, nX = self.n, self.nX
        iw = pb.space_u.integral_weights     # same mesh/degree as w space
        Crows, Ccols, Cvals = [], [], []
        for c in range(2):
            Crows.append(np.full(n, c))
            Ccols.append(np.arange(n) + c * n)
            Cvals.append(iw)
        self.C = sp.coo_matrix(
            (np.concatenate(Cvals),
             (np.concatenate(Crows), np.concatenate(Ccols))),
            shape=(2, nX)).tocsr()

        if pb.m_space is not None:
            dm_m = pb.m_space.dof_map
            n_m = pb.m_space.n_dofs
            # b(phi_m, (w',u')) = int grad phi_m . (grad u' - w')
            gap_vec = np.stack(self.gap, axis=-1)     # (e, q, i, c)
            loc = np.einsum("eq,eqmc,eqic->emi", w, self.grad, gap_vec)
            rows = np.broadcast_to(dm_m[:, :, None], loc.shape)
            cols = np.broadcast_to(self.x_dofs[:, None, :], loc.shape)
            self.B = sp.coo_matrix(
                (loc.ravel(), (rows.ravel(), cols.ravel())),
                shape=(n_m, nX)).tocsr()
            self.d_m = pb.m_space.integral_weights
            self.n_m = n_m
        else:
            self.B = None
            self.d_m = None
            self.n_m = 0

        self.size = nX + self.n_m + 2 + (1 if self.B is not None else 0)

    # ------------------------------------------------------------------
    def full_system(self, A_pol: sp.csr_matrix, rhs_X: np.ndarray):
        """Bordered saddle matrix and right-hand side for one frozen policy."""
        nX, n_m = self.nX, self.n_m
        A_X = A_pol + self.A_stab
        if self.B is None:
            K = sp.bmat([[A_X, self.C.T], [self.C, None]], format="csc")
            rhs = np.concatenate([rhs_X, np.zeros(2)])
        else:
            d = sp.csr_matrix(self.d_m[:, None])
            K = sp.bmat([
                [A_X, self.B.T, self.C.T, None],
                [self.B, None, None, -d],
                [self.C, None, None, None],
                [None, -d.T, None, None],
            ], format="csc")
            rhs = np.concatenate([rhs_X, np.zeros(n_m + 3)])
        return K, rhs

    def assemble_policy(self, policy_idx: np.ndarray):
        """Frozen-policy linear operator on X_h and its right-hand side."""
        idx = policy_idx[None, :, :, None]
        trial = np.take_along_axis(self.trial, idx, axis=0)[0]
        gf = np.take_along_axis(self.gf, policy_idx[None], axis=0)[0]
        wL = self.weights[..., None] * self.L
        local = np.einsum("eqi,eqj->eij", wL, trial)
        A_pol = self._scatter_x(local)
        rhs_loc = np.einsum("eq,eqi->ei", self.weights * gf, self.L)
        rhs_X = np.zeros(self.nX)
        np.add.at(rhs_X, self.x_dofs, rhs_loc)
        return A_pol, rhs_X

    # ------------------------------------------------------------------
    def state_fields(self, x: np.ndarray):
        """Dw, grad u, u at quadrature points for an X-coefficient vector."""
        n, grad, vals = self.n, self.grad, self.vals
        dm = self.problem.space_u.dof_map
        cw = np.stack([x[c * n:][dm] for c in range(2)], axis=-1)
        Dw = np.stack([np.einsum("eqlc,el->eqc", grad, cw[..., d])
                       for d in range(2)], axis=2)
        cu = x[2 * n:3 * n][dm]
        gu = np.einsum("eqlc,el->eqc", grad, cu)
        uv = np.einsum("ql,el->eq", vals, cu)
        return Dw, gu, uv

    def control_values(self, x: np.ndarray) -> np.ndarray:
        """gamma^a(-A:Dw - b.grad u + c u - f) per control at every qp."""
        Dw, gu, uv = self.state_fields(x)
        vals = (-np.einsum("keqdc,eqdc->keq", self.gA, Dw)
                - np.einsum("keqc,eqc->keq", self.gb, gu)
                + self.gc * uv[None] - self.gf)
        return vals

    def residual_vector(self, z: np.ndarray) -> np.ndarray:
        """Residual of the true semilinear system at a full vector z."""
        x = z[:self.nX]
        F = np.max(self.control_values(x), axis=0)
        r_loc = np.einsum("eq,eqi->ei", self.weights * F, self.L)
        rX = np.zeros(self.nX)
        np.add.at(rX, self.x_dofs, r_loc)
        rX += self.A_stab @ x
        if self.B is None:
            mu = z[self.nX:]
            rX += self.C.T @ mu
            return np.concatenate([rX, self.C @ x])
        n_m = self.n_m
        m = z[self.nX:self.nX + n_m]
        mu = z[self.nX + n_m:self.nX + n_m + 2]
        rho = z[-1]
        rX += self.B.T @ m + self.C.T @ mu
        r_m = self.B @ x - self.d_m * rho
        return np.concatenate([rX, r_m, self.C @ x, [-self.d_m @ m]])

    def gram_solve(self, rX: np.ndarray) -> np.ndarray:
        """Riesz representative of rX in ||| . |||_lam over zero-mean tests."""
        if self._gram_factor is None:
            G = fem.gram_triple_matrix(self.problem.space_w,
                                       self.problem.space_u,
                                       self.problem.lam)
            Gb = sp.bmat([[G, self.C.T], [self.C, None]], format="csc")
            self._gram_factor = spla.splu(Gb)
        sol = self._gram_factor.solve(np.concatenate([rX, np.zeros(2)]))
        return sol[:self.nX]

    def residual_norm(self, z: np.ndarray) -> float:
        r = self.residual_vector(z)
        rX, rest = r[:self.nX], r[self.nX:]
        dual2 = float(rX @ self.gram_solve(rX))
        return float(np.sqrt(max(dual2, 0.0) + rest @ rest))


# ----------------------------------------------------------------------------
# public operations

def _policy_indices(problem: MixedProblem, policy) -> np.ndarray:
    ops = problem.ops()
    policy = np.asarray(policy)
    grid = problem.family.controls.values
    if policy.shape != (ops.n_e, ops.nq):
        raise ValueError(
            f"policy must have shape {(ops.n_e, ops.nq)}, got {policy.shape}")
    idx = np.searchsorted(grid, policy)
    idx = np.clip(idx, 0, len(grid) - 1)
    if not np.allclose(grid[idx], policy):
        raise ValueError("policy contains controls outside the ControlGrid")
    return idx


def assemble_policy_system(problem: MixedProblem, policy):
    """Sparse linear mixed system for a frozen control field.

    ``policy`` assigns a control from the family's grid to every quadrature
    point, shape (n_elements, n_qp).  Returns (matrix, rhs) with unknowns
    [w1 | w2 | u | (m) | mu_w | (rho)].
    """
    ops = problem.ops()
    idx = _policy_indices(problem, policy)
    A_pol, rhs_X = ops.assemble_policy(idx)
    return ops.full_system(A_pol, rhs_X)


def _linear_solve(K, rhs):
    lu = spla.splu(K)
    x = lu.solve(rhs)
    # one step of iterative refinement keeps the relative residual ~1e-14
    x += lu.solve(rhs - K @ x)
    return x


def _make_state(problem, z, idx, iterations, history, converged):
    ops = problem.ops()
    n = ops.n
    w = FeFunction(problem.space_w, z[:2 * n].copy())
    u = FeFunction(problem.space_u, z[2 * n:3 * n].copy())
    if problem.m_space is not None:
        m = FeFunction(problem.m_space, z[ops.nX:ops.nX + ops.n_m].copy())
        mult = z[ops.nX + ops.n_m:]
    else:
        m = None
        mult = z[ops.nX:]
    policy = problem.family.controls.values[idx]
    return MixedState(w, u, m, policy, iterations, history, converged,
                      mult.copy(), z)


def howard_solve(problem: MixedProblem, tol: float = 1e-10,
                 max_iter: int = 50,
                 initial_policy=None) -> MixedState:
    """Solve the discrete mixed HJB problem by damped policy iteration.

    Starts from the constant policy of the smallest control (or a caller
    supplied control field).  Each pass freezes the pointwise argmax of the
    current iterate, solves the linear mixed system, and accepts the step
    (halved up to 10 times if needed) once the true nonlinear residual
    decreases.  Termination is twofold: the Gram-preconditioned dual-norm
    residual falls below ``tol``, or an undamped iterate reproduces its own
    argmax field -- then it is an exact fixed point of the semismooth Newton
    map and the remaining residual is linear-solver roundoff (relevant for
    small zeroth-order coefficients, where the dual norm amplifies roundoff
    by 1/lambda^2).  Returns a nonconverged state with diagnostics instead
    of raising when max_iter or the damping budget is exhausted.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    ops = problem.ops()

    if initial_policy is None:
        idx = np.zeros((ops.n_e, ops.nq), dtype=np.int64)
    elif np.ndim(initial_policy) == 0:
        idx = np.full((ops.n_e, ops.nq),
                      int(np.searchsorted(problem.family.controls.values,
                                          float(initial_policy))),
                      dtype=np.int64)
    else:
        idx = _policy_indices(problem, initial_policy)
    K, rhs = ops.full_system(*ops.assemble_policy(idx))
    z = _linear_solve(K, rhs)
    res = ops.residual_norm(z)
    history = [res]
    iterations = 1
    full_step = True
    converged = res <= tol

    while iterations < max_iter:
        if res <= tol:
            converged = True
            break
        new_idx = np.argmax(ops.control_values(z[:ops.nX]), axis=0)
        if full_step and np.array_equal(new_idx, idx):
            converged = True      # Newton fixed point; res is roundoff floor
            break
        idx = new_idx
        K, rhs = ops.full_system(*ops.assemble_policy(idx))
        z_new = _linear_solve(K, rhs)
        iterations += 1

        step = z_new - z
        accepted = False
        for k in range(11):
            z_try = z + step / (2.0 ** k)
            res_try = ops.residual_norm(z_try)
            if res_try < res or res_try <= tol:
                z, res = z_try, res_try
                full_step = k == 0
                accepted = True
                break
        history.append(res)
        if not accepted:
            return _make_state(problem, z, idx, iterations, history, False)

    idx = np.argmax(ops.control_values(z[:ops.nX]), axis=0)
    return _make_state(problem, z, idx, iterations, history,
                       converged or res <= tol)


def nonlinear_residual(problem: MixedProblem, state: MixedState) -> float:
    """Dual-norm residual of the full semilinear system at a state."""
    ops = problem.ops()
    if state.vector is None or state.vector.shape != (ops.size,):
        raise ValueError("state does not match the problem dimensions")
    return ops.residual_norm(state.vector)
