"""Approximate-corrector cell problems and the effective Hamiltonian.

For a frozen macroscopic point s, gradient argument p, Hessian argument R and
a regularization sigma > 0, the approximate corrector v solves the periodic
problem

    sigma v + sup_alpha { -A^alpha(s, .) : D^2 v - g^alpha } = 0,
    g^alpha = A^alpha(s, .) : R + b^alpha(s, .) . p + f^alpha(s, .),

which fits the periodic HJB framework with diffusion A(s, .), zero drift,
zeroth-order coefficient sigma and source g; its Cordes certificate is
(sigma * lam, delta) inherited from the base family.  The approximated
effective Hamiltonian is the cell average

    H(s, p, R; sigma, h) = -sigma * integral_Y v_h.

For the built-in benchmark family an exact closed-form reference

    H(R) = max{ -(int 1/a0)^-1 B:R, -(int 1/(a0+a1))^-1 B:R } - 1

is available with the harmonic means computed once by high-order tensor
Gauss quadrature.  Cell solves are cached on (family, s, p, R, sigma, mesh,
tolerance) with values rounded to 1e-12; the cache is guarded by a lock so
concurrent solves of distinct problems stay safe.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import mesh as mesh_mod
from .control import (BENCHMARK_B, CoefficientFamily, CordesCertificate,
                      _bench_a1, make_family)
from .estimator import EstimatorReport, estimate
from .mixed_solver import MixedState, howard_solve, make_mixed_problem

__all__ = [
    "CellProblemSpec",
    "EffectiveSample",
    "freeze_cell_family",
    "solve_cell",
    "exact_H",
    "clear_cell_cache",
    "BENCHMARK_R",
]

# Hessian sample point of the benchmark convergence experiments
BENCHMARK_R = np.array([[-2.0, 1.0], [1.0, -3.0]])
BENCHMARK_R.setflags(write=False)


@dataclass(frozen=True)
class CellProblemSpec:
    """Frozen data (s, p, R, sigma) of one approximate-corrector solve."""

    s: np.ndarray
    p: np.ndarray
    R: np.ndarray
    sigma: float
    family: CoefficientFamily
    certificate: CordesCertificate

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.R.shape != (2, 2) or not np.allclose(self.R, self.R.T):
            raise ValueError("R must be a symmetric 2x2 matrix")


@dataclass(frozen=True)
class EffectiveSample:
    """One evaluation of the approximated effective Hamiltonian."""

    value: float
    corrector: MixedState
    eta: EstimatorReport
    spec: CellProblemSpec
    mesh_N: int


def freeze_cell_family(spec: CellProblemSpec):
    """The y-only coefficient family of the corrector problem for ``spec``.

    Returns ``(family, certificate)`` where the family has diffusion
    A(s, .), zero drift, zeroth-order coefficient sigma and source
    g = A:R + b.p + f, and the certificate is (sigma * lam, delta).  The
    base margin is kept: dropping the drift term only loosens the left side
    of the Cordes inequality, so it remains a valid lower bound.
    """
    base = spec.family
    s, p, R, sigma = spec.s, spec.p, spec.R, spec.sigma

    def A(x, y, alpha):
        return base.A(s, y, alpha)

    def b(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (2,))

    def c(x, y, alpha):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape[:-1], sigma)

    def g(x, y, alpha):
        Am = base.A(s, y, alpha)
        bm = base.b(s, y, alpha)
        fm = base.f(s, y, alpha)
        return (np.sum(Am * R, axis=(-2, -1)) + np.sum(bm * p, axis=-1)
                + fm)

    frozen = make_family(A, b, c, g, controls=base.controls,
                         x_dependent=False,
                         affine_in_alpha=base.affine_in_alpha,
                         name=None)
    cert = CordesCertificate(
        lam=sigma * spec.certificate.lam,
        delta=spec.certificate.delta,
        margin=spec.certificate.margin,
        sample_description=spec.certificate.sample_description,
    )
    return frozen, cert


_cell_cache: dict = {}
_cache_lock = threading.Lock()


def clear_cell_cache() -> None:
    with _cache_lock:
        _cell_cache.clear()


def _cache_key(spec: CellProblemSpec, N, tol, quad_order, m_mode, degree):
    fam_id = spec.family.name or f"id{id(spec.family)}"
    rounded = tuple(round(float(v), 12) for v in
                    [*spec.s, *spec.p, *spec.R.ravel(), spec.sigma])
    return (fam_id, rounded, int(N), float(tol), int(quad_order),
            m_mode, int(degree))


def solve_cell(spec: CellProblemSpec, N: int, tol: float = 1e-10,
               quad_order: int = 4, m_mode: str = "trivial",
               degree: int = 1, max_iter: int = 50,
               use_cache: bool = True) -> EffectiveSample:
    """Solve the corrector problem on an N x N periodic cell mesh.

    Returns the EffectiveSample with value -sigma * integral_Y(v_h); the
    integral of the P_q corrector is exact (vertex-weight formula), so the
    only error sources are discretization and the solver tolerance.
    """
    key = _cache_key(spec, N, tol, quad_order, m_mode, degree)
    if use_cache:
        with _cache_lock:
            if key in _cell_cache:
                return _cell_cache[key]

    family, cert = freeze_cell_family(spec)
    cell_mesh = mesh_mod.build_uniform_mesh(N, "periodic")
    problem = make_mixed_problem(cell_mesh, family, cert,
                                 m_mode=m_mode, quad_order=quad_order,
                                 degree=degree)
    state = howard_solve(problem, tol=tol, max_iter=max_iter)
    value = -spec.sigma * float(state.u.integral()[0])
    report = estimate(problem, state)
    sample = EffectiveSample(value=value, corrector=state, eta=report,
                             spec=spec, mesh_N=int(N))
    if use_cache:
        with _cache_lock:
            _cell_cache[key] = sample
    return sample


# ----------------------------------------------------------------------------
# exact benchmark reference

_harmonic_cache: dict = {}


def _benchmark_harmonic_means(name: str, order: int = 48):
    """(int 1/a0)^-1 and (int 1/(a0+a1))^-1 by tensor Gauss quadrature."""
    key = (name, order)
    if key in _harmonic_cache:
        return _harmonic_cache[key]
    x, w = np.polynomial.legendre.leggauss(order)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    pts = np.stack([X1, X2], axis=-1)
    a0 = np.ones_like(X1)
    a1 = _bench_a1(pts) if name == "fo-benchmark" else np.zeros_like(X1)
    h0 = 1.0 / float(np.sum(W / a0))
    h1 = 1.0 / float(np.sum(W / (a0 + a1)))
    _harmonic_cache[key] = (h0, h1)
    return h0, h1


def exact_H(R, family_name: str = "fo-benchmark") -> float:
    """Closed-form effective Hamiltonian of the benchmark family.

    H(R) = max{-h0 B:R, -h1 B:R} - 1 with h0, h1 the harmonic integral
    means of a0 and a0 + a1.  Rejected for non-benchmark families.
    """
    if family_name not in ("fo-benchmark", "fo-benchmark-const"):
        raise ValueError(
            f"exact_H is only available for the benchmark families, "
            f"not {family_name!r}")
    R = np.asarray(R, dtype=float)
    if R.shape != (2, 2) or not np.allclose(R, R.T):
        raise ValueError("R must be a symmetric 2x2 matrix")
    h0, h1 = _benchmark_harmonic_means(family_name)
    t = float(np.sum(BENCHMARK_B * R))
    return max(-h0 * t, -h1 * t) - 1.0


def exact_H_batch(Rs: np.ndarray, family_name: str = "fo-benchmark"):
    """Vectorized exact_H with subgradients.

    Returns ``(values, grads)`` for a batch of symmetric matrices; the
    gradient of the active branch is -h* B (ties take the a0 branch).
    """
    if family_name not in ("fo-benchmark", "fo-benchmark-const"):
        raise ValueError("exact Hamiltonian requires a benchmark family")
    h0, h1 = _benchmark_harmonic_means(family_name)
    Rs = np.asarray(Rs, dtype=float)
    t = np.einsum("dc,edc->e", BENCHMARK_B, Rs)
    b0, b1 = -h0 * t, -h1 * t
    take1 = b1 > b0
    values = np.where(take1, b1, b0) - 1.0
    hstar = np.where(take1, h1, h0)
    grads = -hstar[:, None, None] * BENCHMARK_B[None, :, :]
    return values, grads
