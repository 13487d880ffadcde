"""A posteriori error estimator for states of the mixed HJB solver.

For a discrete pair (w_h, u_h) the estimator is

    eta = ||F_gamma[(w_h,u_h)]||^2 + sigma1 ||rot w_h||^2
          + sigma2 ||w_h - grad u_h||^2,

with the reliability bound

    |||(w - w_h, u - u_h)|||_lam^2
        <= 2 C_M^{-1} (C_M^{-1} term_F + term_rot + term_gap)

and the efficiency bound

    term_F / 2 + term_rot + term_gap
        <= (C_L + (1-delta)/2) |||(w - w_h, u - u_h)|||_lam^2,

where C_M = (1 - sqrt(1-delta))/4 and C_L is the Lipschitz constant of the
semilinear form.  All three terms are evaluated by quadrature with
element-local breakdowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .control import bellman_residual_per_control
from .mixed_solver import MixedProblem, MixedState

__all__ = [
    "EstimatorReport",
    "estimate",
    "monotonicity_constant",
    "lipschitz_constant",
]


def monotonicity_constant(delta: float) -> float:
    """C_M = (1 - sqrt(1-delta)) / 4."""
    return 0.25 * (1.0 - np.sqrt(1.0 - delta))


def lipschitz_constant(delta: float, lam: float, n: int = 2) -> float:
    """C_L = 2 + sqrt(2) sqrt(1-delta) + sigma1 + sigma2~ (1/2 + n lam/pi^2)."""
    root = np.sqrt(1.0 - delta)
    sigma1 = 1.0 - 0.5 * root
    sigma2_tilde = (1.0 - root) / 2.0 + 1.0 / (4.0 * (1.0 - root))
    return float(2.0 + np.sqrt(2.0) * root + sigma1
                 + sigma2_tilde * (0.5 + n * lam / np.pi ** 2))


@dataclass(frozen=True)
class EstimatorReport:
    """Global estimator value with its three terms and local breakdown."""

    eta: float
    term_F: float
    term_rot: float
    term_gap: float
    local: np.ndarray          # (n_elements, 3) columns F, rot, gap
    c_m: float
    c_l: float

    @property
    def sqrt_eta(self) -> float:
        return float(np.sqrt(self.eta))

    def reliability_bound(self) -> float:
        """Upper bound for |||(w - w_h, u - u_h)|||_lam^2."""
        return 2.0 / self.c_m * (self.term_F / self.c_m
                                 + self.term_rot + self.term_gap)

    def efficiency_lhs(self) -> float:
        """Left side term_F/2 + term_rot + term_gap of the efficiency bound."""
        return 0.5 * self.term_F + self.term_rot + self.term_gap


def estimate(problem: MixedProblem, state: MixedState,
             quad_order: int | None = None) -> EstimatorReport:
    """Evaluate the estimator for a solver state by quadrature."""
    if quad_order is None:
        quad_order = problem.quad_order
    if state.w.space is not problem.space_w \
            or state.u.space is not problem.space_u:
        raise ValueError("state fields do not belong to this problem")

    dw = fem.eval_at_qp(state.w, quad_order)
    du = fem.eval_at_qp(state.u, quad_order)
    ys = dw.points.reshape(-1, 2)
    shape = dw.weights.shape
    vals = bellman_residual_per_control(
        problem.family, problem.certificate, problem.frozen_x, ys,
        dw.gradients.reshape(-1, 2, 2), du.gradients.reshape(-1, 2),
        du.values.reshape(-1))
    F = np.max(vals, axis=0).reshape(shape)

    wq = dw.weights
    local_F = np.sum(wq * F ** 2, axis=1)
    local_rot = problem.sigma1 * np.sum(wq * dw.rot2d ** 2, axis=1)
    gap = dw.values - du.gradients
    local_gap = problem.sigma2 * np.sum(wq * np.sum(gap ** 2, axis=2), axis=1)

    local = np.column_stack([local_F, local_rot, local_gap])
    term_F, term_rot, term_gap = (float(local_F.sum()),
                                  float(local_rot.sum()),
                                  float(local_gap.sum()))
    delta, lam = problem.certificate.delta, problem.certificate.lam
    return EstimatorReport(
        eta=term_F + term_rot + term_gap,
        term_F=term_F, term_rot=term_rot, term_gap=term_gap, local=local,
        c_m=monotonicity_constant(delta),
        c_l=lipschitz_constant(delta, lam),
    )
