"""Mixed finite elements for periodic HJB problems and their homogenization.

The package solves periodic Hamilton-Jacobi-Bellman cell problems under the
Cordes condition with a stabilized mixed P1 method driven by policy
iteration, evaluates the approximated effective Hamiltonian from the
approximate correctors, and solves the homogenized Dirichlet problem with a
two-scale least-squares scheme.  See the README for the experiment CLI.
"""

from .control import (CoefficientFamily, ControlGrid, CordesCertificate,
                      bellman_max, cordes_slack, gamma_at, get_family,
                      l_lambda, make_control_grid, make_family,
                      select_lambda)
from .effective_solver import (EffectiveSolution, TwoScaleConfig,
                               averaged_hamiltonian, discrete_hessian,
                               linear_effective_solution, solve_effective,
                               solve_eps_problem)
from .estimator import EstimatorReport, estimate
from .fem import (FeFunction, FunctionSpace, build_space, eval_at_qp,
                  interpolate, l2_project, triple_norm)
from .homogenization import (CellProblemSpec, EffectiveSample, exact_H,
                             freeze_cell_family, solve_cell)
from .mesh import Mesh, barycenter, build_uniform_mesh
from .mixed_solver import (MixedProblem, MixedState, assemble_policy_system,
                           howard_solve, make_mixed_problem,
                           nonlinear_residual)

__version__ = "0.1.0"

__all__ = [
    "Mesh", "build_uniform_mesh", "barycenter",
    "FunctionSpace", "FeFunction", "build_space", "interpolate",
    "eval_at_qp", "triple_norm", "l2_project",
    "CoefficientFamily", "ControlGrid", "CordesCertificate",
    "make_control_grid", "make_family", "cordes_slack", "select_lambda",
    "gamma_at", "bellman_max", "l_lambda", "get_family",
    "MixedProblem", "MixedState", "make_mixed_problem",
    "assemble_policy_system", "howard_solve", "nonlinear_residual",
    "EstimatorReport", "estimate",
    "CellProblemSpec", "EffectiveSample", "freeze_cell_family",
    "solve_cell", "exact_H",
    "TwoScaleConfig", "EffectiveSolution", "discrete_hessian",
    "averaged_hamiltonian", "solve_effective", "solve_eps_problem",
    "linear_effective_solution",
]
