"""wkamlab: weak KAM solutions, Riccati comparison and rigidity checks
on warped-product model manifolds."""

from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import (PathPolyline, PhaseState, Trajectory, action,
                       hamiltonian, integrate_minimizer, lagrangian,
                       minimize_action_fixed_endpoints, potential,
                       zero_energy_line, zero_energy_orbit)
from .geometry import (DomainError, ModelManifold, eigen_residual,
                       eigenfunction_g, laplace_beltrami_radial,
                       ricci_bound_margin, warp)
from .grids import GridField, RadialGrid
from .riccati import (comparison_bbar, comparison_check, comparison_k,
                      integrate_jacobi, integrate_riccati, rescale_unit_speed,
                      trace_inequality_margin, transport_frame)
from .rigidity import (flow_g_measured, flow_g_prediction,
                       fundamental_matrix_rigid, jacobian_B_check,
                       reconstruct_warp)
from .weakkam import (InapplicableError, LaxOleinikParams, anchored_solve,
                      conjugate_solve, harmonicity_residual, hj_residual,
                      lax_oleinik_step, line_defect, weak_kam_solve)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DomainError", "ExperimentConfig", "GridField",
    "InapplicableError", "LaxOleinikParams", "ModelManifold", "PathPolyline",
    "PhaseState", "RadialGrid", "Trajectory", "action", "anchored_solve",
    "comparison_bbar", "comparison_check", "comparison_k", "conjugate_solve",
    "eigen_residual", "eigenfunction_g", "flow_g_measured",
    "flow_g_prediction", "fundamental_matrix_rigid", "hamiltonian",
    "harmonicity_residual", "hj_residual", "integrate_jacobi",
    "integrate_minimizer", "integrate_riccati", "jacobian_B_check",
    "lagrangian", "laplace_beltrami_radial", "lax_oleinik_step",
    "line_defect", "load_config", "minimize_action_fixed_endpoints",
    "potential", "reconstruct_warp", "rescale_unit_speed",
    "ricci_bound_margin", "trace_inequality_margin", "transport_frame",
    "warp", "weak_kam_solve", "zero_energy_line", "zero_energy_orbit",
    "__version__",
]
