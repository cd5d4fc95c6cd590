"""Mean field game solvers on viable (invariant) bounded domains.

Modules: ``geometry`` (domains, distances, barriers, grids), ``models``
(diffusions, Hamiltonians, couplings), ``invariance`` (sampled boundary
inequalities), ``hjb`` and ``fp`` (discrete solvers), ``mfg`` (coupled
iteration and certificates), ``sde`` (Monte Carlo viability) and ``cli``.
"""

from .errors import *  # noqa: F401,F403
from .fields import DensityField, MaskedGrid, SpaceTimeField, read_field, write_field
from .fp import boundary_mass, dual_uniqueness_identity, epsilon_continuation_fp, mass_trace, solve_fp
from .geometry import DomainSpec, box, build_barrier, disk, grid_masks, interval, signed_distance
from .hjb import (
    HJBConfig,
    epsilon_continuation,
    lipschitz_estimate,
    max_principle_bound,
    semiconcavity_estimate,
    solve_hjb,
)
from .invariance import (
    InvarianceReport,
    check_fp_invariance,
    check_generalized,
    check_hjb_invariance,
    check_sde_invariance,
    fit_constant,
)
from .mfg import MFGConfig, MFGProblem, MFGSolution, duality_gap, m_bound_check, solve_mfg
from .sde import SDEConfig, empirical_density, feedback_drift, lyapunov_check, simulate, sweep_dt

__version__ = "0.1.0"
