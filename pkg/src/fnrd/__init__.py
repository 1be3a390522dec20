"""Field-Noyes reaction-diffusion solver and convergence laboratory.

P1 Galerkin finite elements on structured dyadic meshes of the unit
interval/square, a second-order exponential Runge-Kutta integrator driven by
a generalized eigendecomposition of the (stiffness, mass) pencil, and study
harnesses that measure spatial, temporal, and first-step convergence orders
for nonsmooth initial data.
"""

__version__ = "0.1.0"

from .assembly import (SymSparseMatrix, assemble_mass, assemble_stiffness,
                       l2_project, project_nonlinearity)
from .errors import (BlowUpError, ConfigurationError, DecompositionError,
                     FnrdError, MeshMismatchError, NumericalError,
                     ProjectionError)
from .integrator import Context, State, build_context, erk2_step, integrate, \
    integrate_many
from .mesh import Mesh, build_mesh, dump_mesh, prolong
from .model import (DATUM_IDS, InitialDatum, ModelParams, RateRecord, eval_f,
                    expected_orders, get_datum, initial_datum)
from .spectral import (PencilSpectrum, SpeciesOperator, apply_operator_function,
                       decompose, fractional_norm, modal_transform, phi_scalar,
                       phi_values, sobolev_norm)
from .study import (ConvergenceTable, StudyConfig, TableRow, compute_error,
                    compute_reference, default_config, estimate_gamma,
                    make_initial_state, observed_order, precompute_references,
                    run_first_step_study, run_spatial_study,
                    run_temporal_study)

__all__ = [name for name in dir() if not name.startswith("_")]
