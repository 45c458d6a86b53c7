"""Space-time non-local multi-continua solver suite.

A numpy/scipy library for parabolic problems with time-dependent,
high-contrast, channelized coefficients: a fine-grid reference solver,
localized multiscale basis construction by constrained space-time energy
minimization, a non-local coarse problem marched causally in time, and the
error/decay diagnostics used by the convergence experiments.
"""

from .grid import (SpaceGrid, TimeGrid, SpaceTimeGrid, Region, build_grid,
                   block_region, full_region, oversample_space, oversample_time)
from .medium import (Box, Channel, Continuum, PartitionOfUnity, PermeabilityField,
                     build_pou, extract_continua, kappa_at, tilde_kappa_at)
from .forms import (FineSpace, assemble_a, assemble_b, assemble_c, assemble_d,
                    assemble_e, assemble_s, assemble_s_aux, rhs_f)
from .linsolve import Factorization, SingularMatrixError, factorize, solve_many
from .nlmc import (AuxiliaryBasis, CoarseSystem, Engine, LocalBasisSet,
                   assemble_coarse, build_aux, decay_profile, downscale, fit_decay,
                   project_aux, solve_coarse, solve_global, solve_local)
from .reference import ReferenceSolution, solve_reference
from .metrics import ErrorReport, norm, region_energy, relative_errors
from .cli import ExperimentConfig, RunResult, run_experiment, snapshot

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
