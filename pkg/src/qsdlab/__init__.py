"""Quasi-stationary distributions of absorbed Markov chains on finite or truncated spaces."""
from .kernel import (Dist, DimensionError, ExtinctionError, HittingMoment, QsdError, StateSpace,
                     SubKernel, apply, evolve_conditional, hitting_moment, read_kernel, survival,
                     survivor_set, tv_distance, write_kernel)
from .spectral import (PeriodicityError, QsdSolution, SolverError, classify_eigenpair, estimate_R,
                       fit_convergence, q_process, solve_qsd)

__version__ = "0.1.0"
