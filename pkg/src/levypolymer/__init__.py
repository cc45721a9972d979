"""Continuous-time directed polymers in Levy random environments on Z^d.

Partition functions by lattice solves and by path Monte Carlo, free-energy
and cumulant estimators, exponential tilting, and the machine-checkable
identities connecting them.
"""

__version__ = "0.1.0"

from .environment import (EnvironmentParams, EnvironmentRealization, LevyMeasure,
                          alpha, environment_from_json, environment_to_json,
                          log_weight_factor, parse_preset, sample_environment)
from .lattice import Field, LatticeBox
from .montecarlo import (Estimate, FreeEnergyPoint, annealed_check, estimate_Z,
                         free_energy_mc, hamiltonian)
from .solver import (ExtinctRealizationError, SolveRecord, SolverOptions,
                     certified_radius, endpoint_distribution, escape_bound,
                     martingale_W, partition_function, solve_p2p)
from .walk import (PolymerPath, RateVector, TiltBounds, cumulant, generator_apply,
                   kappa_bounds, rate_function_closed, rate_function_legendre,
                   sample_path, tilt, transition_probs)
from .deviations import (ComparisonReport, CumulantSample, DisorderReport,
                         RateEstimate, SandwichReport, comparison_check,
                         disorder_diagnostic, empirical_cumulant,
                         empirical_cumulant_ensemble, quenched_rate_estimate,
                         sandwich_check, tilting_identity_residual)
