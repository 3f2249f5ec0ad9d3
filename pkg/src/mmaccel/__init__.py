"""Micro-macro accelerated simulation of stochastic particle ensembles.

The method alternates short Euler-Maruyama bursts of a particle ensemble with
forward-Euler extrapolation of its leading moments and a matching step that
re-initializes the ensemble consistently with the extrapolated moments.  The
FENE dumbbell polymer model is included as the primary application, with the
polymer stress as the macroscopic observable of interest.
"""

from .acceleration import (AccelConfig, RunTrace, StepRecord,
                           UnrecoverableMatchingError, adapt_step, extrapolate,
                           macro_step, reference_run, run)
from .config import ConfigError, ExperimentSpec, load_config
from .ensemble import (MomentBasis, WeightedEnsemble, degeneracy,
                       effective_sample_size, kde_density, restrict,
                       scott_bandwidth, stratified_resample, stress,
                       weighted_average)
from .matching import (KLD, L2D, L2N, MatchConfig, MatchOutcome,
                       SolverFailureError, kld_reweight, l2d_reweight,
                       l2n_average, l2n_multipliers, match, newton_solve_kld,
                       newton_solve_l2d)
from .models import (DomainViolationError, FeneModel, SdeModel,
                     StagnationError, accept_reject_step, em_candidate_step,
                     fene_force, ornstein_uhlenbeck)
from .rng import RandomStreams

__version__ = "1.0.0"

__all__ = [
    "AccelConfig", "ConfigError", "DomainViolationError", "ExperimentSpec",
    "FeneModel", "KLD", "L2D", "L2N", "MatchConfig", "MatchOutcome",
    "MomentBasis", "RandomStreams", "RunTrace", "SdeModel",
    "SolverFailureError", "StagnationError", "StepRecord",
    "UnrecoverableMatchingError", "WeightedEnsemble", "accept_reject_step",
    "adapt_step", "degeneracy", "effective_sample_size", "em_candidate_step",
    "extrapolate", "fene_force", "kde_density", "kld_reweight",
    "l2d_reweight", "l2n_average", "l2n_multipliers", "load_config",
    "macro_step", "match", "newton_solve_kld", "newton_solve_l2d",
    "ornstein_uhlenbeck", "reference_run", "restrict", "run",
    "scott_bandwidth", "stratified_resample", "stress", "weighted_average",
]
