"""Estimation and practical-identifiability tools for epidemic ODE models.

Subpackages by concern:

- ``ode``         fixed/adaptive Runge-Kutta integration + variational equations
- ``models``      SEIR, EAIHRD and reduced 4thA systems, symmetry maps, reduction
- ``noise``       level / increment observation-noise structures
- ``objectives``  deterministic errors, likelihoods, priors, posteriors
- ``estimators``  multistart optimization, bootstrap, t-walk MCMC, PSRF, thinning
- ``sensitivity`` loss-Hessian spectrum and eigengap diagnostics
- ``experiment``  config-driven studies, percentile bands, box stats, file output
- ``cli``         the ``epifit`` command line front end
"""

__version__ = "0.1.0"

from .ode import (
    IntegrationDivergedError,
    OdeSystem,
    SensitivityTrajectory,
    SolverConfig,
    TimeSeries,
    integrate,
    integrate_with_sensitivities,
)
from .models import (
    DegenerateSymmetryError,
    EaihrdParams,
    FourthAParams,
    ReductionUndefinedError,
    SeirParams,
    SymmetryPair,
    eaihrd_symmetry_pair,
    eaihrd_symmetry_partner,
    eaihrd_system,
    eaihrd_to_4tha,
    fourtha_system,
    seir_symmetry_pair,
    seir_symmetry_partner,
    seir_system,
    verify_symmetry,
)
from .noise import NoiseSpec, apply_increment_noise, apply_level_noise, apply_noise
from .objectives import (
    ObjectiveSpec,
    ObjectiveUndefinedError,
    PriorSpec,
    increments_view,
    log_sq_loss,
    neg_log_likelihood,
    neg_log_posterior,
    rel_sq_loss,
)
from .estimators import (
    EstimateEnsemble,
    FitProblem,
    FitResult,
    McmcChain,
    OptimizationFailedError,
    ParameterSpace,
    PsrfUndefinedError,
    bootstrap,
    multistart_optimize,
    psrf,
    thin_chain,
    twalk_sample,
)
from .sensitivity import HessianReport, eigengap, loss_hessian
from .experiment import (
    BandSummary,
    BoxStats,
    ExperimentConfig,
    ExperimentReport,
    box_stats,
    percentile_bands,
    run_experiment,
)
