"""Drift-preserving splitting integrators for stochastic Poisson systems with additive noise."""

from driftlab.harness import (
    ConvergenceReport,
    Mode,
    Observable,
    TraceReport,
    fit_slope,
    run_strong,
    run_trace,
    run_weak,
)
from driftlab.integrators import (
    NonConvergence,
    SchemeId,
    SolverSettings,
    StepDiagnostics,
    averaged_gradient,
    bem_step,
    dp_step,
    em_step,
    ep_midstep,
    split_det_step,
    stm_step,
)
from driftlab.models import (
    CasimirForm,
    NoiseModel,
    SystemModel,
    exact_oscillator_moments,
    make_model,
    make_oscillator,
    make_pendulum,
    make_rigid_body,
    predicted_casimir,
    predicted_energy,
)
from driftlab.stochastic import BrownianPath, coarsen, sample_path

__version__ = "0.1.0"
