"""Recursive one-over-t SGD with burn-in and restarting, reference baselines,
and an asymptotic-covariance analysis toolkit, plus a seeded Monte Carlo
experiment harness."""

from . import analysis, baselines, harness, linalg, montecarlo, optimizer, oracle
from .analysis import (
    CovarianceReport,
    HessianNoiseModel,
    correction_trace_bound,
    coupling_diagnostic,
    covariance_report,
    cramer_rao,
    empirical_covariance,
    rate_slope,
    simulate_y,
    solve_lambda,
    stationary_q,
)
from .baselines import SgdState, StepSizeSchedule, prj_update, run_sgd, sgd_step
from .montecarlo import (
    MonteCarloResult,
    RootSgdMethod,
    SgdMethod,
    YProcessMethod,
    run_replicates,
)
from .optimizer import (
    RestartSchedule,
    RootSgdState,
    StepPlan,
    burn_in_length,
    burn_in_step,
    max_step_size,
    omega_max,
    plan_for,
    restart_schedule,
    run,
    run_with_restarts,
    step,
    step_hybrid_form,
)
from .oracle import (
    ProblemInstance,
    make_linear_regression,
    make_logistic_regression,
    make_noisy_quadratic,
)

__version__ = "0.1.0"
