"""Recursive one-over-t SGD: burn-in, recursive estimator, restarting.

The optimizer runs in two phases.  During burn-in (steps 1..B) only the
gradient estimator ``v`` moves: it accumulates the running average of
stochastic gradients at the frozen initial point.  The parameter step
activates at step B, which both completes the burn-in average and performs
the first move ``theta_B = theta_0 - eta * v_B``; from step B+1 onward each
step evaluates the current sample at the last two iterates and applies

    v_t = grad(theta_{t-1}; xi_t) + (t-1)/t * (v_{t-1} - grad(theta_{t-2}; xi_t))
    theta_t = theta_{t-1} - eta * v_t.

A single run consumes exactly ``T`` samples.  Restarting resets the
recursion counter on a fixed timestamp schedule so the initialization error
contracts geometrically across loops.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .linalg import guarded_ceil
from .oracle import ProblemInstance

__all__ = [
    "BURN_IN_NUMERATOR",
    "PhaseError",
    "RestartSchedule",
    "RootSgdState",
    "RunResult",
    "StepPlan",
    "burn_in_length",
    "burn_in_step",
    "finish_burn_in",
    "init_state",
    "max_step_size",
    "omega_max",
    "plan_for",
    "restart_schedule",
    "run",
    "run_with_restarts",
    "step",
    "step_hybrid_form",
]

BURN_IN = "burn_in"
RUNNING = "running"

# burn-in length is ceil(BURN_IN_NUMERATOR / (mu * eta))
BURN_IN_NUMERATOR = 24.0
# per-loop length under restarting: max(RESTART_OPT / (eta mu),
#                                       RESTART_STAT * sigma*^2 / G^2)
RESTART_OPT = 105.0
RESTART_STAT = 112.0


class PhaseError(RuntimeError):
    """An operation was applied in the wrong optimizer phase."""


@dataclass(frozen=True)
class RootSgdState:
    """First-order Markovian optimizer state.

    ``loop_counter`` is the step count within the current restart loop (equal
    to ``t`` for single-loop runs).  ``theta_prev2`` is arbitrary until the
    first post-burn-in step writes it; it is initialized to ``theta_prev``
    for reproducibility and never read before then.
    """

    t: int
    loop_counter: int
    theta_prev: np.ndarray
    theta_prev2: np.ndarray
    v: np.ndarray
    phase: str


def init_state(theta0) -> RootSgdState:
    theta0 = np.asarray(theta0, dtype=float).copy()
    return RootSgdState(
        t=0,
        loop_counter=0,
        theta_prev=theta0,
        theta_prev2=theta0.copy(),
        v=np.zeros_like(theta0),
        phase=BURN_IN,
    )


def max_step_size(p: ProblemInstance, setting: str) -> float:
    """Largest theory-valid constant step size for the given setting."""
    setting = setting.upper()
    if setting == "LSN":
        if p.noise_lipschitz is None:
            raise ValueError("LSN setting requires the noise-Lipschitz constant")
        cap = 1.0 / (4.0 * p.smoothness)
        if p.noise_lipschitz > 0:
            cap = min(cap, p.mu / (8.0 * p.noise_lipschitz**2))
        return cap
    if setting == "ISC":
        if p.individual_smoothness is None:
            raise ValueError("ISC setting requires the individual-smoothness constant")
        return 1.0 / (4.0 * p.individual_smoothness)
    raise ValueError(f"unknown setting {setting!r}; expected 'LSN' or 'ISC'")


def omega_max(p: ProblemInstance, setting: str) -> float:
    """Diagnostic constant paired with ``max_step_size``; no algorithmic role."""
    setting = setting.upper()
    if setting == "LSN":
        return 2.0 * p.noise_lipschitz**2 / p.mu**2
    if setting == "ISC":
        if p.individual_smoothness is None:
            raise ValueError("ISC setting requires the individual-smoothness constant")
        return 2.0 * p.individual_smoothness / p.mu
    raise ValueError(f"unknown setting {setting!r}; expected 'LSN' or 'ISC'")


def burn_in_length(mu: float, eta: float) -> int:
    if mu <= 0 or eta <= 0:
        raise ValueError("mu and eta must be positive")
    return guarded_ceil(BURN_IN_NUMERATOR / (mu * eta))


def sample_complexity(
    p: ProblemInstance, g0: float, eps: float, eta: float
) -> int:
    """Samples sufficient for expected squared gradient norm <= eps^2:
    ``max(74/(eta mu) * (g0/eps or 1), 56 sigma*^2 / eps^2)``, and never less
    than the burn-in length."""
    if g0 < 0 or eps <= 0 or eta <= 0:
        raise ValueError("need g0 >= 0, eps > 0, eta > 0")
    opt_term = 74.0 / (eta * p.mu) * max(g0 / eps, 1.0)
    stat_term = 56.0 * p.sigma_star_sq / eps**2
    return max(
        guarded_ceil(max(opt_term, stat_term)), burn_in_length(p.mu, eta)
    )


@dataclass(frozen=True)
class StepPlan:
    """Constant step size plus burn-in length.

    ``in_theory`` records whether the plan respects the step-size ceiling of
    its setting; free-mode plans with larger steps are allowed but tagged.
    """

    eta: float
    burn_in: int
    in_theory: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.burn_in < 1:
            raise ValueError("burn-in length must be >= 1")


def plan_for(
    p: ProblemInstance,
    setting: str = "LSN",
    eta: float | str = "max",
    burn_in: Optional[int] = None,
    strict: bool = True,
) -> StepPlan:
    """Resolve a step plan against a problem's constants.

    ``eta="max"`` picks the setting's ceiling.  In strict mode a larger step
    raises; otherwise the plan is tagged ``in_theory=False``.
    """
    cap = max_step_size(p, setting)
    eta_val = cap if eta == "max" else float(eta)
    in_theory = eta_val <= cap * (1 + 1e-12)
    if strict and not in_theory:
        raise ValueError(
            f"eta={eta_val} exceeds the {setting} ceiling {cap:.6g}; "
            "use strict=False for an out-of-theory run"
        )
    b = burn_in_length(p.mu, eta_val) if burn_in is None else int(burn_in)
    return StepPlan(eta=eta_val, burn_in=b, in_theory=in_theory)


def burn_in_step(state: RootSgdState, sample, p: ProblemInstance) -> RootSgdState:
    """One burn-in step: fold the gradient at the frozen point into the
    running average; the iterate does not move."""
    if state.phase != BURN_IN:
        raise PhaseError("burn_in_step outside the burn-in phase")
    g = p.stochastic_grad(state.theta_prev, sample)
    s = state.loop_counter + 1
    v = state.v + (g - state.v) / s
    return replace(state, t=state.t + 1, loop_counter=s, v=v)


def finish_burn_in(state: RootSgdState, eta: float) -> RootSgdState:
    """Activate the parameter update at step B: take the first move using the
    burn-in average and switch phases.  Consumes no sample."""
    if state.phase != BURN_IN:
        raise PhaseError("finish_burn_in outside the burn-in phase")
    theta = state.theta_prev - eta * state.v
    return replace(
        state,
        theta_prev=theta,
        theta_prev2=state.theta_prev,
        phase=RUNNING,
    )


def step(
    state: RootSgdState, sample, p: ProblemInstance, eta: float
) -> RootSgdState:
    """One running step; both gradient evaluations use the same sample."""
    if state.phase != RUNNING:
        raise PhaseError("step outside the running phase")
    s = state.loop_counter + 1
    g1 = p.stochastic_grad(state.theta_prev, sample)
    g2 = p.stochastic_grad(state.theta_prev2, sample)
    v = g1 + ((s - 1) / s) * (state.v - g2)
    theta = state.theta_prev - eta * v
    return RootSgdState(
        t=state.t + 1,
        loop_counter=s,
        theta_prev=theta,
        theta_prev2=state.theta_prev,
        v=v,
        phase=RUNNING,
    )


def step_hybrid_form(
    state: RootSgdState, sample, p: ProblemInstance, eta: float
) -> RootSgdState:
    """Equivalent rewrite of :func:`step` as a 1/s mixture of the plain
    stochastic gradient and the recursive gradient; agrees with :func:`step`
    up to floating-point reassociation."""
    if state.phase != RUNNING:
        raise PhaseError("step outside the running phase")
    s = state.loop_counter + 1
    g1 = p.stochastic_grad(state.theta_prev, sample)
    g2 = p.stochastic_grad(state.theta_prev2, sample)
    v = (1.0 / s) * g1 + ((s - 1) / s) * (state.v + g1 - g2)
    theta = state.theta_prev - eta * v
    return RootSgdState(
        t=state.t + 1,
        loop_counter=s,
        theta_prev=theta,
        theta_prev2=state.theta_prev,
        v=v,
        phase=RUNNING,
    )


@dataclass
class TraceRecord:
    t: int
    theta: np.ndarray
    v: np.ndarray
    z: np.ndarray  # v_t - grad F(theta_{t-1})
    grad_norm_sq: float
    dist_sq: float
    decomposition_rhs: Optional[np.ndarray] = None  # (1/t) M + (B/t) z_B + (1/t) Psi


@dataclass
class RunResult:
    theta: np.ndarray
    state: RootSgdState
    trace: list[TraceRecord]
    samples_used: int


def _record(
    p: ProblemInstance,
    state: RootSgdState,
    theta_before: np.ndarray,
    rhs: Optional[np.ndarray],
) -> TraceRecord:
    g = p.population_grad(state.theta_prev)
    z = state.v - p.population_grad(theta_before)
    diff = state.theta_prev - p.theta_star
    return TraceRecord(
        t=state.t,
        theta=state.theta_prev.copy(),
        v=state.v.copy(),
        z=z,
        grad_norm_sq=float(g @ g),
        dist_sq=float(diff @ diff),
        decomposition_rhs=None if rhs is None else rhs.copy(),
    )


def run(
    p: ProblemInstance,
    theta0,
    plan: StepPlan,
    horizon: int,
    stream,
    probes: Optional[Iterable[int]] = None,
    track_decomposition: bool = False,
    use_hybrid_form: bool = False,
) -> RunResult:
    """Run ROOT-SGD for ``horizon`` samples (burn-in included).

    ``probes`` selects iteration indices at which the trace records
    ``theta_t``, ``v_t`` and ``z_t``; memory stays O(#probes).  With
    ``track_decomposition`` the trace also carries the martingale
    decomposition value ``(1/t) M_t + (B/t) z_B + (1/t) Psi_t`` so callers can
    check it against the recorded ``z_t`` exactly.
    """
    b = plan.burn_in
    if horizon < b:
        raise ValueError(f"horizon {horizon} is shorter than the burn-in {b}")
    probe_set = frozenset(int(t) for t in probes) if probes else frozenset()
    stepper = step_hybrid_form if use_hybrid_form else step

    state = init_state(theta0)
    trace: list[TraceRecord] = []
    taken0 = getattr(stream, "samples_taken", 0)

    m_sum = None
    psi_sum = None
    z_b = None

    for t in range(1, horizon + 1):
        theta_before = state.theta_prev
        if t <= b:
            state = burn_in_step(state, stream.next(), p)
            if t == b:
                if track_decomposition:
                    z_b = state.v - p.population_grad(theta_before)
                    m_sum = np.zeros_like(z_b)
                    psi_sum = np.zeros_like(z_b)
                state = finish_burn_in(state, plan.eta)
        else:
            xi = stream.next()
            if track_decomposition:
                e1 = p.noise_at(state.theta_prev, xi)
                e2 = p.noise_at(state.theta_prev2, xi)
                s = state.loop_counter + 1
                m_sum = m_sum + e1
                psi_sum = psi_sum + (s - 1) * (e1 - e2)
            state = stepper(state, xi, p, plan.eta)
        if t in probe_set:
            rhs = None
            if track_decomposition and z_b is not None and t >= b:
                rhs = (m_sum + b * z_b + psi_sum) / t
            trace.append(_record(p, state, theta_before, rhs))

    samples = getattr(stream, "samples_taken", taken0 + horizon) - taken0
    return RunResult(
        theta=state.theta_prev.copy(), state=state, trace=trace, samples_used=samples
    )


@dataclass(frozen=True)
class RestartSchedule:
    """Timestamps and per-loop gradient-norm targets for restarting.

    ``targets[k]`` is G_k^2 (targets[0] = G_0^2); ``timestamps[k]`` is
    Delta_k with ``timestamps[0] = 0``.  Loop k covers samples
    ``timestamps[k-1]+1 .. timestamps[k]``.
    """

    loop_count: int
    targets: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        if len(self.targets) != self.loop_count + 1:
            raise ValueError("need loop_count + 1 targets")
        if len(self.timestamps) != self.loop_count + 1 or self.timestamps[0] != 0:
            raise ValueError("timestamps must start at 0 with loop_count entries after")
        if np.any(np.diff(self.timestamps) <= 0) and self.loop_count > 0:
            raise ValueError("timestamps must be strictly increasing")

    @property
    def total_samples(self) -> int:
        return int(self.timestamps[-1])


def restart_schedule(
    p: ProblemInstance, g0_sq: float, eps_sq: float, eta: float
) -> RestartSchedule:
    """Loop count, halving targets and timestamps for restarting.

    K = ceil(log2(G_0^2 / eps^2 or 1)); each loop halves the target and lasts
    max(105 / (eta mu), 112 sigma*^2 / G_{k-1}^2) samples, rounded up.
    """
    if g0_sq <= 0 or eps_sq <= 0 or eta <= 0:
        raise ValueError("g0_sq, eps_sq and eta must be positive")
    ratio = max(g0_sq / eps_sq, 1.0)
    k = max(guarded_ceil(np.log2(ratio)), 0)
    targets = g0_sq * 0.5 ** np.arange(k + 1)
    stamps = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        length = max(
            RESTART_OPT / (eta * p.mu), RESTART_STAT * p.sigma_star_sq / targets[i - 1]
        )
        stamps[i] = stamps[i - 1] + guarded_ceil(length)
    return RestartSchedule(loop_count=k, targets=targets, timestamps=stamps)


def run_with_restarts(
    p: ProblemInstance,
    theta0,
    eta: float,
    schedule: RestartSchedule,
    stream,
    probes: Optional[Iterable[int]] = None,
) -> RunResult:
    """Restarted ROOT-SGD: at each timestamp the recursion counter resets and
    the loop re-enters burn-in at the current iterate.  Probe indices are
    global sample counts."""
    probe_set = frozenset(int(t) for t in probes) if probes else frozenset()
    b = burn_in_length(p.mu, eta)
    plan = StepPlan(eta=eta, burn_in=b)
    theta = np.asarray(theta0, dtype=float).copy()
    trace: list[TraceRecord] = []
    total = 0
    state = init_state(theta)
    for k in range(1, schedule.loop_count + 1):
        length = int(schedule.timestamps[k] - schedule.timestamps[k - 1])
        if length < b:
            raise ValueError(
                f"loop {k} of length {length} is shorter than the burn-in {b}"
            )
        offset = total
        inner_probes = [t - offset for t in probe_set if offset < t <= offset + length]
        res = run(p, theta, plan, length, stream, probes=inner_probes)
        for rec in res.trace:
            rec.t += offset
        trace.extend(res.trace)
        theta = res.theta
        state = res.state
        total += length
    trace.sort(key=lambda r: r.t)
    return RunResult(theta=theta, state=state, trace=trace, samples_used=total)
