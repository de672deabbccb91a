"""Reference methods: plain SGD and iterate-averaged (PRJ) SGD."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .oracle import ProblemInstance

__all__ = [
    "SgdState",
    "StepSizeSchedule",
    "prj_update",
    "run_sgd",
    "sgd_step",
]


@dataclass(frozen=True)
class StepSizeSchedule:
    """Constant or polynomially decaying step sizes ``c * t**(-alpha)``.

    ``alpha`` must lie in (0.5, 1) for the decaying family, the range under
    which averaged SGD attains its optimal limiting covariance.
    """

    c: float
    alpha: float = 0.0  # 0 means constant

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("step-size scale must be positive")
        if self.alpha != 0.0 and not (0.5 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0.5, 1) for decaying steps")

    def at(self, t: int) -> float:
        if self.alpha == 0.0:
            return self.c
        return self.c * t**-self.alpha


@dataclass(frozen=True)
class SgdState:
    t: int
    theta: np.ndarray
    average: np.ndarray  # running mean of theta_1..theta_t


def init_sgd_state(theta0) -> SgdState:
    theta0 = np.asarray(theta0, dtype=float).copy()
    return SgdState(t=0, theta=theta0, average=theta0.copy())


def sgd_step(state: SgdState, sample, p: ProblemInstance, eta_t: float) -> SgdState:
    g = p.stochastic_grad(state.theta, sample)
    return replace(state, t=state.t + 1, theta=state.theta - eta_t * g)


def prj_update(state: SgdState) -> SgdState:
    """Fold the current iterate into the running mean:
    ``avg_t = (1/t) theta_t + (t-1)/t avg_{t-1}``.  Call once per sgd_step."""
    t = state.t
    avg = (1.0 / t) * state.theta + ((t - 1) / t) * state.average
    return replace(state, average=avg)


@dataclass
class SgdRunResult:
    theta: np.ndarray
    average: np.ndarray
    trace: list[tuple[int, np.ndarray, np.ndarray]]  # (t, theta_t, avg_t)
    samples_used: int


def run_sgd(
    p: ProblemInstance,
    theta0,
    schedule: StepSizeSchedule,
    horizon: int,
    stream,
    probes: Optional[Iterable[int]] = None,
    average: bool = True,
    discard: int = 0,
) -> SgdRunResult:
    """Plain or iterate-averaged SGD for ``horizon`` samples.

    Averaging starts at t = 1 by default; ``discard`` drops that many leading
    iterates from the running mean (off by default).
    """
    probe_set = frozenset(int(t) for t in probes) if probes else frozenset()
    state = init_sgd_state(theta0)
    trace = []
    taken0 = getattr(stream, "samples_taken", 0)
    for t in range(1, horizon + 1):
        state = sgd_step(state, stream.next(), p, schedule.at(t))
        if average:
            if t <= discard:
                state = replace(state, average=state.theta.copy())
            elif discard:
                k = t - discard
                avg = (1.0 / k) * state.theta + ((k - 1) / k) * state.average
                state = replace(state, average=avg)
            else:
                state = prj_update(state)
        if t in probe_set:
            trace.append((t, state.theta.copy(), state.average.copy()))
    samples = getattr(stream, "samples_taken", taken0 + horizon) - taken0
    return SgdRunResult(
        theta=state.theta.copy(),
        average=state.average.copy(),
        trace=trace,
        samples_used=samples,
    )
