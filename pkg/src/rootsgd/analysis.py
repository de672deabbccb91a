"""Asymptotic-efficiency toolkit.

Computes the statistical lower-bound covariance, solves the constant-step
correction equation for the matrix that inflates it, simulates the auxiliary
linear process whose stationary covariance appears in that equation, and
estimates empirical covariances from replicate sets.

Matrix equations are flattened with the column-stacking vec convention, under
which ``kron(A, B) @ vec(X) = vec(B X A^T)``; for symmetric ``H`` and the
flattened Hessian-noise second moment ``T = E[kron(Xi, Xi)]`` the correction
equation

    Lam H + H Lam - eta E[Xi Lam Xi] - eta H Lam H = eta Sigma

becomes ``(kron(H, I) + kron(I, H) - eta T - eta kron(H, H)) vec(Lam) =
eta vec(Sigma)`` and is solved densely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import linalg
from .linalg import SingularMatrixError, check_symmetric, kron, unvec, vec
from .montecarlo import RootSgdMethod, run_replicates
from .optimizer import StepPlan, burn_in_length, init_state, burn_in_step
from .oracle import ProblemInstance, UnsupportedOperationError

__all__ = [
    "CovarianceReport",
    "EmpiricalCovariance",
    "HessianNoiseModel",
    "InsufficientDataError",
    "RateSlope",
    "SingularOperatorError",
    "TraceBoundReport",
    "correction_matrix",
    "correction_trace_bound",
    "coupling_diagnostic",
    "covariance_report",
    "cramer_rao",
    "empirical_covariance",
    "rate_slope",
    "simulate_y",
    "solve_lambda",
    "stationary_q",
]

LAMBDA_RESIDUAL_RTOL = 1e-10


class SingularOperatorError(RuntimeError):
    """The flattened correction operator is not invertible; the step size is
    outside the valid regime."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class HessianNoiseModel:
    """Hessian and noise moments at the optimum.

    ``xi_tensor`` is the d^2 x d^2 flattening of the fourth-order tensor
    ``E[Xi (x) Xi]`` with ``Xi`` the centered stochastic Hessian; it is the
    zero matrix when the stochastic Hessian is deterministic.
    """

    hstar: np.ndarray
    noise_cov: np.ndarray
    xi_tensor: np.ndarray
    provenance: str = "analytic"

    def __post_init__(self):
        d = self.hstar.shape[0]
        check_symmetric(self.hstar, "hstar")
        check_symmetric(self.noise_cov, "noise_cov")
        if self.xi_tensor.shape != (d * d, d * d):
            raise ValueError("xi_tensor must be d^2 x d^2")

    @property
    def dim(self) -> int:
        return self.hstar.shape[0]

    @classmethod
    def from_problem(cls, p: ProblemInstance) -> "HessianNoiseModel":
        if p.xi_second_moment is None:
            raise UnsupportedOperationError(
                f"problem {p.name!r} does not report a Hessian-noise tensor"
            )
        return cls(
            hstar=np.asarray(p.hstar),
            noise_cov=np.asarray(p.noise_cov),
            xi_tensor=np.asarray(p.xi_second_moment),
            provenance=p.provenance.kind,
        )

    @classmethod
    def from_ensemble(
        cls, hstar, noise_cov, xis: Sequence[np.ndarray], probs: Sequence[float]
    ) -> "HessianNoiseModel":
        """Exact model for a finite mixture of Hessian perturbations; handy
        for randomized solver tests without Monte Carlo."""
        hstar = np.asarray(hstar, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if not np.isclose(probs.sum(), 1.0) or np.any(probs < 0):
            raise ValueError("probs must be a probability vector")
        mean = sum(w * np.asarray(x, float) for w, x in zip(probs, xis))
        tensor = sum(
            w * kron(np.asarray(x, float) - mean, np.asarray(x, float) - mean)
            for w, x in zip(probs, xis)
        )
        return cls(
            hstar=hstar,
            noise_cov=np.asarray(noise_cov, dtype=float),
            xi_tensor=np.asarray(tensor, dtype=float),
        )

    def apply_xi(self, m) -> np.ndarray:
        """E[Xi M Xi] for a symmetric matrix M, via the flattened tensor."""
        d = self.dim
        out = unvec(self.xi_tensor @ vec(np.asarray(m, dtype=float)), d, d)
        return (out + out.T) / 2


def cramer_rao(hstar, noise_cov) -> np.ndarray:
    """Statistical lower-bound covariance ``H^{-1} Sigma H^{-1}`` computed by
    two dense solves."""
    hstar = check_symmetric(np.asarray(hstar, float), "hstar")
    noise_cov = check_symmetric(np.asarray(noise_cov, float), "noise_cov")
    try:
        factor = linalg.lu_factor(hstar)
    except SingularMatrixError as e:
        raise SingularMatrixError(f"hstar is singular: {e}") from e
    half = linalg.lu_solve(factor, noise_cov)
    out = linalg.lu_solve(factor, half.T)
    return (out + out.T) / 2


def _correction_operator(model: HessianNoiseModel, eta: float) -> np.ndarray:
    d = model.dim
    eye = np.eye(d)
    h = model.hstar
    return (
        kron(h, eye)
        + kron(eye, h)
        - eta * model.xi_tensor
        - eta * kron(h, h)
    )


def _solve_flattened(model: HessianNoiseModel, eta: float, rhs_matrix) -> np.ndarray:
    d = model.dim
    op = _correction_operator(model, eta)
    try:
        sol = linalg.solve_dense(op, vec(rhs_matrix))
    except SingularMatrixError as e:
        raise SingularOperatorError(
            f"correction operator singular at eta={eta}: {e}"
        ) from e
    out = unvec(sol, d, d)
    sym_gap = np.abs(out - out.T).max()
    if sym_gap > 1e-10 * (1.0 + np.abs(out).max()):
        raise SingularOperatorError(
            f"solution lost symmetry (gap {sym_gap:.2e}); eta={eta} is outside "
            "the valid regime"
        )
    return (out + out.T) / 2


def solve_lambda(model: HessianNoiseModel, eta: float) -> np.ndarray:
    """Unique symmetric solution of the constant-step correction equation.

    Requires ``eta < 2 / L``; the computed solution is residual-checked to
    1e-10 relative.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    lam = _solve_flattened(model, eta, eta * model.noise_cov)
    h = model.hstar
    residual = (
        lam @ h + h @ lam - eta * model.apply_xi(lam) - eta * h @ lam @ h
        - eta * model.noise_cov
    )
    scale = np.linalg.norm(eta * model.noise_cov)
    if np.linalg.norm(residual) > LAMBDA_RESIDUAL_RTOL * max(scale, 1e-300):
        raise SingularOperatorError(
            f"residual {np.linalg.norm(residual):.2e} exceeds tolerance; "
            f"eta={eta} is outside the valid regime"
        )
    return lam


def stationary_q(model: HessianNoiseModel, eta: float) -> np.ndarray:
    """Stationary covariance of the auxiliary linear process, solved from its
    own equation (not by rescaling the correction solution); satisfies
    ``Lambda_eta = eta^2 Q_eta``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return _solve_flattened(model, eta, model.noise_cov / eta)


def correction_matrix(model: HessianNoiseModel, lam) -> np.ndarray:
    """``H^{-1} E[Xi Lam Xi] H^{-1}``, the inflation on top of the
    lower-bound covariance."""
    inner = model.apply_xi(lam)
    factor = linalg.lu_factor(model.hstar)
    half = linalg.lu_solve(factor, inner)
    out = linalg.lu_solve(factor, half.T)
    return (out + out.T) / 2


@dataclass(frozen=True)
class TraceBoundReport:
    trace_actual: float
    trace_bound: float
    satisfied: bool


def correction_trace_bound(
    model: HessianNoiseModel,
    eta: float,
    mu: float,
    noise_lipschitz: float,
    sigma_star_sq: float,
) -> TraceBoundReport:
    """Check ``tr(H^{-1} E[Xi Lam Xi] H^{-1}) <= eta l_Xi^2 sigma*^2 / mu^3``."""
    lam = solve_lambda(model, eta)
    actual = float(np.trace(correction_matrix(model, lam)))
    bound = eta * noise_lipschitz**2 * sigma_star_sq / mu**3
    return TraceBoundReport(
        trace_actual=actual, trace_bound=bound, satisfied=actual <= bound + 1e-9
    )


# ---------------------------------------------------------------------------
# auxiliary linear process
# ---------------------------------------------------------------------------


@dataclass
class YTrace:
    y_final: np.ndarray
    second_moment: np.ndarray  # time average of y y^T over the averaging window
    averaged_steps: int


def simulate_y(
    p: ProblemInstance,
    eta: float,
    horizon: int,
    stream,
    y0=None,
    theta0=None,
    burn_in: Optional[int] = None,
    average_from: int = 0,
) -> YTrace:
    """Simulate ``y_t = y_{t-1} - eta H_t(theta*) y_{t-1} + eps_t(theta*)``.

    Start value: ``y0`` if given; otherwise, when ``theta0`` is given, the
    scaled burn-in average ``B * v_B`` of a fresh burn-in at ``theta0``
    (consuming ``burn_in`` extra samples); otherwise zero.  The trace records
    the time average of ``y y^T`` from step ``average_from`` on.
    """
    d = p.dim
    if y0 is not None:
        y = np.asarray(y0, dtype=float).copy()
    elif theta0 is not None:
        b = burn_in if burn_in is not None else burn_in_length(p.mu, eta)
        state = init_state(theta0)
        for _ in range(b):
            state = burn_in_step(state, stream.next(), p)
        y = b * state.v
    else:
        y = np.zeros(d)
    model = p._model
    if not hasattr(p, "stochastic_hessian"):
        raise UnsupportedOperationError(
            f"problem {p.name!r} does not expose a stochastic Hessian"
        )
    second = np.zeros((d, d))
    count = 0
    chunk = 512
    t = 0
    rows = np.empty((chunk, d))
    fast = hasattr(model, "hessian_apply_at_opt")
    while t < horizon:
        take = min(chunk, horizon - t)
        if fast:
            block = stream.take_block(take)
            eps_chunk = model.noise_at_opt(block)
            for c in range(take):
                step_block = tuple(col[c : c + 1] for col in block)
                hy = model.hessian_apply_at_opt(step_block, y[None, :])[0]
                y = y - eta * hy + eps_chunk[c]
                rows[c] = y
        else:
            for c in range(take):
                s = stream.next()
                hy = p.stochastic_hessian(p.theta_star, s) @ y
                y = y - eta * hy + p.noise_at(p.theta_star, s)
                rows[c] = y
        t += take
        active = rows[:take][max(0, average_from - (t - take)) :]
        if len(active):
            second += active.T @ active
            count += len(active)
    if count:
        second /= count
    return YTrace(y_final=y, second_moment=second, averaged_steps=count)


def coupling_diagnostic(
    p: ProblemInstance,
    eta: float,
    burn_in: int,
    horizon: int,
    probes,
    replicates: int,
    master_seed: int,
    theta0=None,
    workers: int = 1,
):
    """Monte Carlo table of ``E || t v_t - y_t ||^2`` at probed iterations,
    with the comparison process coupled to the optimizer on the same stream
    and started at ``B v_B``.  Returns ``(probe_ts, mean, se)``."""
    if p.supports_batch:
        method = RootSgdMethod(eta=eta, burn_in=burn_in, couple_y=True)
        res = run_replicates(
            p,
            method,
            horizon,
            replicates,
            master_seed,
            probes,
            theta0=theta0,
            workers=workers,
        )
        mean, se = res.mean_and_se("coupling_sq")
        return res.probe_ts, mean, se
    return _coupling_serial(p, eta, burn_in, horizon, probes, replicates,
                            master_seed, theta0)


def _coupling_serial(p, eta, burn_in, horizon, probes, replicates, master_seed, theta0):
    from .optimizer import finish_burn_in, step

    probe_list = sorted(set(int(t) for t in probes))
    vals = np.full((len(probe_list), replicates), np.nan)
    theta0 = p.theta_star if theta0 is None else np.asarray(theta0, dtype=float)
    for r in range(replicates):
        stream = p.stream(master_seed, r)
        state = init_state(theta0)
        for _ in range(burn_in):
            state = burn_in_step(state, stream.next(), p)
        state = finish_burn_in(state, eta)
        y = burn_in * state.v
        row = {t: i for i, t in enumerate(probe_list)}
        if burn_in in row:
            vals[row[burn_in], r] = 0.0
        for t in range(burn_in + 1, horizon + 1):
            s = stream.next()
            y = y - eta * (p.stochastic_hessian(p.theta_star, s) @ y) + p.noise_at(
                p.theta_star, s
            )
            state = step(state, s, p, eta)
            if t in row:
                e = t * state.v - y
                vals[row[t], r] = float(e @ e)
    mean = vals.mean(axis=1)
    se = (
        vals.std(axis=1, ddof=1) / np.sqrt(replicates)
        if replicates > 1
        else np.zeros_like(mean)
    )
    return np.asarray(probe_list, dtype=np.int64), mean, se


# ---------------------------------------------------------------------------
# empirical covariance and rate fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalCovariance:
    matrix: np.ndarray
    stderr: np.ndarray  # per-entry jackknife standard errors
    replicates: int


def empirical_covariance(errors) -> EmpiricalCovariance:
    """Sample covariance (divisor n-1) with jackknife standard errors."""
    errors = np.asarray(errors, dtype=float)
    if errors.ndim != 2 or errors.shape[0] < 2:
        raise InsufficientDataError("need at least two replicate vectors")
    n, d = errors.shape
    mean = errors.mean(axis=0)
    centered = errors - mean
    cov = centered.T @ centered / (n - 1)

    if n == 2:  # leave-one-out covariance is undefined
        stderr = np.full((d, d), np.inf)
        return EmpiricalCovariance(matrix=cov, stderr=stderr, replicates=n)

    # Leave-one-out covariances in closed form from the full sums.
    s1 = errors.sum(axis=0)
    s2 = np.einsum("ni,nj->ij", errors, errors)
    loo_mean = (s1[None, :] - errors) / (n - 1)
    outer_i = np.einsum("ni,nj->nij", errors, errors)
    loo_cov = (
        s2[None, :, :]
        - outer_i
        - (n - 1) * np.einsum("ni,nj->nij", loo_mean, loo_mean)
    ) / (n - 2)
    jack_mean = loo_cov.mean(axis=0)
    stderr = np.sqrt(
        (n - 1) / n * ((loo_cov - jack_mean) ** 2).sum(axis=0)
    )
    return EmpiricalCovariance(matrix=cov, stderr=stderr, replicates=n)


@dataclass(frozen=True)
class RateSlope:
    slope: float
    half_width: float  # 95% confidence half-width


def rate_slope(ts, values) -> RateSlope:
    """Least-squares slope of log(value) against log(t)."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(ts) != len(values) or len(ts) < 4:
        raise InsufficientDataError("need at least 4 points")
    if ts.max() / ts.min() < 10.0:
        raise InsufficientDataError("points must span at least one decade in t")
    if np.any(values <= 0) or np.any(ts <= 0):
        raise ValueError("rate fitting needs positive ts and values")
    x = np.log(ts)
    y = np.log(values)
    n = len(x)
    xbar = x.mean()
    sxx = ((x - xbar) ** 2).sum()
    slope = ((x - xbar) * (y - y.mean())).sum() / sxx
    intercept = y.mean() - slope * xbar
    resid = y - (intercept + slope * x)
    if n > 2:
        sigma_sq = (resid**2).sum() / (n - 2)
        se = np.sqrt(sigma_sq / sxx)
        half = float(stats.t.ppf(0.975, n - 2) * se)
    else:
        half = np.inf
    return RateSlope(slope=float(slope), half_width=half)


# ---------------------------------------------------------------------------
# covariance report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceReport:
    """Predicted vs empirical limiting covariance of sqrt(T) (theta_T - theta*)."""

    eta: float
    cramer_rao: np.ndarray
    lambda_eta: np.ndarray
    correction: np.ndarray
    predicted_total: np.ndarray
    empirical: EmpiricalCovariance
    frobenius_relative_gap: float
    trace_correction: float
    trace_bound: float


def covariance_report(
    model: HessianNoiseModel,
    eta: float,
    empirical: EmpiricalCovariance,
    mu: float,
    noise_lipschitz: float,
    sigma_star_sq: float,
) -> CovarianceReport:
    cr = cramer_rao(model.hstar, model.noise_cov)
    lam = solve_lambda(model, eta)
    corr = correction_matrix(model, lam)
    predicted = cr + corr
    for name, m in (("cramer_rao", cr), ("predicted_total", predicted)):
        evals = np.linalg.eigvalsh(m)
        if evals.min() < -1e-10 * max(np.trace(m), 1e-300):
            raise ValueError(f"{name} is not positive semidefinite")
    gap = float(
        np.linalg.norm(empirical.matrix - predicted) / np.linalg.norm(predicted)
    )
    return CovarianceReport(
        eta=eta,
        cramer_rao=cr,
        lambda_eta=lam,
        correction=corr,
        predicted_total=predicted,
        empirical=empirical,
        frobenius_relative_gap=gap,
        trace_correction=float(np.trace(corr)),
        trace_bound=eta * noise_lipschitz**2 * sigma_star_sq / mu**3,
    )
