"""Stochastic optimization problems with analytically known constants.

A :class:`ProblemInstance` bundles a sampling oracle with the constants the
theory needs (optimum, strong convexity, smoothness, noise covariance at the
optimum, the flattened Hessian-noise second moment, ...).  Three synthetic
generators are provided:

* :func:`make_noisy_quadratic` -- random-Hessian quadratics, the canonical
  strongly convex test instance,
* :func:`make_linear_regression` -- Gaussian-design least squares, for which
  the limiting covariance has closed form,
* :func:`make_logistic_regression` -- a nonlinear strongly convex instance
  defined over a frozen evaluation sample so that its optimum and moments
  are exactly computable.

Sampling is counter-based: each replicate owns an independent Philox stream
derived from ``(master_seed, replicate_index)``.  Draws happen in fixed-size
blocks (``SampleStream.BLOCK``) so that a sample-by-sample consumer and a
vectorized block consumer see bit-identical samples from the same stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .linalg import check_symmetric

__all__ = [
    "DimensionMismatchError",
    "InvalidProblemError",
    "UnsupportedOperationError",
    "LogisticSample",
    "ProblemInstance",
    "Provenance",
    "QuadraticSample",
    "RegressionSample",
    "SampleStream",
    "make_linear_regression",
    "make_logistic_regression",
    "make_noisy_quadratic",
]


class DimensionMismatchError(ValueError):
    pass


class InvalidProblemError(ValueError):
    pass


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Provenance:
    """How the reported constants were obtained."""

    kind: str  # "analytic" | "monte_carlo" | "frozen_sample"
    sample_count: Optional[int] = None
    hstar_stderr: float = 0.0  # max entrywise standard error of H*
    tensor_stderr: float = 0.0  # max entrywise standard error of E[Xi (x) Xi]


@dataclass(frozen=True)
class QuadraticSample:
    """One draw of a noisy quadratic: gradient is ``a @ theta - b``."""

    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class RegressionSample:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class LogisticSample:
    x: np.ndarray
    y: float  # label in {-1, +1}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


def _cholesky_psd(a: np.ndarray, name: str) -> np.ndarray:
    """Cholesky factor of a symmetric PSD matrix, via eigendecomposition so
    that exactly singular covariances are accepted."""
    a = check_symmetric(a, name)
    w, v = np.linalg.eigh(a)
    if w.min() < -1e-12 * max(1.0, w.max()):
        raise InvalidProblemError(f"{name} is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


def _symmetric_from_flat(u: np.ndarray, d: int) -> np.ndarray:
    """Fill symmetric (n, d, d) matrices from flat (n, d(d+1)/2) entries."""
    n = u.shape[0]
    s = np.zeros((n, d, d))
    iu = np.triu_indices(d)
    s[:, iu[0], iu[1]] = u
    s[:, iu[1], iu[0]] = u
    return s


def _clip_eigenvalues(a: np.ndarray, floor: float) -> np.ndarray:
    """Shift eigenvalues of a batch of symmetric matrices up to ``floor``."""
    w, v = np.linalg.eigh(a)
    if np.all(w[:, 0] >= floor):
        return a
    w = np.maximum(w, floor)
    return np.einsum("nik,nk,njk->nij", v, w, v)


class SampleStream:
    """Per-replicate sample source with block-buffered draws.

    The raw random draws always happen in blocks of ``BLOCK`` samples; both
    :meth:`next` and :meth:`take_block` consume from the same buffer, so a
    serial run and a vectorized run on the same stream see identical samples.
    """

    BLOCK = 256

    def __init__(self, model, rng: np.random.Generator):
        self._model = model
        self._rng = rng
        self._buf: tuple[np.ndarray, ...] | None = None
        self._pos = 0
        self.samples_taken = 0

    def _refill(self) -> None:
        self._buf = self._model.build_block(self._rng, self.BLOCK)
        self._pos = 0

    def next(self):
        """Draw the next :class:`Sample`."""
        if self._buf is None or self._pos >= self.BLOCK:
            self._refill()
        sample = self._model.sample_at(self._buf, self._pos)
        self._pos += 1
        self.samples_taken += 1
        return sample

    def take_block(self, n: int) -> tuple[np.ndarray, ...]:
        """Return the next ``n`` samples as stacked arrays."""
        parts = []
        remaining = n
        while remaining > 0:
            if self._buf is None or self._pos >= self.BLOCK:
                self._refill()
            take = min(remaining, self.BLOCK - self._pos)
            parts.append(
                tuple(a[self._pos : self._pos + take] for a in self._buf)
            )
            self._pos += take
            remaining -= take
        self.samples_taken += n
        if len(parts) == 1:
            return parts[0]
        return tuple(np.concatenate(cols, axis=0) for cols in zip(*parts))


def _replicate_seed(master_seed: int, replicate: int) -> np.random.SeedSequence:
    # Two-element spawn keys keep run streams disjoint from the single-element
    # keys used internally by the generators.
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(replicate, 0))


@dataclass(frozen=True)
class ProblemInstance:
    """A stochastic objective together with its analysis constants.

    Immutable after construction; safe to share across workers.  ``mu`` and
    ``smoothness`` are valid strong-convexity / smoothness constants of the
    population objective, ``noise_lipschitz`` is the mean-squared Lipschitz
    constant of the gradient noise, and ``xi_second_moment`` stores
    ``E[Xi (x) Xi]`` at the optimum as a d^2 x d^2 matrix under the
    column-stacking vec convention.
    """

    name: str
    dim: int
    theta_star: np.ndarray
    mu: float
    smoothness: float
    noise_lipschitz: float
    sigma_star_sq: float
    hstar: np.ndarray
    noise_cov: np.ndarray
    provenance: Provenance
    individual_smoothness: Optional[float] = None
    hessian_fourth_root: Optional[float] = None
    hessian_lipschitz_in_mean: Optional[float] = None
    xi_second_moment: Optional[np.ndarray] = None
    xi_square: Optional[np.ndarray] = None
    _model: object = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if not (0.0 < self.mu <= self.smoothness):
            raise InvalidProblemError(
                f"need 0 < mu <= L, got mu={self.mu}, L={self.smoothness}"
            )

    # -- sampling ---------------------------------------------------------

    def stream(self, master_seed: int, replicate: int = 0) -> SampleStream:
        """Independent sample stream for one replicate."""
        rng = np.random.Generator(
            np.random.Philox(_replicate_seed(master_seed, replicate))
        )
        return SampleStream(self._model, rng)

    # -- oracle evaluations -------------------------------------------------

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(
                f"theta has shape {theta.shape}, expected ({self.dim},)"
            )
        return theta

    def stochastic_grad(self, theta, sample) -> np.ndarray:
        """Per-sample gradient; deterministic given ``(theta, sample)``."""
        return self._model.grad(self._check_theta(theta), sample)

    def population_grad(self, theta) -> np.ndarray:
        return self._model.population_grad(self._check_theta(theta))

    def noise_at(self, theta, sample) -> np.ndarray:
        theta = self._check_theta(theta)
        return self._model.grad(theta, sample) - self._model.population_grad(theta)

    def stochastic_hessian(self, theta, sample) -> np.ndarray:
        return self._model.hessian(self._check_theta(theta), sample)

    def grad_norm_sq(self, theta) -> float:
        g = self.population_grad(theta)
        return float(g @ g)

    @property
    def supports_batch(self) -> bool:
        """Whether the vectorized replicate engine can drive this family."""
        return self._model.BATCHABLE


# ---------------------------------------------------------------------------
# noisy quadratic
# ---------------------------------------------------------------------------


class _QuadraticModel:
    BATCHABLE = True

    def __init__(self, abar_base, scale, clip_floor, grad_chol, theta_star, hbar):
        self.abar_base = abar_base
        self.scale = float(scale)
        self.clip_floor = float(clip_floor)
        self.grad_chol = grad_chol
        self.theta_star = theta_star
        self.hbar = hbar  # E[A] after clipping; population Hessian
        self.dim = theta_star.shape[0]
        self._flat = self.dim * (self.dim + 1) // 2

    def build_block(self, rng: np.random.Generator, n: int):
        d = self.dim
        if self.scale == 0.0:
            a = np.broadcast_to(self.abar_base, (n, d, d))
        else:
            u = 2.0 * rng.random((n, self._flat)) - 1.0
            s = _symmetric_from_flat(u, d)
            a = _clip_eigenvalues(self.abar_base + self.scale * s, self.clip_floor)
        w = rng.standard_normal((n, d)) @ self.grad_chol.T
        b = np.einsum("nij,j->ni", a, self.theta_star) + w
        return a, b

    def sample_at(self, block, i: int) -> QuadraticSample:
        a, b = block
        return QuadraticSample(a=a[i].copy(), b=b[i].copy())

    def grad(self, theta, sample: QuadraticSample) -> np.ndarray:
        return sample.a @ theta - sample.b

    def hessian(self, theta, sample: QuadraticSample) -> np.ndarray:
        return sample.a

    def population_grad(self, theta) -> np.ndarray:
        return self.hbar @ (theta - self.theta_star)

    # batch API used by the lock-step replicate engine
    def grad_batch(self, block_step, thetas) -> np.ndarray:
        a, b = block_step
        return np.einsum("nij,nj->ni", a, thetas) - b

    def population_grad_batch(self, thetas) -> np.ndarray:
        return (thetas - self.theta_star) @ self.hbar

    def hessian_apply_at_opt(self, block_step, ys) -> np.ndarray:
        a, _ = block_step
        return np.einsum("nij,nj->ni", a, ys)

    def noise_at_opt(self, block_step) -> np.ndarray:
        a, b = block_step
        return np.einsum("nij,j->ni", a, self.theta_star) - b


def _estimate_quadratic_moments(model: _QuadraticModel, seed_seq, n_samples: int):
    """Monte Carlo moments of the clipped Hessian law: E[A], E[kron(Xi, Xi)],
    E[Xi^2], with entrywise standard errors."""
    d = model.dim
    rng = np.random.Generator(np.random.Philox(seed_seq))
    chunk = 20_000
    sum_a = np.zeros((d, d))
    sum_a2 = np.zeros((d, d))
    sum_kr = np.zeros((d, d, d, d))
    sum_kr2 = np.zeros((d, d, d, d))
    sum_sq = np.zeros((d, d))
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        u = 2.0 * rng.random((n, model._flat)) - 1.0
        s = _symmetric_from_flat(u, d)
        a = _clip_eigenvalues(model.abar_base + model.scale * s, model.clip_floor)
        sum_a += a.sum(axis=0)
        sum_a2 += (a * a).sum(axis=0)
        sum_kr += np.einsum("nij,nkl->ikjl", a, a)
        aa = a * a
        sum_kr2 += np.einsum("nij,nkl->ikjl", aa, aa)
        sum_sq += np.einsum("nij,njk->ik", a, a)
        done += n
    n = float(n_samples)
    abar = sum_a / n
    e_kron_aa = (sum_kr / n).reshape(d * d, d * d)
    xi_tensor = e_kron_aa - np.kron(abar, abar)
    xi_square = sum_sq / n - abar @ abar
    var_a = sum_a2 / n - abar**2
    hstar_se = float(np.sqrt(np.clip(var_a, 0.0, None)).max() / np.sqrt(n))
    var_kr = sum_kr2 / n - (sum_kr / n) ** 2
    tensor_se = float(np.sqrt(np.clip(var_kr, 0.0, None)).max() / np.sqrt(n))
    # symmetrize away Monte Carlo asymmetry
    abar = (abar + abar.T) / 2
    xi_square = (xi_square + xi_square.T) / 2
    xi_tensor = (xi_tensor + xi_tensor.T) / 2
    return abar, xi_tensor, xi_square, hstar_se, tensor_se


def make_noisy_quadratic(
    dim: int,
    spectrum,
    hessian_noise_scale: float,
    grad_noise_cov,
    seed: int,
    theta_star=None,
    rotate: bool = True,
    estimate_samples: int = 1_000_000,
) -> ProblemInstance:
    """Random quadratic ``f(theta; xi) = 1/2 theta' A_xi theta - b_xi' theta``.

    ``A_xi = Abar + scale * S_xi`` with ``S_xi`` symmetric, entries uniform on
    [-1, 1]; eigenvalues below ``min(spectrum)/2`` are shifted up to keep each
    sample strongly convex.  ``b_xi = A_xi theta* + w_xi`` with ``w_xi``
    zero-mean Gaussian of covariance ``grad_noise_cov``; the population
    optimum is therefore exactly ``theta*`` and the gradient noise at the
    optimum is exactly ``-w_xi``, so ``Sigma* = grad_noise_cov`` analytically.
    When clipping is active the mean Hessian shifts; the reported ``hstar``
    is re-estimated by Monte Carlo (``estimate_samples`` draws).
    """
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.shape != (dim,) or np.any(spectrum <= 0):
        raise InvalidProblemError("spectrum must be d positive eigenvalues")
    if hessian_noise_scale < 0:
        raise InvalidProblemError("hessian_noise_scale must be >= 0")
    grad_noise_cov = check_symmetric(np.asarray(grad_noise_cov, float), "grad_noise_cov")
    if grad_noise_cov.shape != (dim, dim):
        raise InvalidProblemError("grad_noise_cov must be d x d")
    grad_chol = _cholesky_psd(grad_noise_cov, "grad_noise_cov")
    theta_star = (
        np.zeros(dim) if theta_star is None else np.asarray(theta_star, dtype=float)
    )
    if theta_star.shape != (dim,):
        raise DimensionMismatchError("theta_star has wrong length")

    rot_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    )
    if rotate and dim > 1:
        q, r = np.linalg.qr(rot_rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
    else:
        q = np.eye(dim)
    abar_base = (q * spectrum) @ q.T
    abar_base = (abar_base + abar_base.T) / 2

    mu = float(spectrum.min())
    l_base = float(spectrum.max())
    model = _QuadraticModel(
        abar_base=_frozen(abar_base),
        scale=hessian_noise_scale,
        clip_floor=mu / 2.0,
        grad_chol=_frozen(grad_chol),
        theta_star=_frozen(theta_star),
        hbar=None,
    )

    d2 = dim * dim
    if hessian_noise_scale == 0.0:
        hstar = abar_base
        xi_tensor = np.zeros((d2, d2))
        xi_square = np.zeros((dim, dim))
        noise_lipschitz = 0.0
        l_eff = l_base
        provenance = Provenance(kind="analytic")
    else:
        est_seq = np.random.SeedSequence(entropy=seed, spawn_key=(1,))
        hstar, xi_tensor, xi_square, h_se, t_se = _estimate_quadratic_moments(
            model, est_seq, estimate_samples
        )
        noise_lipschitz = float(
            np.sqrt(max(np.linalg.eigvalsh(xi_square).max(), 0.0))
        )
        l_eff = max(l_base, float(np.linalg.eigvalsh(hstar).max()))
        provenance = Provenance(
            kind="monte_carlo",
            sample_count=estimate_samples,
            hstar_stderr=h_se,
            tensor_stderr=t_se,
        )
    model.hbar = _frozen(hstar)

    # a.s. operator-norm bound on A_xi: Gershgorin gives |lambda(S)| <= d
    as_smooth = l_base + hessian_noise_scale * dim

    return ProblemInstance(
        name="noisy_quadratic",
        dim=dim,
        theta_star=_frozen(theta_star),
        mu=mu,
        smoothness=l_eff,
        noise_lipschitz=noise_lipschitz,
        sigma_star_sq=float(np.trace(grad_noise_cov)),
        hstar=_frozen(hstar),
        noise_cov=_frozen(grad_noise_cov),
        provenance=provenance,
        individual_smoothness=as_smooth,
        hessian_fourth_root=as_smooth,
        hessian_lipschitz_in_mean=0.0,
        xi_second_moment=_frozen(xi_tensor),
        xi_square=_frozen(xi_square),
        _model=model,
    )


# ---------------------------------------------------------------------------
# linear regression
# ---------------------------------------------------------------------------


class _RegressionModel:
    BATCHABLE = True

    def __init__(self, design_chol, design_cov, noise_std, theta_star):
        self.design_chol = design_chol
        self.design_cov = design_cov
        self.noise_std = float(noise_std)
        self.theta_star = theta_star
        self.dim = theta_star.shape[0]

    def build_block(self, rng: np.random.Generator, n: int):
        z = rng.standard_normal((n, self.dim + 1))
        x = z[:, : self.dim] @ self.design_chol.T
        y = x @ self.theta_star + self.noise_std * z[:, self.dim]
        return x, y

    def sample_at(self, block, i: int) -> RegressionSample:
        x, y = block
        return RegressionSample(x=x[i].copy(), y=float(y[i]))

    def grad(self, theta, sample: RegressionSample) -> np.ndarray:
        return sample.x * (sample.x @ theta - sample.y)

    def hessian(self, theta, sample: RegressionSample) -> np.ndarray:
        return np.outer(sample.x, sample.x)

    def population_grad(self, theta) -> np.ndarray:
        return self.design_cov @ (theta - self.theta_star)

    def grad_batch(self, block_step, thetas) -> np.ndarray:
        x, y = block_step
        return x * ((x * thetas).sum(axis=1) - y)[:, None]

    def population_grad_batch(self, thetas) -> np.ndarray:
        return (thetas - self.theta_star) @ self.design_cov

    def hessian_apply_at_opt(self, block_step, ys) -> np.ndarray:
        x, _ = block_step
        return x * (x * ys).sum(axis=1)[:, None]

    def noise_at_opt(self, block_step) -> np.ndarray:
        x, y = block_step
        return x * ((x * self.theta_star).sum(axis=1) - y)[:, None]


def make_linear_regression(
    dim: int, design_cov, noise_std: float, theta_star, seed: int
) -> ProblemInstance:
    """Least squares with Gaussian design: ``f = 1/2 (x' theta - y)^2``,
    ``x ~ N(0, design_cov)``, ``y = x' theta* + noise_std * z``.

    All constants are closed form: ``H* = design_cov``,
    ``Sigma* = noise_std^2 design_cov``, and the Hessian-noise second moment
    follows from Isserlis' theorem.
    """
    if noise_std <= 0:
        raise InvalidProblemError("noise_std must be positive")
    design_cov = check_symmetric(np.asarray(design_cov, float), "design_cov")
    if design_cov.shape != (dim, dim):
        raise InvalidProblemError("design_cov must be d x d")
    evals = np.linalg.eigvalsh(design_cov)
    if evals.min() <= 0:
        raise InvalidProblemError("design_cov must be positive definite")
    theta_star = np.asarray(theta_star, dtype=float)
    if theta_star.shape != (dim,):
        raise DimensionMismatchError("theta_star has wrong length")

    model = _RegressionModel(
        design_chol=_frozen(np.linalg.cholesky(design_cov)),
        design_cov=_frozen(design_cov),
        noise_std=noise_std,
        theta_star=_frozen(theta_star),
    )

    s = design_cov
    tr = float(np.trace(s))
    # E[(xx' - S)^2] = tr(S) S + S^2 for Gaussian x
    xi_square = tr * s + s @ s
    # E[Xi (x) Xi][(i,k),(j,l)] = S_ik S_jl + S_il S_jk
    t4 = np.einsum("ik,jl->ikjl", s, s) + np.einsum("il,jk->ikjl", s, s)
    xi_tensor = t4.reshape(dim * dim, dim * dim)

    return ProblemInstance(
        name="linear_regression",
        dim=dim,
        theta_star=_frozen(theta_star),
        mu=float(evals.min()),
        smoothness=float(evals.max()),
        noise_lipschitz=float(np.sqrt(np.linalg.eigvalsh(xi_square).max())),
        sigma_star_sq=float(noise_std**2 * tr),
        hstar=_frozen(design_cov),
        noise_cov=_frozen(noise_std**2 * design_cov),
        provenance=Provenance(kind="analytic"),
        individual_smoothness=None,  # sup ||x||^2 is unbounded
        hessian_fourth_root=None,
        hessian_lipschitz_in_mean=0.0,
        xi_second_moment=_frozen(xi_tensor),
        xi_square=_frozen(xi_square),
        _model=model,
    )


# ---------------------------------------------------------------------------
# logistic regression over a frozen evaluation sample
# ---------------------------------------------------------------------------


class _LogisticModel:
    BATCHABLE = False

    def __init__(self, atoms_x, atoms_y, ridge):
        self.atoms_x = atoms_x
        self.atoms_y = atoms_y
        self.ridge = float(ridge)
        self.dim = atoms_x.shape[1]
        self.theta_star = None  # set after the optimum is computed

    def build_block(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, self.atoms_x.shape[0], size=n)
        return self.atoms_x[idx], self.atoms_y[idx]

    def sample_at(self, block, i: int) -> LogisticSample:
        x, y = block
        return LogisticSample(x=x[i].copy(), y=float(y[i]))

    def grad(self, theta, sample: LogisticSample) -> np.ndarray:
        margin = sample.y * (sample.x @ theta)
        return -expit(-margin) * sample.y * sample.x + self.ridge * theta

    def hessian(self, theta, sample: LogisticSample) -> np.ndarray:
        margin = sample.y * (sample.x @ theta)
        w = expit(margin) * expit(-margin)
        return w * np.outer(sample.x, sample.x) + self.ridge * np.eye(self.dim)

    def population_grad(self, theta) -> np.ndarray:
        # full-batch gradient over the frozen atoms (exact for this instance)
        m = self.atoms_y * (self.atoms_x @ theta)
        coef = -expit(-m) * self.atoms_y
        return (coef @ self.atoms_x) / self.atoms_x.shape[0] + self.ridge * theta

    def population_hessian(self, theta) -> np.ndarray:
        m = self.atoms_y * (self.atoms_x @ theta)
        w = expit(m) * expit(-m)
        h = (self.atoms_x * w[:, None]).T @ self.atoms_x / self.atoms_x.shape[0]
        return h + self.ridge * np.eye(self.dim)


def _newton_minimize(model: _LogisticModel, tol: float = 1e-10) -> np.ndarray:
    theta = np.zeros(model.dim)
    g = model.population_grad(theta)
    for _ in range(200):
        gn = np.linalg.norm(g)
        if gn <= tol:
            return theta
        step = np.linalg.solve(model.population_hessian(theta), g)
        t = 1.0
        while t > 1e-12:  # backtrack on the gradient norm
            cand = theta - t * step
            gc = model.population_grad(cand)
            if np.linalg.norm(gc) < gn:
                theta, g = cand, gc
                break
            t /= 2
        else:
            break
    raise InvalidProblemError(
        f"logistic optimum solve stalled at ||grad|| = {np.linalg.norm(g):.2e}"
    )


def make_logistic_regression(
    dim: int,
    design_cov,
    theta_gen,
    ridge: float,
    seed: int,
    sample_count: int = 1_000_000,
) -> ProblemInstance:
    """Ridge-regularized logistic regression over a frozen evaluation sample.

    ``sample_count`` points are drawn once at construction (features Gaussian
    with covariance ``design_cov``, labels from the logistic model at
    ``theta_gen``) and frozen; the instance's objective is the empirical
    average over those atoms plus ``ridge/2 ||theta||^2``, and sampling draws
    atoms uniformly.  This way the optimum, ``H*``, ``Sigma*`` and the
    Hessian-noise moments are exactly computable rather than approximate.
    The reported optimum is a numerically pinned surrogate for the
    infinite-population one and is flagged as such via ``provenance``.
    """
    if ridge <= 0:
        raise InvalidProblemError("ridge must be positive")
    design_cov = check_symmetric(np.asarray(design_cov, float), "design_cov")
    if design_cov.shape != (dim, dim):
        raise InvalidProblemError("design_cov must be d x d")
    if np.linalg.eigvalsh(design_cov).min() <= 0:
        raise InvalidProblemError("design_cov must be positive definite")
    theta_gen = np.asarray(theta_gen, dtype=float)
    if theta_gen.shape != (dim,):
        raise DimensionMismatchError("theta_gen has wrong length")

    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    )
    chol = np.linalg.cholesky(design_cov)
    x = rng.standard_normal((sample_count, dim)) @ chol.T
    labels = np.where(rng.random(sample_count) < expit(x @ theta_gen), 1.0, -1.0)

    model = _LogisticModel(atoms_x=_frozen(x), atoms_y=_frozen(labels), ridge=ridge)
    theta_star = _newton_minimize(model)
    model.theta_star = _frozen(theta_star)

    n = sample_count
    m = labels * (x @ theta_star)
    w = expit(m) * expit(-m)
    hcore = (x * w[:, None]).T @ x / n
    hstar = hcore + ridge * np.eye(dim)

    grads = -expit(-m)[:, None] * labels[:, None] * x + ridge * theta_star
    gbar = grads.mean(axis=0)
    centered = grads - gbar
    noise_cov = centered.T @ centered / n
    noise_cov = (noise_cov + noise_cov.T) / 2

    # Hessian-noise moments over the atoms, chunked to bound memory
    d2 = dim * dim
    xi_tensor4 = np.zeros((dim, dim, dim, dim))
    xi_square = np.zeros((dim, dim))
    chunk = 100_000
    for lo in range(0, n, chunk):
        xc = x[lo : lo + chunk]
        wc = w[lo : lo + chunk]
        p = np.einsum("n,ni,nj->nij", wc, xc, xc) - hcore
        xi_tensor4 += np.einsum("nij,nkl->ikjl", p, p)
        xi_square += np.einsum("nij,njk->ik", p, p)
    xi_tensor = (xi_tensor4 / n).reshape(d2, d2)
    xi_square = xi_square / n

    xsq = (x * x).sum(axis=1)
    smooth_per_atom = 0.25 * xsq + ridge
    ell_xi = float(np.sqrt(np.mean(smooth_per_atom**2)))
    ell_max = float(smooth_per_atom.max())
    ell_prime = float(np.mean(smooth_per_atom**4) ** 0.25)
    # |d/dm sigma'(m)| <= 1/(6 sqrt(3)); Hessian difference is that times x x'
    beta = float(np.sqrt(np.mean(xsq**3)) / (6.0 * np.sqrt(3.0)))

    second_moment = x.T @ x / n
    smoothness = ridge + 0.25 * float(np.linalg.eigvalsh(second_moment).max())

    return ProblemInstance(
        name="logistic_regression",
        dim=dim,
        theta_star=_frozen(theta_star),
        mu=ridge,
        smoothness=smoothness,
        noise_lipschitz=ell_xi,
        sigma_star_sq=float(np.trace(noise_cov)),
        hstar=_frozen(hstar),
        noise_cov=_frozen(noise_cov),
        provenance=Provenance(kind="frozen_sample", sample_count=sample_count),
        individual_smoothness=ell_max,
        hessian_fourth_root=ell_prime,
        hessian_lipschitz_in_mean=beta,
        xi_second_moment=_frozen(xi_tensor),
        xi_square=_frozen(xi_square),
        _model=model,
    )
