"""Lock-step Monte Carlo execution of replicate sets.

The serial loops in :mod:`rootsgd.optimizer` and :mod:`rootsgd.baselines`
define the semantics; this module advances many replicates at once with
vectorized numpy updates so that desk-scale experiments (thousands of
replicates times 10^5..10^6 samples) finish in seconds.  Each replicate still
owns its independent stream derived from ``(master_seed, replicate_index)``,
and draws happen through the same block-buffered protocol, so a lock-step
trajectory is sample-for-sample the trajectory the serial loop would have
produced.  Equivalence is covered by paired tests.

Replicate slabs can be distributed over a process pool; per-replicate results
are assembled in replicate order, so outputs are identical for any worker
count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context
from typing import Optional

import numpy as np

from .baselines import StepSizeSchedule
from .optimizer import RestartSchedule
from .oracle import ProblemInstance

__all__ = [
    "MonteCarloResult",
    "RootSgdMethod",
    "SgdMethod",
    "YProcessMethod",
    "default_workers",
    "run_replicates",
]

METRICS = ("grad_norm_sq", "dist_sq", "v_norm_sq", "z_norm_sq", "coupling_sq", "y_norm_sq")


@dataclass(frozen=True)
class RootSgdMethod:
    """Single-loop or restarted ROOT-SGD.

    With ``couple_y`` the engine also advances the linearized comparison
    process ``y_t`` on the same samples (initialized as ``B * v_B``) and
    records the squared coupling error ``||t v_t - y_t||^2`` at probes.
    Coupling is only defined for single-loop runs.
    """

    eta: float
    burn_in: int
    restarts: Optional[RestartSchedule] = None
    couple_y: bool = False

    def __post_init__(self):
        if self.couple_y and self.restarts is not None:
            raise ValueError("y-coupling is defined for single-loop runs only")


@dataclass(frozen=True)
class SgdMethod:
    schedule: StepSizeSchedule
    average: bool = True  # track the PRJ running mean


@dataclass(frozen=True)
class YProcessMethod:
    """The time-homogeneous linear process driven by Hessian and gradient
    noise at the optimum, started at zero."""

    eta: float


@dataclass
class MonteCarloResult:
    probe_ts: np.ndarray
    values: dict[str, np.ndarray]  # metric -> (n_probes, n_replicates)
    final: dict[str, np.ndarray]  # name -> (n_replicates, d)
    replicates: int
    samples_per_replicate: int

    def mean_and_se(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        vals = self.values[metric]
        mean = vals.mean(axis=1)
        if vals.shape[1] < 2:
            return mean, np.zeros_like(mean)
        se = vals.std(axis=1, ddof=1) / np.sqrt(vals.shape[1])
        return mean, se


def default_workers() -> int:
    env = os.environ.get("ROOTSGD_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _engine_chunk(model) -> int:
    # Hessian-noise families pay a batched eigendecomposition per sample;
    # keep their chunks small to bound transient memory.  Chunks divide the
    # stream BLOCK so take_block returns plain buffer slices.
    return 64 if getattr(model, "scale", 0.0) else 256


def _stack_blocks(blocks):
    return tuple(np.stack(cols, axis=0) for cols in zip(*blocks))


class _SlabRunner:
    """Advances replicates [lo, hi) in lock-step for one method."""

    def __init__(
        self, problem, method, horizon, probes, master_seed, theta0, collect_final
    ):
        if not problem.supports_batch:
            raise ValueError(
                f"problem family {problem.name!r} has no vectorized engine; "
                "drive it with the serial API instead"
            )
        self.p = problem
        self.model = problem._model
        self.method = method
        self.horizon = int(horizon)
        self.probes = np.asarray(sorted(set(int(t) for t in probes)), dtype=np.int64)
        if len(self.probes) and (self.probes[0] < 1 or self.probes[-1] > self.horizon):
            raise ValueError("probe indices must lie in [1, horizon]")
        self.master_seed = int(master_seed)
        self.theta0 = (
            problem.theta_star.copy()
            if theta0 is None
            else np.asarray(theta0, dtype=float).copy()
        )
        if self.theta0.shape != (problem.dim,):
            raise ValueError("theta0 has the wrong length")
        self.collect_final = collect_final

    def run(self, lo: int, hi: int) -> dict:
        n = hi - lo
        streams = [self.p.stream(self.master_seed, r) for r in range(lo, hi)]
        probe_set = set(self.probes.tolist())
        probe_row = {t: i for i, t in enumerate(self.probes.tolist())}
        values = {m: np.full((len(self.probes), n), np.nan) for m in METRICS}

        method = self.method
        if isinstance(method, RootSgdMethod):
            final = self._run_root_sgd(streams, probe_set, probe_row, values, n)
        elif isinstance(method, SgdMethod):
            final = self._run_sgd(streams, probe_set, probe_row, values, n)
        elif isinstance(method, YProcessMethod):
            final = self._run_y(streams, probe_set, probe_row, values, n)
        else:
            raise TypeError(f"unknown method {method!r}")

        taken = {s.samples_taken for s in streams}
        assert taken == {self.horizon}, "sample accounting mismatch"
        return {"values": values, "final": final}

    # -- shared helpers ------------------------------------------------------

    def _chunks(self, streams):
        chunk = _engine_chunk(self.model)
        t = 0
        while t < self.horizon:
            take = min(chunk, self.horizon - t)
            block = _stack_blocks([s.take_block(take) for s in streams])
            for c in range(take):
                t += 1
                yield t, tuple(col[:, c] for col in block)

    def _probe_common(self, values, row, theta, theta_prev_iter, v):
        pg_now = self.model.population_grad_batch(theta)
        diff = theta - self.p.theta_star
        values["grad_norm_sq"][row] = (pg_now * pg_now).sum(axis=1)
        values["dist_sq"][row] = (diff * diff).sum(axis=1)
        if v is not None:
            z = v - self.model.population_grad_batch(theta_prev_iter)
            values["v_norm_sq"][row] = (v * v).sum(axis=1)
            values["z_norm_sq"][row] = (z * z).sum(axis=1)

    # -- method kernels -------------------------------------------------------

    def _run_root_sgd(self, streams, probe_set, probe_row, values, n):
        method = self.method
        b = method.burn_in
        eta = method.eta
        if self.horizon < b:
            raise ValueError("horizon shorter than burn-in")
        boundaries: set[int] = set()
        if method.restarts is not None:
            boundaries = {int(t) + 1 for t in method.restarts.timestamps[1:-1]}
            if self.horizon != method.restarts.total_samples:
                raise ValueError("horizon must equal the restart budget")

        theta = np.tile(self.theta0, (n, 1))
        prev = theta.copy()
        v = np.zeros_like(theta)
        y = np.zeros_like(theta) if method.couple_y else None
        s = 0
        for t, block in self._chunks(streams):
            if t in boundaries:
                s = 0
            s += 1
            if s <= b:
                g = self.model.grad_batch(block, theta)
                v = v + (g - v) / s
                if s == b:
                    prev = theta
                    theta = theta - eta * v
                    if y is not None:
                        y = b * v
                theta_prev_iter = prev if s >= b else theta
            else:
                g1 = self.model.grad_batch(block, theta)
                g2 = self.model.grad_batch(block, prev)
                v = g1 + ((s - 1) / s) * (v - g2)
                prev = theta
                theta = theta - eta * v
                theta_prev_iter = prev
                if y is not None:
                    y = (
                        y
                        - eta * self.model.hessian_apply_at_opt(block, y)
                        + self.model.noise_at_opt(block)
                    )
            if t in probe_set:
                row = probe_row[t]
                self._probe_common(values, row, theta, theta_prev_iter, v)
                if y is not None and s >= b:
                    e = s * v - y
                    values["coupling_sq"][row] = (e * e).sum(axis=1)
        final = {}
        if self.collect_final:
            final["theta"] = theta.copy()
            final["v"] = v.copy()
            final["z"] = v - self.model.population_grad_batch(theta_prev_iter)
            if y is not None:
                final["y"] = y.copy()
        return final

    def _run_sgd(self, streams, probe_set, probe_row, values, n):
        method = self.method
        theta = np.tile(self.theta0, (n, 1))
        avg = theta.copy()
        for t, block in self._chunks(streams):
            g = self.model.grad_batch(block, theta)
            theta = theta - method.schedule.at(t) * g
            if method.average:
                avg = (1.0 / t) * theta + ((t - 1) / t) * avg
            if t in probe_set:
                row = probe_row[t]
                track = avg if method.average else theta
                self._probe_common(values, row, track, theta, None)
        final = {}
        if self.collect_final:
            final["theta"] = theta.copy()
            final["average"] = avg.copy()
        return final

    def _run_y(self, streams, probe_set, probe_row, values, n):
        eta = self.method.eta
        y = np.zeros((n, self.p.dim))
        for t, block in self._chunks(streams):
            y = (
                y
                - eta * self.model.hessian_apply_at_opt(block, y)
                + self.model.noise_at_opt(block)
            )
            if t in probe_set:
                values["y_norm_sq"][probe_row[t]] = (y * y).sum(axis=1)
        final = {}
        if self.collect_final:
            final["y"] = y.copy()
        return final


_WORKER_RUNNER: Optional[_SlabRunner] = None


def _init_worker(runner: _SlabRunner) -> None:
    global _WORKER_RUNNER
    _WORKER_RUNNER = runner


def _run_slab(bounds: tuple[int, int]) -> dict:
    assert _WORKER_RUNNER is not None
    return _WORKER_RUNNER.run(*bounds)


def run_replicates(
    problem: ProblemInstance,
    method,
    horizon: int,
    replicates: int,
    master_seed: int,
    probes,
    theta0=None,
    workers: int = 1,
    collect_final: bool = False,
) -> MonteCarloResult:
    """Run ``replicates`` independent trajectories and collect probe metrics.

    Results are identical for any ``workers`` value: replicate streams depend
    only on ``(master_seed, replicate_index)`` and outputs are assembled in
    replicate order.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    runner = _SlabRunner(
        problem, method, horizon, probes, master_seed, theta0, collect_final
    )

    workers = max(1, min(int(workers), replicates))
    if workers == 1:
        parts = [runner.run(0, replicates)]
    else:
        edges = np.linspace(0, replicates, workers + 1, dtype=int)
        slabs = [
            (int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo
        ]
        with ProcessPoolExecutor(
            max_workers=len(slabs),
            mp_context=get_context("fork"),
            initializer=_init_worker,
            initargs=(runner,),
        ) as pool:
            parts = list(pool.map(_run_slab, slabs))

    values = {
        m: np.concatenate([p["values"][m] for p in parts], axis=1) for m in METRICS
    }
    final_keys = parts[0]["final"].keys()
    final = {
        k: np.concatenate([p["final"][k] for p in parts], axis=0) for k in final_keys
    }
    return MonteCarloResult(
        probe_ts=runner.probes,
        values=values,
        final=final,
        replicates=replicates,
        samples_per_replicate=int(horizon),
    )
