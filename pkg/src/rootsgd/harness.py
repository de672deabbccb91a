"""Experiment harness: flat config files, seeded replicate runs, CSV output.

Config format is a flat, line-oriented ``key = value`` text file with dotted
keys; ``#`` starts a comment.  See the README for the full key reference.
Identical configs with identical master seeds produce byte-identical CSV
files regardless of the worker count.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, montecarlo
from .baselines import StepSizeSchedule
from .montecarlo import RootSgdMethod, SgdMethod, run_replicates
from .optimizer import (
    RestartSchedule,
    burn_in_length,
    max_step_size,
    restart_schedule,
    sample_complexity,
)
from .oracle import (
    ProblemInstance,
    make_linear_regression,
    make_logistic_regression,
    make_noisy_quadratic,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config_text",
    "run_experiment",
    "validate_config",
    "write_report",
]

METHODS = ("root_sgd", "root_sgd_restart", "sgd", "prj_sgd")
REPLICATE_COLUMNS = ("replicate", "t", "grad_norm_sq", "dist_sq", "v_norm_sq", "z_norm_sq")


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    """17 significant digits: exact float64 round-trips."""
    return format(float(x), ".17g")


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


class _Keys:
    """Typed accessors over the flat key/value map, tracking consumption."""

    def __init__(self, raw: dict[str, str]):
        self.raw = dict(raw)
        self.used: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self.raw

    def get(self, key: str, default=None, required: bool = False) -> Optional[str]:
        if key in self.raw:
            self.used.add(key)
            return self.raw[key]
        if required:
            raise ConfigError(f"missing required key {key!r}")
        return default

    def get_int(self, key: str, default=None, required: bool = False):
        v = self.get(key, required=required)
        if v is None:
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key!r} must be an integer, got {v!r}") from None

    def get_float(self, key: str, default=None, required: bool = False):
        v = self.get(key, required=required)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key!r} must be a number, got {v!r}") from None

    def get_bool(self, key: str, default=False):
        v = self.get(key)
        if v is None:
            return default
        if v.lower() in ("true", "1", "yes", "on"):
            return True
        if v.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key!r} must be a boolean, got {v!r}")

    def get_floats(self, key: str, default=None, required: bool = False):
        v = self.get(key, required=required)
        if v is None:
            return default
        try:
            return np.array([float(p) for p in v.split(",") if p.strip() != ""])
        except ValueError:
            raise ConfigError(f"{key!r} must be comma-separated numbers") from None

    def unknown(self) -> list[str]:
        return sorted(set(self.raw) - self.used)


_PROBE_TOKEN = re.compile(r"^(\d+(?:\.\d+)?)\s*B$", re.IGNORECASE)


def _parse_horizon_token(value: str, burn_in: Optional[int], key: str) -> int:
    value = value.strip()
    m = _PROBE_TOKEN.match(value)
    if m:
        if burn_in is None:
            raise ConfigError(f"{key!r} uses a B-multiple but no burn-in is defined")
        return int(round(float(m.group(1)) * burn_in))
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key!r} must be an integer or '<x>B', got {value!r}") from None


@dataclass
class ExperimentConfig:
    """Fully resolved run plan; no sampling happens before this exists."""

    problem: ProblemInstance
    method_name: str
    method: object  # RootSgdMethod | SgdMethod
    setting: str
    eta: Optional[float]
    burn_in: Optional[int]
    horizon: int
    probes: list[int]
    replicates: int
    master_seed: int
    theta0: np.ndarray
    strict: bool
    covariance_analysis: bool
    restarts: Optional[RestartSchedule]
    output_dir: Path
    raw: dict[str, str] = field(default_factory=dict)


def _build_problem(keys: _Keys) -> ProblemInstance:
    name = keys.get("problem.name", required=True)
    d = keys.get_int("problem.d", required=True)
    seed = keys.get_int("problem.seed", required=True)
    if d < 1:
        raise ConfigError("'problem.d' must be >= 1")

    def vector(key, default_scalar=0.0):
        vals = keys.get_floats(key)
        if vals is None:
            return np.full(d, default_scalar)
        if len(vals) == 1:
            return np.full(d, vals[0])
        if len(vals) != d:
            raise ConfigError(f"{key!r} must have 1 or {d} entries")
        return vals

    def diag_matrix(key):
        vals = keys.get_floats(key, required=True)
        if len(vals) == 1:
            return float(vals[0]) * np.eye(d)
        if len(vals) != d:
            raise ConfigError(f"{key!r} must have 1 or {d} entries")
        return np.diag(vals)

    if name == "noisy_quadratic":
        spectrum = keys.get_floats("problem.spectrum", required=True)
        if len(spectrum) != d:
            raise ConfigError("'problem.spectrum' must have problem.d entries")
        return make_noisy_quadratic(
            dim=d,
            spectrum=spectrum,
            hessian_noise_scale=keys.get_float("problem.hessian_noise_scale", 0.0),
            grad_noise_cov=diag_matrix("problem.grad_noise_cov.diag"),
            seed=seed,
            theta_star=vector("problem.theta_star"),
            rotate=keys.get_bool("problem.rotate", True),
            estimate_samples=keys.get_int("problem.estimate_samples", 1_000_000),
        )
    if name == "linear_regression":
        return make_linear_regression(
            dim=d,
            design_cov=diag_matrix("problem.design_cov.diag"),
            noise_std=keys.get_float("problem.noise_std", required=True),
            theta_star=vector("problem.theta_star"),
            seed=seed,
        )
    if name == "logistic_regression":
        return make_logistic_regression(
            dim=d,
            design_cov=diag_matrix("problem.design_cov.diag"),
            theta_gen=vector("problem.theta_gen"),
            ridge=keys.get_float("problem.ridge", required=True),
            seed=seed,
            sample_count=keys.get_int("problem.sample_count", 1_000_000),
        )
    raise ConfigError(f"'problem.name' unknown: {name!r}")


def _resolve_theta0(keys: _Keys, p: ProblemInstance) -> np.ndarray:
    mode = keys.get("init.mode", "offset")
    if mode == "offset":
        off = keys.get_floats("init.offset")
        if off is None:
            return p.theta_star.copy()
        if len(off) == 1:
            off = np.full(p.dim, off[0])
        if len(off) != p.dim:
            raise ConfigError("'init.offset' must have problem.d entries")
        return p.theta_star + off
    if mode == "grad_norm":
        if p.name == "logistic_regression":
            raise ConfigError("'init.mode = grad_norm' needs a linear population gradient")
        target = keys.get_float("init.grad_norm", required=True)
        direction = keys.get("init.direction", "ones")
        if direction == "ones":
            u = np.ones(p.dim)
        elif direction.startswith("e"):
            i = int(direction[1:])
            if not 0 <= i < p.dim:
                raise ConfigError("'init.direction' index out of range")
            u = np.zeros(p.dim)
            u[i] = 1.0
        else:
            raise ConfigError(f"'init.direction' unknown: {direction!r}")
        hu = p.hstar @ u
        scale = target / float(np.linalg.norm(hu))
        return p.theta_star + scale * u
    raise ConfigError(f"'init.mode' unknown: {mode!r}")


def resolve_config(raw: dict[str, str], base_dir: Path | None = None) -> ExperimentConfig:
    keys = _Keys(raw)
    problem = _build_problem(keys)
    method_name = keys.get("method.name", required=True)
    if method_name not in METHODS:
        raise ConfigError(f"'method.name' must be one of {METHODS}, got {method_name!r}")
    setting = (keys.get("method.setting", "LSN") or "LSN").upper()
    if setting not in ("LSN", "ISC"):
        raise ConfigError(f"'method.setting' must be LSN or ISC, got {setting!r}")
    strict = keys.get_bool("run.strict", True)
    covariance = keys.get_bool("analysis.covariance", False)
    replicates = keys.get_int("run.replicates", required=True)
    master_seed = keys.get_int("run.master_seed", required=True)
    theta0 = _resolve_theta0(keys, problem)

    eta = None
    burn_in = None
    restarts = None
    if method_name in ("root_sgd", "root_sgd_restart"):
        eta_raw = keys.get("method.eta", required=True)
        eta = max_step_size(problem, setting) if eta_raw == "max" else float(eta_raw)
        if eta <= 0:
            raise ConfigError("'method.eta' must be positive")
        b_raw = keys.get("method.burn_in", "auto")
        burn_in = (
            burn_in_length(problem.mu, eta) if b_raw == "auto" else int(b_raw)
        )
        if burn_in < 1:
            raise ConfigError("'method.burn_in' must be >= 1")

    if method_name == "root_sgd_restart":
        eps_sq = keys.get_float("restart.eps_sq", required=True)
        g0_raw = keys.get("restart.g0_sq", "auto")
        g0_sq = (
            problem.grad_norm_sq(theta0) if g0_raw == "auto" else float(g0_raw)
        )
        if g0_sq <= 0 or eps_sq <= 0:
            raise ConfigError("'restart.g0_sq' and 'restart.eps_sq' must be positive")
        restarts = restart_schedule(problem, g0_sq, eps_sq, eta)
        if restarts.loop_count == 0:
            raise ConfigError(
                "'restart.eps_sq' already met at the start: empty schedule"
            )
        horizon = restarts.total_samples
        if keys.has("run.horizon"):
            raise ConfigError(
                "'run.horizon' is derived from the restart schedule; remove it"
            )
        method = RootSgdMethod(eta=eta, burn_in=burn_in, restarts=restarts)
        default_probes = [int(t) for t in restarts.timestamps[1:]]
    elif method_name == "root_sgd":
        if keys.has("run.epsilon_sq"):
            if keys.has("run.horizon"):
                raise ConfigError(
                    "give either 'run.horizon' or 'run.epsilon_sq', not both"
                )
            eps_sq = keys.get_float("run.epsilon_sq", required=True)
            if eps_sq <= 0:
                raise ConfigError("'run.epsilon_sq' must be positive")
            g0 = float(np.sqrt(problem.grad_norm_sq(theta0)))
            horizon = sample_complexity(problem, g0, float(np.sqrt(eps_sq)), eta)
        else:
            horizon = _parse_horizon_token(
                keys.get("run.horizon", required=True), burn_in, "run.horizon"
            )
        method = RootSgdMethod(eta=eta, burn_in=burn_in)
        default_probes = [horizon]
    else:  # sgd / prj_sgd
        c = keys.get_float("method.c", required=True)
        alpha = keys.get_float("method.alpha", 0.0)
        schedule = StepSizeSchedule(c=c, alpha=alpha)
        horizon = _parse_horizon_token(
            keys.get("run.horizon", required=True), None, "run.horizon"
        )
        method = SgdMethod(schedule=schedule, average=(method_name == "prj_sgd"))
        default_probes = [horizon]

    probes_raw = keys.get("run.probes")
    if probes_raw is None:
        probes = default_probes
    else:
        probes = [
            _parse_horizon_token(tok, burn_in, "run.probes")
            for tok in probes_raw.split(",")
            if tok.strip()
        ]
    probes = sorted(set(probes))

    out_raw = keys.get("output.dir", required=True)
    output_dir = Path(out_raw)
    if base_dir is not None and not output_dir.is_absolute():
        output_dir = base_dir / output_dir

    unknown = keys.unknown()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    return ExperimentConfig(
        problem=problem,
        method_name=method_name,
        method=method,
        setting=setting,
        eta=eta,
        burn_in=burn_in,
        horizon=horizon,
        probes=probes,
        replicates=replicates,
        master_seed=master_seed,
        theta0=theta0,
        strict=strict,
        covariance_analysis=covariance,
        restarts=restarts,
        output_dir=output_dir,
        raw=dict(raw),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return resolve_config(parse_config_text(path.read_text()), base_dir=path.parent)


def validate_config(cfg: ExperimentConfig) -> list[str]:
    """Return the list of violations; empty iff the config is runnable.

    Strict mode enforces the step-size ceiling of the declared setting for
    nonasymptotic runs and the structural asymptotic-regime conditions for
    covariance-analysis runs (see README for the exact rules).
    """
    v: list[str] = []
    p = cfg.problem
    if cfg.replicates < 1:
        v.append("run.replicates: must be >= 1")
    if cfg.probes and (cfg.probes[0] < 1 or cfg.probes[-1] > cfg.horizon):
        v.append("run.probes: probe indices must lie in [1, run.horizon]")
    if cfg.covariance_analysis:
        if cfg.method_name not in ("root_sgd",):
            v.append("analysis.covariance: only supported for method.name = root_sgd")
        if p.xi_second_moment is None:
            v.append("analysis.covariance: problem reports no Hessian-noise moments")
    if cfg.method_name in ("root_sgd", "root_sgd_restart"):
        if cfg.setting == "ISC" and p.individual_smoothness is None:
            v.append("method.setting: ISC needs an individual-smoothness constant")
        if cfg.horizon < cfg.burn_in:
            v.append(
                f"run.horizon: horizon {cfg.horizon} is below the burn-in "
                f"length {cfg.burn_in} (= ceil(24/(mu eta)))"
            )
        if cfg.strict:
            if cfg.covariance_analysis:
                # Asymptotic regime: the theory's noise-dependent ceilings
                # carry unspecified constants, so strict mode pins only the
                # structural ones.
                if cfg.eta >= 2.0 / p.smoothness:
                    v.append(
                        "method.eta: asymptotic analysis needs eta < 2/L "
                        f"(= {2.0 / p.smoothness:.6g})"
                    )
                if cfg.eta > 1.0 / (4.0 * p.smoothness) * (1 + 1e-12):
                    v.append(
                        "method.eta: asymptotic analysis needs eta <= 1/(4 L) "
                        f"(= {1.0 / (4.0 * p.smoothness):.6g})"
                    )
                lp = p.hessian_fourth_root
                if lp is not None and lp > 0:
                    cap = p.mu ** (1.0 / 3.0) / (6.0 * lp ** (4.0 / 3.0))
                    if cfg.eta >= cap:
                        v.append(
                            "method.eta: asymptotic analysis needs "
                            f"eta < mu^(1/3)/(6 l'^(4/3)) (= {cap:.6g})"
                        )
            else:
                try:
                    cap = max_step_size(p, cfg.setting)
                except ValueError as e:
                    v.append(f"method.setting: {e}")
                    cap = None
                if cap is not None and cfg.eta > cap * (1 + 1e-12):
                    v.append(
                        f"method.eta: {cfg.eta:.6g} exceeds the {cfg.setting} "
                        f"ceiling {cap:.6g}"
                    )
    return v


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _write_replicates_csv(path: Path, result: montecarlo.MonteCarloResult) -> None:
    lines = [",".join(REPLICATE_COLUMNS)]
    ts = result.probe_ts.tolist()
    for r in range(result.replicates):
        for i, t in enumerate(ts):
            row = [
                str(r),
                str(t),
                _fmt(result.values["grad_norm_sq"][i, r]),
                _fmt(result.values["dist_sq"][i, r]),
                _fmt(result.values["v_norm_sq"][i, r]),
                _fmt(result.values["z_norm_sq"][i, r]),
            ]
            lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def _write_summary_csv(path: Path, result: montecarlo.MonteCarloResult) -> None:
    lines = ["t,metric,mean,stderr,replicates"]
    for metric in ("grad_norm_sq", "dist_sq", "v_norm_sq", "z_norm_sq"):
        mean, se = result.mean_and_se(metric)
        for i, t in enumerate(result.probe_ts.tolist()):
            lines.append(
                f"{t},{metric},{_fmt(mean[i])},{_fmt(se[i])},{result.replicates}"
            )
    path.write_text("\n".join(lines) + "\n")


def _write_meta_csv(path: Path, cfg: ExperimentConfig) -> None:
    rows = [
        ("problem", cfg.problem.name),
        ("method", cfg.method_name),
        ("setting", cfg.setting),
        ("eta", "" if cfg.eta is None else _fmt(cfg.eta)),
        ("burn_in", "" if cfg.burn_in is None else str(cfg.burn_in)),
        ("horizon", str(cfg.horizon)),
        ("replicates", str(cfg.replicates)),
        ("master_seed", str(cfg.master_seed)),
        ("samples_consumed", str(cfg.horizon * cfg.replicates)),
        ("strict", str(cfg.strict).lower()),
    ]
    if cfg.restarts is not None:
        rows.append(("restart_loops", str(cfg.restarts.loop_count)))
        rows.append(
            ("restart_timestamps", ";".join(str(int(t)) for t in cfg.restarts.timestamps))
        )
        rows.append(
            ("restart_targets", ";".join(_fmt(g) for g in cfg.restarts.targets))
        )
    lines = ["key,value"] + [f"{k},{v}" for k, v in rows]
    path.write_text("\n".join(lines) + "\n")


def _matrix_rows(section: str, m: np.ndarray) -> list[str]:
    rows = []
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            rows.append(f"{section},{i},{j},{_fmt(m[i, j])}")
    return rows


def _write_covariance_csv(path: Path, report: analysis.CovarianceReport) -> None:
    lines = ["section,i,j,value"]
    lines += _matrix_rows("cramer_rao", report.cramer_rao)
    lines += _matrix_rows("lambda_eta", report.lambda_eta)
    lines += _matrix_rows("correction", report.correction)
    lines += _matrix_rows("predicted_total", report.predicted_total)
    lines += _matrix_rows("empirical", report.empirical.matrix)
    lines += _matrix_rows("empirical_stderr", report.empirical.stderr)
    for name, val in (
        ("eta", report.eta),
        ("replicates", report.empirical.replicates),
        ("frobenius_relative_gap", report.frobenius_relative_gap),
        ("trace_correction", report.trace_correction),
        ("trace_bound", report.trace_bound),
    ):
        lines.append(f"scalar,{name},,{_fmt(val)}")
    path.write_text("\n".join(lines) + "\n")


def _write_final_errors_csv(path: Path, errors: np.ndarray) -> None:
    d = errors.shape[1]
    header = "replicate," + ",".join(f"err{j}" for j in range(d))
    lines = [header]
    for r in range(errors.shape[0]):
        lines.append(str(r) + "," + ",".join(_fmt(x) for x in errors[r]))
    path.write_text("\n".join(lines) + "\n")


def _run_serial_fallback(cfg: ExperimentConfig) -> montecarlo.MonteCarloResult:
    """Per-replicate serial loops for families without a vectorized engine."""
    from . import baselines, optimizer

    p = cfg.problem
    probes = sorted(set(cfg.probes))
    values = {
        m: np.full((len(probes), cfg.replicates), np.nan) for m in montecarlo.METRICS
    }
    finals = np.empty((cfg.replicates, p.dim))
    for r in range(cfg.replicates):
        stream = p.stream(cfg.master_seed, r)
        if isinstance(cfg.method, RootSgdMethod):
            if cfg.method.restarts is not None:
                res = optimizer.run_with_restarts(
                    p, cfg.theta0, cfg.method.eta, cfg.method.restarts, stream,
                    probes=probes,
                )
            else:
                plan = optimizer.StepPlan(eta=cfg.method.eta, burn_in=cfg.method.burn_in)
                res = optimizer.run(p, cfg.theta0, plan, cfg.horizon, stream, probes=probes)
            for i, rec in enumerate(res.trace):
                values["grad_norm_sq"][i, r] = rec.grad_norm_sq
                values["dist_sq"][i, r] = rec.dist_sq
                values["v_norm_sq"][i, r] = float(rec.v @ rec.v)
                values["z_norm_sq"][i, r] = float(rec.z @ rec.z)
            finals[r] = res.theta
        else:
            res = baselines.run_sgd(
                p, cfg.theta0, cfg.method.schedule, cfg.horizon, stream,
                probes=probes, average=cfg.method.average,
            )
            for i, (t, theta, avg) in enumerate(res.trace):
                track = avg if cfg.method.average else theta
                g = p.population_grad(track)
                diff = track - p.theta_star
                values["grad_norm_sq"][i, r] = float(g @ g)
                values["dist_sq"][i, r] = float(diff @ diff)
            finals[r] = res.average if cfg.method.average else res.theta
    return montecarlo.MonteCarloResult(
        probe_ts=np.asarray(probes, dtype=np.int64),
        values=values,
        final={"theta": finals},
        replicates=cfg.replicates,
        samples_per_replicate=cfg.horizon,
    )


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> Path:
    """Execute a resolved config and write result CSVs; returns the output dir."""
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    if workers is None:
        workers = montecarlo.default_workers()

    need_final = cfg.covariance_analysis or cfg.method_name in ("sgd", "prj_sgd")
    if cfg.problem.supports_batch:
        result = run_replicates(
            cfg.problem,
            cfg.method,
            cfg.horizon,
            cfg.replicates,
            cfg.master_seed,
            cfg.probes,
            theta0=cfg.theta0,
            workers=workers,
            collect_final=True,
        )
    else:
        result = _run_serial_fallback(cfg)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_meta_csv(out / "run_meta.csv", cfg)
    _write_replicates_csv(out / "replicates.csv", result)
    _write_summary_csv(out / "summary.csv", result)

    if cfg.covariance_analysis:
        if isinstance(cfg.method, SgdMethod):
            finals = result.final["average"]
        else:
            finals = result.final["theta"]
        errors = np.sqrt(cfg.horizon) * (finals - cfg.problem.theta_star)
        _write_final_errors_csv(out / "final_errors.csv", errors)
        emp = analysis.empirical_covariance(errors)
        model = analysis.HessianNoiseModel.from_problem(cfg.problem)
        report = analysis.covariance_report(
            model,
            cfg.eta,
            emp,
            cfg.problem.mu,
            cfg.problem.noise_lipschitz,
            cfg.problem.sigma_star_sq,
        )
        _write_covariance_csv(out / "covariance.csv", report)
    return out


def write_report(results_dir) -> Path:
    """Aggregate every summary.csv under ``results_dir`` into report.csv."""
    root = Path(results_dir)
    summaries = sorted(root.glob("**/summary.csv"))
    lines = ["experiment,t,metric,mean,stderr,replicates"]
    for s in summaries:
        name = s.parent.relative_to(root).as_posix() or "."
        body = s.read_text().splitlines()[1:]
        lines += [f"{name},{row}" for row in body]
    out = root / "report.csv"
    out.write_text("\n".join(lines) + "\n")
    return out
