import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rootsgd import harness
from rootsgd.cli import main as cli_main


BASE_QUAD = """
problem.name = noisy_quadratic
problem.d = 2
problem.seed = 7
problem.spectrum = 1.0,2.0
problem.hessian_noise_scale = 0.0
problem.grad_noise_cov.diag = 0.5
init.offset = 1.0,0.0
method.name = root_sgd
method.eta = max
method.setting = LSN
run.horizon = 2B
run.probes = 1B,2B
run.replicates = 4
run.master_seed = 11
output.dir = {out}
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_config_text_basics():
    raw = harness.parse_config_text(
        "a.b = 1\n# comment\n\nc = hello  # trailing\n"
    )
    assert raw == {"a.b": "1", "c": "hello"}
    with pytest.raises(harness.ConfigError, match="duplicate"):
        harness.parse_config_text("a = 1\na = 2\n")
    with pytest.raises(harness.ConfigError, match="key = value"):
        harness.parse_config_text("not a pair\n")


def test_resolve_eta_max_and_burn_in(tmp_path):
    cfg = harness.load_config(
        write_cfg(tmp_path, BASE_QUAD.format(out=tmp_path / "r"))
    )
    # noiseless quadratic with L = 2: LSN ceiling is 1/(4 L) = 0.125
    assert cfg.eta == pytest.approx(0.125)
    assert cfg.burn_in == 192  # ceil(24 / (1.0 * 0.125))
    assert cfg.horizon == 2 * cfg.burn_in
    assert cfg.probes == [cfg.burn_in, 2 * cfg.burn_in]
    assert harness.validate_config(cfg) == []


def test_unknown_and_missing_keys(tmp_path):
    with pytest.raises(harness.ConfigError, match="problem.name"):
        harness.resolve_config({"method.name": "sgd"})
    bad = BASE_QUAD.format(out=tmp_path / "r") + "bogus.key = 1\n"
    with pytest.raises(harness.ConfigError, match="bogus.key"):
        harness.load_config(write_cfg(tmp_path, bad))


def test_validate_strict_step_size(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "r").replace(
        "method.eta = max", "method.eta = 0.2"
    )
    cfg = harness.load_config(write_cfg(tmp_path, text))
    violations = harness.validate_config(cfg)
    assert any("ceiling" in v for v in violations)
    # free mode clears it
    cfg2 = harness.load_config(
        write_cfg(tmp_path, text + "run.strict = false\n", name="e2.cfg")
    )
    assert harness.validate_config(cfg2) == []


def test_validate_horizon_vs_burn_in(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "r").replace(
        "run.horizon = 2B", "run.horizon = 10"
    ).replace("run.probes = 1B,2B", "run.probes = 10")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    violations = harness.validate_config(cfg)
    assert any("burn-in" in v for v in violations)


def test_validate_zero_replicates(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "r").replace(
        "run.replicates = 4", "run.replicates = 0"
    )
    cfg = harness.load_config(write_cfg(tmp_path, text))
    assert any("replicates" in v for v in harness.validate_config(cfg))


def test_run_experiment_outputs(tmp_path):
    cfg = harness.load_config(
        write_cfg(tmp_path, BASE_QUAD.format(out=tmp_path / "res"))
    )
    out = harness.run_experiment(cfg, workers=1)
    reps = (out / "replicates.csv").read_text().splitlines()
    assert reps[0] == "replicate,t,grad_norm_sq,dist_sq,v_norm_sq,z_norm_sq"
    assert len(reps) == 1 + 2 * 4  # two probes, four replicates
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "t,metric,mean,stderr,replicates"
    meta = dict(
        line.split(",", 1) for line in (out / "run_meta.csv").read_text().splitlines()[1:]
    )
    assert meta["samples_consumed"] == str(cfg.horizon * cfg.replicates)


def test_single_replicate_summary_equals_trajectory(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "res1").replace(
        "run.replicates = 4", "run.replicates = 1"
    )
    cfg = harness.load_config(write_cfg(tmp_path, text))
    out = harness.run_experiment(cfg, workers=1)
    reps = (out / "replicates.csv").read_text().splitlines()[1:]
    summ = (out / "summary.csv").read_text().splitlines()[1:]
    rep_grad = {r.split(",")[1]: r.split(",")[2] for r in reps}
    for line in summ:
        t, metric, mean, stderr, n = line.split(",")
        if metric == "grad_norm_sq":
            assert mean == rep_grad[t]
            assert float(stderr) == 0.0


def test_byte_identical_across_worker_counts(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "a")
    cfg_a = harness.load_config(write_cfg(tmp_path, text, name="a.cfg"))
    harness.run_experiment(cfg_a, workers=1)
    text_b = BASE_QUAD.format(out=tmp_path / "b")
    cfg_b = harness.load_config(write_cfg(tmp_path, text_b, name="b.cfg"))
    harness.run_experiment(cfg_b, workers=2)
    for name in ("replicates.csv", "summary.csv", "run_meta.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_restart_config(tmp_path):
    text = """
problem.name = noisy_quadratic
problem.d = 2
problem.seed = 3
problem.spectrum = 1.0,2.0
problem.hessian_noise_scale = 0.0
problem.grad_noise_cov.diag = 0.25
init.mode = grad_norm
init.grad_norm = 2.0
method.name = root_sgd_restart
method.eta = max
restart.g0_sq = auto
restart.eps_sq = 1.0
run.replicates = 2
run.master_seed = 5
output.dir = {out}
""".format(out=tmp_path / "restart")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    assert cfg.restarts is not None
    assert cfg.restarts.loop_count == 2  # ceil(log2(4/1)) = 2
    assert cfg.horizon == cfg.restarts.total_samples
    assert harness.validate_config(cfg) == []
    out = harness.run_experiment(cfg, workers=1)
    assert (out / "replicates.csv").exists()
    # grad_norm init hits the requested norm exactly on a quadratic
    assert cfg.problem.grad_norm_sq(cfg.theta0) == pytest.approx(4.0, rel=1e-12)


def test_covariance_analysis_outputs(tmp_path):
    text = """
problem.name = linear_regression
problem.d = 2
problem.seed = 1
problem.design_cov.diag = 1.0,2.0
problem.noise_std = 1.0
method.name = root_sgd
method.eta = 0.05
method.burn_in = auto
run.horizon = 3000
run.replicates = 50
run.master_seed = 9
analysis.covariance = true
output.dir = {out}
""".format(out=tmp_path / "cov")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    assert harness.validate_config(cfg) == []
    out = harness.run_experiment(cfg, workers=1)
    cov_lines = (out / "covariance.csv").read_text().splitlines()
    sections = {line.split(",")[0] for line in cov_lines[1:]}
    assert sections == {
        "cramer_rao", "lambda_eta", "correction", "predicted_total",
        "empirical", "empirical_stderr", "scalar",
    }
    errs = (out / "final_errors.csv").read_text().splitlines()
    assert errs[0] == "replicate,err0,err1"
    assert len(errs) == 51


def test_asymptotic_strict_rules(tmp_path):
    # eta above the LSN noise ceiling is still strict-valid for an
    # asymptotic-analysis run (only the structural ceilings apply there)...
    base = """
problem.name = linear_regression
problem.d = 2
problem.seed = 1
problem.design_cov.diag = 1.0,2.0
problem.noise_std = 1.0
method.name = root_sgd
method.eta = {eta}
run.horizon = 3000
run.replicates = 4
run.master_seed = 2
analysis.covariance = {cov}
output.dir = {out}
"""
    cfg = harness.load_config(
        write_cfg(tmp_path, base.format(eta=0.05, cov="true", out=tmp_path / "x"))
    )
    assert harness.validate_config(cfg) == []
    # ... but the same step size fails the nonasymptotic LSN ceiling,
    cfg2 = harness.load_config(
        write_cfg(
            tmp_path, base.format(eta=0.05, cov="false", out=tmp_path / "y"),
            name="y.cfg",
        )
    )
    assert any("ceiling" in v for v in harness.validate_config(cfg2))
    # and a step above 1/(4 L) fails even for asymptotic runs.
    cfg3 = harness.load_config(
        write_cfg(
            tmp_path, base.format(eta=0.2, cov="true", out=tmp_path / "z"),
            name="z.cfg",
        )
    )
    assert any("1/(4 L)" in v for v in harness.validate_config(cfg3))


def test_prj_config_and_report(tmp_path):
    text = """
problem.name = linear_regression
problem.d = 1
problem.seed = 4
problem.design_cov.diag = 1.0
problem.noise_std = 1.0
init.offset = 2.0
method.name = prj_sgd
method.c = 0.5
method.alpha = 0.7
run.horizon = 1000
run.probes = 500,1000
run.replicates = 3
run.master_seed = 6
output.dir = {out}
""".format(out=tmp_path / "results" / "prj")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    harness.run_experiment(cfg, workers=1)
    report = harness.write_report(tmp_path / "results")
    lines = report.read_text().splitlines()
    assert lines[0] == "experiment,t,metric,mean,stderr,replicates"
    assert any(line.startswith("prj,") for line in lines[1:])


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, BASE_QUAD.format(out=tmp_path / "cli_out"))
    assert cli_main(["validate", str(cfg_path)]) == 0
    assert cli_main(["run", str(cfg_path)]) == 0
    assert (tmp_path / "cli_out" / "summary.csv").exists()
    assert cli_main(["report", str(tmp_path / "cli_out")]) == 0
    capsys.readouterr()

    bad = write_cfg(
        tmp_path,
        BASE_QUAD.format(out=tmp_path / "x").replace(
            "run.replicates = 4", "run.replicates = 0"
        ),
        name="bad.cfg",
    )
    assert cli_main(["run", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "replicates" in err


def test_cli_subprocess_exit_codes(tmp_path):
    cfg_path = write_cfg(tmp_path, BASE_QUAD.format(out=tmp_path / "sp_out"))
    proc = subprocess.run(
        [sys.executable, "-m", "rootsgd.cli", "validate", str(cfg_path)],
        capture_output=True,
        text=True,
        env={**os.environ, "ROOTSGD_WORKERS": "1"},
    )
    assert proc.returncode == 0, proc.stderr
    missing = subprocess.run(
        [sys.executable, "-m", "rootsgd.cli", "validate", str(tmp_path / "nope.cfg")],
        capture_output=True,
        text=True,
    )
    assert missing.returncode != 0


def test_isc_eta_max_resolution(tmp_path):
    # spectrum max 3.0 with scale 0.5 at d=2 gives an a.s. smoothness bound
    # of 3 + 0.5*2 = 4, so the ISC ceiling resolves to 1/16
    text = """
problem.name = noisy_quadratic
problem.d = 2
problem.seed = 2
problem.spectrum = 0.5,3.0
problem.hessian_noise_scale = 0.5
problem.grad_noise_cov.diag = 0.2
problem.estimate_samples = 20000
method.name = root_sgd
method.eta = max
method.setting = ISC
run.horizon = 1B
run.replicates = 1
run.master_seed = 0
output.dir = {out}
""".format(out=tmp_path / "isc")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    assert cfg.eta == pytest.approx(0.0625)
    assert harness.validate_config(cfg) == []


def test_horizon_derived_from_epsilon(tmp_path):
    text = BASE_QUAD.format(out=tmp_path / "eps").replace(
        "run.horizon = 2B", "run.epsilon_sq = 0.04"
    ).replace("run.probes = 1B,2B", "")
    cfg = harness.load_config(write_cfg(tmp_path, text))
    from rootsgd.optimizer import sample_complexity

    p = cfg.problem
    g0 = np.sqrt(p.grad_norm_sq(cfg.theta0))
    assert cfg.horizon == sample_complexity(p, g0, 0.2, cfg.eta)
    assert cfg.horizon >= cfg.burn_in
    both = BASE_QUAD.format(out=tmp_path / "x") + "run.epsilon_sq = 0.04\n"
    with pytest.raises(harness.ConfigError, match="not both"):
        harness.load_config(write_cfg(tmp_path, both, name="both.cfg"))
