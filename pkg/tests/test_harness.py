import json
import math

import numpy as np
import pytest

from qgadmm import __main__ as cli
from qgadmm import harness
from qgadmm.harness import (
    CSV_HEADER,
    ConfigError,
    ExperimentConfig,
    SeedSummary,
    build_world,
    energy_cdf,
    parse_config,
    run_seed,
)
from qgadmm.solvers import SolverError

SMALL = dict(n_workers=4, samples_per_worker=20, n_features=3, max_iters=60)


def summary(energy, censored=False):
    return SeedSummary(0, "qgadmm", 10, 0.0, 1e-4, censored, energy_to_target=None if censored else energy)


# -- config ------------------------------------------------------------------------

def test_parse_flat_config_with_comments():
    cfg = parse_config("""
        # regression defaults
        algorithm = gadmm
        rho = 12.5   # penalty
        seeds = 0-2, 7
        stop_at_target = true
        bits = adaptive:3
    """)
    assert cfg.algorithm == "gadmm" and cfg.rho == 12.5
    assert cfg.seeds == [0, 1, 2, 7]
    assert cfg.stop_at_target is True
    assert cfg.bit_policy() == "adaptive:3"


def test_overrides_win_over_file():
    cfg = parse_config("algorithm = gadmm\nrho = 3", algorithm="qgd", rho="5", seeds="4")
    assert (cfg.algorithm, cfg.rho, cfg.seeds) == ("qgd", 5.0, [4])


@pytest.mark.parametrize("text", [
    "algorithm = adam",
    "rho = -1",
    "rho = abc",
    "seeds = ",
    "bandwidth = 0",
    "unknown_key = 1",
    "just words",
    "alpha = 2",
    "power_formula = cubic",
    "bits = fancy:2",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_algorithm_defaults():
    s = ExperimentConfig(algorithm="qsgadmm")
    assert s.dual_damping() == 0.01 and s.bit_policy() == "fixed:8" and s.quantized
    c = ExperimentConfig(algorithm="qgadmm")
    assert c.dual_damping() == 1.0 and c.bit_policy() == "fixed:2"
    assert ExperimentConfig(bits="4").bit_policy() == "fixed:4"


# -- runs ----------------------------------------------------------------------------

def test_csv_schema_and_rounds():
    for algo, per_iter in (("qgadmm", 4), ("gd", 5)):
        run = run_seed(ExperimentConfig(algorithm=algo, **SMALL), 0)
        lines = run.to_csv().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 1 + SMALL["max_iters"]
        first = lines[1].split(",")
        assert first[0] == "1" and first[1] == str(per_iter)


def test_cumulative_fields_monotone():
    run = run_seed(ExperimentConfig(algorithm="qgadmm", **SMALL), 1)
    bits = [r.cumulative_bits for r in run.records]
    energy = [r.cumulative_energy_j for r in run.records]
    assert bits == sorted(bits) and energy == sorted(energy)


def test_ps_runs_report_nan_residuals():
    run = run_seed(ExperimentConfig(algorithm="qgd", **SMALL), 0)
    assert all(math.isnan(r.max_primal_residual) for r in run.records)


def test_identical_config_gives_identical_csv():
    cfg = ExperimentConfig(algorithm="qgadmm", **SMALL)
    assert run_seed(cfg, 3).to_csv() == run_seed(cfg, 3).to_csv()


def test_disabled_quantization_equals_gadmm():
    a = run_seed(ExperimentConfig(algorithm="qgadmm", quantize=False, **SMALL), 2)
    b = run_seed(ExperimentConfig(algorithm="gadmm", **SMALL), 2)
    assert a.to_csv() == b.to_csv()


def test_all_algorithms_share_the_world():
    base = ExperimentConfig(**SMALL)
    ref_dep, ref_objs = build_world(base.replace(algorithm="gadmm"), 5)
    for algo in ("qgadmm", "gd", "qgd"):
        dep, objs = build_world(base.replace(algorithm=algo), 5)
        assert np.array_equal(dep.positions, ref_dep.positions) and dep.chain_order == ref_dep.chain_order
        assert all(np.array_equal(o.X, r.X) for o, r in zip(objs, ref_objs))


def test_gd_needs_more_rounds_than_gadmm():
    base = ExperimentConfig(max_iters=3000, stop_at_target=True)
    gd = run_seed(base.replace(algorithm="gd"), 0).summary
    ga = run_seed(base.replace(algorithm="gadmm"), 0).summary
    assert not gd.censored and not ga.censored
    assert gd.rounds_to_target > ga.rounds_to_target


def test_record_count_with_early_stop():
    cfg = ExperimentConfig(algorithm="gadmm", n_workers=4, max_iters=5000, tol=1e-8)
    run = run_seed(cfg, 0)
    assert len(run.records) < 5000
    assert run.records[-1].max_primal_residual < 1e-8
    assert len(run_seed(cfg.replace(max_iters=7), 0).records) == 7


def test_unreachable_target_is_censored():
    run = run_seed(ExperimentConfig(algorithm="gd", target_loss=1e-30, **SMALL), 0)
    assert run.summary.censored and run.summary.energy_to_target is None


def test_stochastic_loss_is_training_loss():
    cfg = ExperimentConfig(algorithm="qsgadmm", n_workers=4, samples_per_worker=200, n_features=3,
                           max_iters=20, target_rel=0.05)
    run = run_seed(cfg, 0)
    ref = run.summary.reference
    # mean cross-entropy at theta = 0 is log 2; training loss stays at or above the optimum
    assert ref < math.log(2)
    assert all(r.loss >= ref - 1e-9 for r in run.records)
    assert run.summary.target == pytest.approx(1.05 * ref)


# -- CDF ------------------------------------------------------------------------------

def test_cdf_two_values():
    assert energy_cdf([summary(2.0), summary(1.0)]) == [(1.0, 0.5), (2.0, 1.0)]


def test_cdf_identical_values_step():
    pts = energy_cdf([summary(3.0)] * 4)
    assert [q for _, q in pts] == [0.25, 0.5, 0.75, 1.0]
    assert all(e == 3.0 for e, _ in pts)


def test_cdf_nondecreasing_and_censoring():
    rng = np.random.default_rng(0)
    sums = [summary(float(e)) for e in rng.exponential(size=20)] + [summary(0, censored=True)] * 5
    pts = energy_cdf(sums)
    assert all(a[0] <= b[0] and a[1] < b[1] for a, b in zip(pts, pts[1:]))
    assert pts[-1][1] == pytest.approx(20 / 25)


def test_cdf_errors():
    with pytest.raises(ValueError):
        energy_cdf([summary(1.0)])
    with pytest.raises(ValueError):
        energy_cdf([summary(0, True), summary(0, True)])


# -- CLI ------------------------------------------------------------------------------

def test_cli_run_writes_identical_files(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("n_workers = 4\nsamples_per_worker = 20\nn_features = 3\nmax_iters = 30\n")
    outs = []
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--algo", "qgadmm", "--seed", "1", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "qgadmm_seed1.csv").read_bytes())
    assert outs[0] == outs[1]
    data = json.loads((tmp_path / "a" / "qgadmm_summary.json").read_text())
    assert data["seeds"][0]["seed"] == 1


def test_cli_sweep_and_cdf(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("n_workers = 4\nsamples_per_worker = 20\nn_features = 3\nmax_iters = 400\ntarget_loss = 1e-3\n")
    rc = cli.main(["sweep", "--config", str(cfg), "--seed", "0,1", "--algos", "gadmm,qgadmm",
                   "--rhos", "10,24", "--out", str(tmp_path / "sw")])
    assert rc == 0
    index = json.loads((tmp_path / "sw" / "index.json").read_text())
    assert len(index) == 4
    summ = tmp_path / "sw" / index[0] / "gadmm_summary.json"
    assert cli.main(["cdf", str(summ), "--out", str(tmp_path / "cdf.csv")]) == 0
    lines = (tmp_path / "cdf.csv").read_text().splitlines()
    assert lines[0] == "algorithm,energy_j,quantile" and len(lines) == 3


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["run", "--algo", "nope", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_solver_error_exit_code(tmp_path, monkeypatch, capsys):
    def broken(config):
        raise SolverError("diverged", worker=3)
    monkeypatch.setattr(harness, "run_experiment", broken)
    assert cli.main(["run", "--out", str(tmp_path)]) == 3
