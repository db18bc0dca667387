import json
import math

import pytest

import dgsc


def test_potentials_and_known_llc():
    names = dgsc.potential_names()
    assert "l1" in names and "l5" in names
    assert dgsc.known_llc("l2") == (1, 2)
    assert dgsc.potential_value("l1", [0.0, 0.0]) == pytest.approx(0.0)
    assert len(dgsc.potential_grad("l1", [0.3, -0.2])) == 2
    with pytest.raises(dgsc.ConfigError):
        dgsc.known_llc("no_such_potential")


def test_estimate_llc_quadratic():
    cfg = dgsc.potential_sgld_config(2, seed=1)
    cfg.chains = 4
    cfg.steps = 40000
    cfg.burn_in = 8000
    est = dgsc.estimate_llc_potential("l1", cfg)
    assert abs(est["lambda_hat"] - 1.0) < 0.2
    assert len(est["per_chain"]) == 4
    again = dgsc.estimate_llc_potential("l1", cfg)
    assert again["lambda_hat"] == est["lambda_hat"]


def test_sgld_config_tilde():
    cfg = dgsc.SgldConfig()
    cfg.epsilon = 1e-4
    cfg.nbeta = 100.0
    cfg.gamma = 8.0
    assert cfg.beta_tilde == pytest.approx(5e-3)
    assert cfg.gamma_tilde == pytest.approx(2e-4)


def test_volume_oracle_l2():
    fit = dgsc.volume_llc("l2", seed=0)
    assert abs(fit["lambda"] - 0.5) < 0.05
    assert len(fit["epsilons"]) == len(fit["volumes"]) == 9


def test_online_trace_last_value():
    losses = [0.1, 0.3, 0.2, 0.4]
    trace = dgsc.online_trace(losses, 10.0, 0.05)
    assert trace[-1] == pytest.approx(10.0 * (sum(losses) / 4 - 0.05))


def test_hessian_l5():
    h = dgsc.hessian_stats_potential("l5")
    assert h["trace"] == pytest.approx(12.0, rel=1e-9)
    assert h["max_eigenvalue"] == pytest.approx(6.0, rel=1e-6)


def test_crossover():
    n_crit, kind = dgsc.free_energy_crossover(1.0, 1.0, 0.5, 10.0)
    assert kind == "crossover"
    assert 1.0 * n_crit + math.log(n_crit) == pytest.approx(0.5 * n_crit + 10.0 * math.log(n_crit))


def test_checkpoint_plan_and_stages():
    plan = dgsc.checkpoint_plan(60, 4, 4)
    assert plan == [0, 1, 4, 15, 20, 40, 59, 60]
    steps = sorted(set(int(round(10 ** (6 * i / 199))) for i in range(200)))
    lam = dgsc.staircase_fixture(steps, [2.0, 4.0], 10.0, 0.03, 1)
    found = dgsc.detect_boundaries(steps, lam, [0.03] * len(steps))
    assert len(found) == 2
    for b, expect in zip(found, [2.0, 4.0]):
        assert abs(math.log10(b["t"]) - expect) < 0.25


def test_parameter_count():
    assert dgsc.parameter_count() == 51717


def test_cli_round_trip(tmp_path):
    out = tmp_path / "llc"
    args = ["estimate-llc", "--potential", "l1", "--set", "sgld.steps=20000", "--set", "sgld.burn_in=4000"]
    assert dgsc.run_cli(args + ["--run-dir", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["lambda_hat"] - 1.0) < 0.2
    assert dgsc.run_cli(["estimate-llc", "--potential", "nope", "--run-dir", str(tmp_path / "bad")]) == 2
