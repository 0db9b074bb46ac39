import hashlib
import json
import math
import os

import numpy as np
import pytest

from ofu_diffusion import cli
from ofu_diffusion import config as config_mod
from ofu_diffusion.agent import AgentConfig, run
from ofu_diffusion.harness import (BENCHMARK, SweepConfig, compute_regret, decompose_regret, emit_plots,
                                   event_flags, fitted_exponent, oracle_model, plot_series, read_table,
                                   rho_star, run_cell, summarize, sweep)
from ofu_diffusion.jump_process import ClockConfig, poisson_envelope, rollout, sample_arrivals
from ofu_diffusion.models import Reward, model_from_dict
from ofu_diffusion.planning import evaluate_gain

FAST_AGENT = {"delta": 0.1, "theta_grid_per_axis": 5, "planner_radius": 6.0, "planner_spacing": 0.1}


def bench(eps):
    return model_from_dict(dict(BENCHMARK, epsilon=eps))


# ---------------------------------------------------------------------------
# regret


def test_zero_reward_regret_is_T_rho():
    m = bench(0.1)
    log = rollout(lambda x: np.zeros(1), m, ClockConfig(0.1, 50.0, 0), [0.0])
    log.rewards[:] = 0.0
    rep = compute_regret(log, 0.37)
    assert rep.regret == 50.0 * 0.37


def test_regret_identity_ulp():
    m = bench(0.1)
    rs, _ = rho_star(m)
    for seed in range(5):
        log = rollout(lambda x: -np.sign(x), m, ClockConfig(0.1, 200.0, seed), [0.0])
        rep = compute_regret(log, rs)
        assert rep.identity_error() <= rep.identity_tolerance()
        assert rep.realized_reward_sum == math.fsum(log.rewards)


def test_constant_policy_regret_rate_matches_gain_gap():
    m = bench(0.2)
    rs, _ = rho_star(m)
    bad = lambda x: np.ones(1)
    rates = [compute_regret(rollout(bad, m, ClockConfig(0.2, 2000.0, s), [0.0]), rs).regret / 2000.0
             for s in range(6)]
    se_r = np.std(rates, ddof=1) / math.sqrt(6)
    gain, se_g = evaluate_gain(bad, m, ClockConfig(0.2, 2000.0, 50), replicas=6)
    gap = rs - gain
    assert gap > 0.05
    assert abs(np.mean(rates) - gap) <= 3 * math.hypot(se_r, se_g)


def test_oracle_regret_rate_vanishes():
    m = bench(0.1)
    rs, _ = rho_star(m)
    om = oracle_model(m)
    rates = []
    for seed in range(6):
        res = run(AgentConfig(**FAST_AGENT), om, ClockConfig(0.1, 1000.0, seed), check_membership=False)
        rates.append(compute_regret(res.log, rs).regret / 1000.0)
    se = np.std(rates, ddof=1) / math.sqrt(6)
    # the planner grid is coarser than the truth grid: allow its discretization offset
    assert abs(np.mean(rates)) <= 3 * se + 0.01


# ---------------------------------------------------------------------------
# decomposition


def _decomposed(model, seed, T=200.0, agent=FAST_AGENT):
    rs, _ = rho_star(model)
    res = run(AgentConfig(**agent), model, ClockConfig(model.epsilon, T, seed))
    return res, rs, decompose_regret(res, model, rs)


def test_singleton_terms_vanish():
    m = oracle_model(bench(0.1))
    res, rs, dec = _decomposed(m, 0)
    assert dec["available"]
    assert dec["R3"] == 0.0 and dec["R4"] == 0.0
    assert dec["reconstruction_error"] <= dec["budget"]


def test_decomposition_terms_and_bounds():
    m = bench(0.1)
    for seed in range(3):
        res, rs, dec = _decomposed(m, seed, T=500.0)
        assert dec["available"]
        N = res.log.n_events
        assert dec["R1"] == pytest.approx((500.0 - 0.1 * N) * rs, rel=1e-12, abs=1e-12)
        assert dec["regret"] == compute_regret(res.log, rs).regret
        assert dec["reconstruction_error"] <= dec["budget"]
        assert abs(dec["R4"]) <= dec["R4_bound"] + 1e-12
        assert dec["switches"] == len(res.episodes) - 1


def test_R1_envelope_frequency():
    delta, eps, T, rs = 0.1, 0.1, 200.0, 0.5
    env = poisson_envelope(eps, T, delta)
    R1 = np.array([(T - eps * sample_arrivals(ClockConfig(eps, T, s)).size) * rs for s in range(1000)])
    assert abs(R1.mean()) <= 3 * R1.std() / math.sqrt(1000)
    viol = np.mean(np.abs(R1) > abs(rs) * env)
    assert viol <= delta + 3 * math.sqrt(delta * (1 - delta) / 1000)


def test_decomposition_flags_missing_solutions():
    m = bench(0.1)
    rs, _ = rho_star(m)
    res = run(AgentConfig(**FAST_AGENT), m, ClockConfig(0.1, 100.0, 0))
    res.cache.store.clear()
    assert decompose_regret(res, m, rs)["available"] is False


def test_event_flags_fields():
    m = bench(0.1)
    res = run(AgentConfig(**FAST_AGENT), m, ClockConfig(0.1, 100.0, 3))
    fl = event_flags(res, m, 0.1)
    assert set(fl) == {"coverage", "state_bound", "clock", "state_ratio"}
    assert fl["state_bound"] == (fl["state_ratio"] < 1.0)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_config_rejects_empty_and_orders_cells():
    with pytest.raises(ValueError):
        SweepConfig([], [1.0], [0])
    cfg = SweepConfig([0.2, 0.1], [10.0, 20.0], [1, 0])
    assert cfg.cells()[:3] == [(0.2, 10.0, 1), (0.2, 10.0, 0), (0.2, 20.0, 1)]


def test_single_cell_sweep_matches_direct_run():
    cfg = SweepConfig([0.1], [100.0], [4], agent=FAST_AGENT)
    rows, summary = sweep(cfg)
    assert len(rows) == 1 and not rows[0]["error"]
    m = bench(0.1)
    res = run(AgentConfig(**dict(FAST_AGENT, seed=4)), m, ClockConfig(0.1, 100.0, 4))
    rs, _ = rho_star(m)
    assert rows[0]["regret"] == compute_regret(res.log, rs).regret
    assert rows[0]["K_T"] == len(res.episodes)
    assert summary[0]["median_regret"] == rows[0]["regret"]


def test_sweep_records_failures_and_continues():
    cfg = SweepConfig([0.1, 2.0], [50.0], [0], agent=FAST_AGENT)
    rows, summary = sweep(cfg)
    assert not rows[0]["error"] and rows[1]["error"]
    assert [s["runs"] for s in summary] == [1, 0]


def test_sweep_csv_is_deterministic(tmp_path):
    digests = []
    for name in ("a", "b"):
        cfg = SweepConfig([0.2], [50.0, 100.0], [0, 1], agent=FAST_AGENT, out_dir=str(tmp_path / name))
        sweep(cfg)
        digests.append([hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest()
                        for f in ("runs.csv", "summary.csv")])
    assert digests[0] == digests[1]
    rows = read_table(tmp_path / "a" / "runs.csv")
    assert len(rows) == 4 and rows[0]["epsilon"] == 0.2


def test_summary_median_and_iqr():
    rows = [{"epsilon": 0.1, "T": 10.0, "regret": v, "K_T": 1, "N_T": 100, "coverage": True,
             "state_bound": True, "clock": c} for v, c in ((1.0, True), (2.0, True), (3.0, False), (10.0, True))]
    s = summarize(rows)[0]
    assert s["median_regret"] == 2.5 and s["iqr_regret"] == pytest.approx(np.percentile([1, 2, 3, 10], 75) - 1.75)
    assert s["event_violation_frequency"] == 0.25


def test_fitted_exponent_recovers_power():
    T = np.array([500.0, 2000.0, 8000.0])
    assert fitted_exponent(T, 3.0 * T ** 0.6) == pytest.approx(0.6)


# ---------------------------------------------------------------------------
# plots

SUMMARY = [{"epsilon": 0.1, "T": 100.0, "runs": 3, "median_regret": 5.0, "median_regret_per_T": 0.05,
            "coverage_frequency": 1.0},
           {"epsilon": 0.1, "T": 400.0, "runs": 3, "median_regret": 11.0, "median_regret_per_T": 0.0275,
            "coverage_frequency": 0.9}]


def test_plot_series_passes_values_through():
    gaps = [{"epsilon": 0.2, "gap": 0.013}, {"epsilon": 0.1, "gap": 0.007}]
    s = plot_series(SUMMARY, gaps)
    assert s["regret_vs_T"][0.1] == [(100.0, 5.0), (400.0, 11.0)]
    assert s["regret_per_T_vs_eps"][400.0] == [(0.1, 0.0275)]
    assert [v for _, v in s["coverage"]] == [1.0, 0.9]
    assert s["gain_gap_vs_eps"] == [(0.1, 0.007), (0.2, 0.013)]


def test_empty_series_omitted(tmp_path):
    files = emit_plots(SUMMARY, tmp_path)
    names = sorted(os.path.basename(f) for f in files)
    assert names == ["coverage.png", "regret_per_T_vs_eps.png", "regret_vs_T.png"]
    assert emit_plots([], tmp_path / "none") == []


def test_plots_byte_stable(tmp_path):
    a = emit_plots(SUMMARY, tmp_path / "a", gaps=[{"epsilon": 0.2, "gap": 0.01}])
    b = emit_plots(SUMMARY, tmp_path / "b", gaps=[{"epsilon": 0.2, "gap": 0.01}])
    for f, g in zip(a, b):
        assert open(f, "rb").read() == open(g, "rb").read()


# ---------------------------------------------------------------------------
# config and CLI


def test_config_json_and_toml(tmp_path):
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"agent": FAST_AGENT, "learn": {"runs": 3, "epsilon": 0.1, "horizon": 20.0}}))
    assert config_mod.load(j)["learn"]["runs"] == 3
    t = tmp_path / "c.toml"
    t.write_text("[sweep]\nepsilons = [0.2]\nhorizons = [50.0]\nseeds = [0, 1]\n")
    assert config_mod.load(t)["sweep"]["seeds"] == [0, 1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"agent": {"delta": "high"}}))
    with pytest.raises(Exception):
        config_mod.load(bad)


def _cfg(tmp_path, body):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(body))
    return str(p)


def test_cli_certify(tmp_path):
    assert cli.main(["certify", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "certificate.json").read_text())
    assert rep["violations"] == 0 and rep["care_residual"] <= 1e-10


def test_cli_run_writes_outputs(tmp_path):
    cfg = _cfg(tmp_path, {"agent": FAST_AGENT})
    assert cli.main(["run", "--config", cfg, "--eps", "0.1", "--horizon", "50", "--out", str(tmp_path / "r")]) == 0
    for f in ("events.csv", "episodes.csv", "telemetry.csv", "regret.json"):
        assert (tmp_path / "r" / f).exists()


def test_cli_sweep_and_plot(tmp_path):
    cfg = _cfg(tmp_path, {"agent": FAST_AGENT, "sweep": {"epsilons": [0.2], "horizons": [50.0], "seeds": [0]}})
    out = str(tmp_path / "s")
    assert cli.main(["sweep", "--config", cfg, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "runs.csv"))
    assert cli.main(["plot", "--out", out]) == 0


def test_cli_plan_small(tmp_path):
    cfg = _cfg(tmp_path, {"planner": {"epsilons": [0.4, 0.2], "radius": 5.0, "spacing": 0.1}})
    assert cli.main(["plan", "--config", cfg, "--out", str(tmp_path / "p")]) == 0
    assert len(read_table(tmp_path / "p" / "gaps.csv")) == 2


def test_cli_learn_small(tmp_path):
    cfg = _cfg(tmp_path, {"agent": FAST_AGENT, "learn": {"runs": 3, "epsilon": 0.1, "horizon": 20.0}})
    assert cli.main(["learn", "--config", cfg, "--out", str(tmp_path / "l")]) in (0, 2)
    assert len(read_table(tmp_path / "l" / "coverage.csv")) == 3


def test_cli_exit_codes(tmp_path):
    assert cli.main(["plot", "--out", str(tmp_path / "empty")]) == 2
    bad = _cfg(tmp_path, {"agent": {"delta": "high"}})
    assert cli.main(["run", "--config", bad]) == 1
    with pytest.raises(SystemExit):
        cli.main(["nonsense"])
