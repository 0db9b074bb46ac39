"""Command line entry point.

Exit codes: 0 success, 2 a check failed, 1 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import config as config_mod
from .agent import AgentConfig, run
from .harness import (BENCHMARK, BENCHMARK_AGENT, SweepConfig, compute_regret, decompose_regret, emit_plots,
                      event_flags, gap_study, read_table, rho_star, sweep, write_table)
from .jump_process import ClockConfig
from .models import contraction_probes, model_from_dict, verify_contraction, care_residual

OK, FAILED, FAULT = 0, 2, 1


def _floats(text: str | None) -> list | None:
    if text is None:
        return None
    return [float(v) for v in text.split(",") if v.strip()]


def _setup(args) -> dict:
    cfg = config_mod.load(args.config) if args.config else {}
    cfg.setdefault("model", dict(BENCHMARK))
    cfg.setdefault("agent", dict(BENCHMARK_AGENT))
    if args.delta is not None:
        cfg["agent"]["delta"] = args.delta
    if args.seed is not None:
        cfg["agent"]["seed"] = args.seed
    return cfg


def _out(args, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_certify(args, cfg) -> int:
    eps = (_floats(args.eps) or [cfg["model"].get("epsilon", 0.1)])[0]
    model = model_from_dict(dict(cfg["model"], epsilon=eps))
    lyap = model.lyapunov()
    # the tanh family uses a Euclidean certificate, not a Lyapunov-equation solve
    res = care_residual(model.family.split(model.theta)[0], lyap.metric) if model.family.family_id == "linear" else 0.0
    probes = contraction_probes(model, lyap, 10_000, seed=args.seed or 0)
    rep = verify_contraction(model, lyap, *probes)
    fam_lyap = model.family.family_lyapunov()
    report = {"care_residual": res, "c_V": lyap.c_V, "ell_V": lyap.ell_V, "L_V": lyap.L_V, "M_V": lyap.M_V,
              "M_V_prime": lyap.M_V_prime, "eps_max": lyap.eps_max, "family_eps_max": fam_lyap.eps_max,
              "probes": rep.n_probes, "violations": int(rep.n_probes - rep.n_pass), "epsilon": eps,
              "epsilon_certified": eps <= fam_lyap.eps_max}
    print(json.dumps(report, indent=2))
    if args.out:
        with open(os.path.join(_out(args, "."), "certificate.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return OK if (res <= 1e-10 and rep.passed) else FAILED


def cmd_plan(args, cfg) -> int:
    pl = cfg.get("planner", {})
    eps = _floats(args.eps) or pl.get("epsilons", [0.4, 0.2, 0.1, 0.05])
    tol = pl.get("tol", 1e-8)
    model = model_from_dict(dict(cfg["model"], epsilon=eps[0]))
    rows = gap_study(model, eps, pl.get("radius", 8.0), pl.get("spacing", 0.0125), tol)
    out = _out(args, "plan_out")
    write_table(os.path.join(out, "gaps.csv"), rows,
                ["epsilon", "rho_jump", "rho_diffusive", "gap", "suboptimality", "residual_jump",
                 "residual_diffusive"])
    emit_plots([], os.path.join(out, "plots"), gaps=rows)
    for r in rows:
        print(f"eps={r['epsilon']:g} rho*={r['rho_jump']:.6f} gap={r['gap']:.3e} subopt={r['suboptimality']:.3e}")
    ok = all(r["residual_jump"] <= tol and r["residual_diffusive"] <= tol for r in rows)
    return OK if ok else FAILED


def cmd_learn(args, cfg) -> int:
    ln = cfg.get("learn", {})
    eps = (_floats(args.eps) or [ln.get("epsilon", 0.1)])[0]
    T = args.horizon if args.horizon is not None else ln.get("horizon", 100.0)
    runs = ln.get("runs", 200)
    env = model_from_dict(dict(cfg["model"], epsilon=eps))
    agent = AgentConfig(**cfg["agent"])
    base = agent.seed
    rows = []
    for i in range(runs):
        res = run(agent, env, ClockConfig(eps, T, base + i))
        fl = event_flags(res, env, agent.delta)
        rows.append({"seed": base + i, "N_T": res.log.n_events, "K_T": len(res.episodes), **fl})
    out = _out(args, "learn_out")
    write_table(os.path.join(out, "coverage.csv"), rows, ["seed", "N_T", "K_T", "coverage", "state_bound",
                                                           "clock", "state_ratio"])
    freq = float(np.mean([r["coverage"] and r["state_bound"] for r in rows]))
    d = agent.delta
    floor = 1.0 - d - 3.0 * math.sqrt(d * (1.0 - d) / runs)
    print(f"joint coverage frequency {freq:.3f} over {runs} runs (floor {floor:.3f})")
    return OK if freq >= floor else FAILED


def cmd_run(args, cfg) -> int:
    eps = (_floats(args.eps) or [cfg["model"].get("epsilon", 0.05)])[0]
    T = args.horizon if args.horizon is not None else 1000.0
    env = model_from_dict(dict(cfg["model"], epsilon=eps))
    agent = AgentConfig(**cfg["agent"])
    res = run(agent, env, ClockConfig(eps, T, agent.seed))
    rs, resid = rho_star(env)
    rep = compute_regret(res.log, rs)
    dec = decompose_regret(res, env, rs, delta=agent.delta)
    out = _out(args, "run_out")
    res.log.to_csv(os.path.join(out, "events.csv"))
    res.episodes_to_csv(os.path.join(out, "episodes.csv"))
    res.telemetry_to_csv(os.path.join(out, "telemetry.csv"), rs)
    summary = {"T": T, "epsilon": eps, "seed": agent.seed, "N_T": rep.N_T, "K_T": len(res.episodes),
               "rho_star": rs, "rho_star_residual": resid, "reward_sum": rep.realized_reward_sum,
               "regret": rep.regret, "decomposition": {k: float(v) for k, v in dec.items()
                                                        if isinstance(v, (int, float, np.floating))},
               "events": event_flags(res, env, agent.delta)}
    with open(os.path.join(out, "regret.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps({k: summary[k] for k in ("N_T", "K_T", "rho_star", "regret")}))
    ok = rep.identity_error() <= rep.identity_tolerance() and (
        not dec.get("available") or dec["reconstruction_error"] <= dec["budget"])
    return OK if ok else FAILED


def cmd_sweep(args, cfg) -> int:
    sw = cfg.get("sweep", {})
    seeds = sw.get("seeds", [0])
    if args.seed is not None and "seeds" not in sw:
        seeds = [args.seed]
    horizons = [args.horizon] if args.horizon is not None else sw.get("horizons", [500.0])
    sc = SweepConfig(_floats(args.eps) or sw.get("epsilons", [0.05]), horizons, seeds, cfg["model"],
                     cfg["agent"], _out(args, "sweep_out"), sw.get("oracle", False), sw.get("decompose", False))
    rows, _ = sweep(sc, progress=lambda m: print(m, file=sys.stderr))
    return FAILED if any(r.get("error") for r in rows) else OK


def cmd_plot(args, cfg) -> int:
    src = args.out or "sweep_out"
    summary = read_table(os.path.join(src, "summary.csv")) if os.path.exists(os.path.join(src, "summary.csv")) else []
    gaps_path = os.path.join(src, "gaps.csv")
    gaps = read_table(gaps_path) if os.path.exists(gaps_path) else None
    for r in summary:
        r["runs"] = int(r["runs"] or 0)
    files = emit_plots(summary, os.path.join(src, "plots"), gaps=gaps)
    for f in files:
        print(f)
    return OK if files else FAILED


COMMANDS = {"certify": cmd_certify, "plan": cmd_plan, "learn": cmd_learn, "run": cmd_run,
            "sweep": cmd_sweep, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ofu-diffusion", description="Optimistic learning for jump-driven control.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON or TOML experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--eps", help="clock scale, or comma-separated list")
        s.add_argument("--horizon", type=float)
        s.add_argument("--delta", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _setup(args)
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:   # every fault maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return FAULT


if __name__ == "__main__":
    sys.exit(main())
