"""Regret accounting, seeded sweeps and plots."""
from __future__ import annotations

import csv
import json
import math
import os
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import AgentConfig, AgentResult, PlannerCache, run
from .jump_process import ClockConfig, poisson_envelope
from .learning import StateBound
from .models import LinearFamily, ModelSpec, Reward, model_from_dict
from .planning import Grid, gauss_hermite, solve_jump

# ---------------------------------------------------------------------------
# benchmark


BENCHMARK = {
    "family_id": "linear", "d": 1, "dA": 1,
    "theta_low": [-2.0, 0.1], "theta_high": [-0.5, 3.0],
    "action_low": [-1.0], "action_high": [1.0],
    "theta": [-1.0, 1.0], "sigma_bar": [[1.0]],
    "reward": {"kind": "bump_quadratic", "center": 1.0},
}
BENCHMARK_AGENT = {"delta": 0.1, "theta_grid_per_axis": 9, "planner_radius": 8.0, "planner_spacing": 0.05}
TRUTH_GRID = {"radius": 8.0, "spacing": 0.0125}


def benchmark_model(epsilon: float, overrides: dict | None = None) -> ModelSpec:
    cfg = dict(BENCHMARK, epsilon=epsilon)
    cfg.update(overrides or {})
    return model_from_dict(cfg)


def oracle_model(model: ModelSpec) -> ModelSpec:
    """Same model with the parameter box collapsed to theta*: the agent knows the drift."""
    f = model.family
    fam = type(f)(f.d, f.dA, model.theta, model.theta, f.action_low, f.action_high)
    return ModelSpec(fam, model.theta, model.sigma_bar, model.epsilon, model.reward)


_RHO_CACHE: dict = {}


def rho_star(model: ModelSpec, radius: float = TRUTH_GRID["radius"], spacing: float = TRUTH_GRID["spacing"],
             tol: float = 1e-9) -> tuple[float, float]:
    """(rho*, residual) from a fine jump solve; cached per model and grid."""
    key = (json.dumps(model.to_dict(), sort_keys=True), radius, spacing, tol)
    if key not in _RHO_CACHE:
        sol = solve_jump(model, Grid.for_model(model, radius, spacing), tol)
        _RHO_CACHE[key] = (sol.rho, sol.residual)
    return _RHO_CACHE[key]


# ---------------------------------------------------------------------------
# regret


@dataclass
class RegretReport:
    T: float
    N_T: int
    rho_star: float
    realized_reward_sum: float
    regret: float
    decomposition: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)

    def identity_error(self) -> float:
        return abs(self.regret + self.realized_reward_sum - self.T * self.rho_star)

    def identity_tolerance(self) -> float:
        scale = max(abs(self.T * self.rho_star), abs(self.realized_reward_sum), abs(self.regret))
        return 4.0 * math.ulp(scale) if scale > 0 else 0.0


def compute_regret(log, rho_star_value: float) -> RegretReport:
    """T rho* minus the collected rewards (compensated summation)."""
    S = math.fsum(float(r) for r in log.rewards)
    reg = log.horizon_T * rho_star_value - S
    return RegretReport(log.horizon_T, log.n_events, rho_star_value, S, reg)


def _expected_w(sol, model: ModelSpec, theta, X, A, K: int) -> np.ndarray:
    """E[W(x + mu_theta(x, a) + Sigma xi)] by Gauss-Hermite at each row."""
    Z, Wq = gauss_hermite(K, model.d)
    shocks = Z @ model.noise_matrix.T
    mean = X + model.epsilon * model.family.drift_bar(theta, X, A)
    pts = (mean[:, None, :] + shocks[None]).reshape(-1, model.d)
    return sol.grid.interpolate(sol.w, pts).reshape(X.shape[0], -1) @ Wq


def decompose_regret(result: AgentResult, env: ModelSpec, rho_star_value: float, K: int = 11,
                     K_check: int = 21, delta: float = 0.1) -> dict:
    """Per-event split of the regret into R1..R5.

    With W_j the deployed diffusive relative value and rho_j its gain,
      R1 = (T - eps N) rho*
      R2 = sum eps (rho* - rho_j) + e_j,   e_j = eps rho_j - E_j^{theta_j} W_j + W_j(X_j) - r_j
      R3 = sum E_j^{theta_j} W_j - E_j^{theta*} W_j
      R4 = sum W_j(X_{j+1}) - W_{j+1}(X_{j+1})
      R5 = sum E_j^{theta*} W_j - W_j(X_{j+1}) + W_{j+1}(X_{j+1}) - W_j(X_j)
    which add up to the regret identically.  The declared budget is rounding
    plus the change of the quadrature terms between K and K_check nodes.
    """
    log = result.log
    N = log.n_events
    eps = env.epsilon
    X, A, r = log.states, log.actions, log.rewards
    k_of = result.episode_of_event
    eps_list = result.episodes
    sols, missing = [], []
    for e in eps_list:
        key = result.cache.key(e.theta_tilde, result.grid)
        sols.append(result.cache.store.get(key))
        if sols[-1] is None:
            missing.append(e.k)
    if missing:
        return {"available": False, "missing_episodes": missing}

    W_now = np.empty(N)        # W_j(X_j)
    W_next_same = np.empty(N)  # W_j(X_{j+1})
    W_next_new = np.empty(N)   # W_{j+1}(X_{j+1})
    E_own = np.empty(N)
    E_true = np.empty(N)
    E_own_chk = np.empty(N)
    E_true_chk = np.empty(N)
    rho_j = np.empty(N)
    # the episode active after the last event is the last one
    k_next = np.append(k_of[1:], k_of[-1]) if N else k_of
    for k, (e, sol) in enumerate(zip(eps_list, sols)):
        idx = np.nonzero(k_of == k)[0]
        if idx.size:
            Xi, Ai = X[idx], A[idx]
            W_now[idx] = sol.grid.interpolate(sol.w, Xi)
            W_next_same[idx] = sol.grid.interpolate(sol.w, X[idx + 1])
            E_own[idx] = _expected_w(sol, env, e.theta_tilde, Xi, Ai, K)
            E_true[idx] = _expected_w(sol, env, env.theta, Xi, Ai, K)
            E_own_chk[idx] = _expected_w(sol, env, e.theta_tilde, Xi, Ai, K_check)
            E_true_chk[idx] = _expected_w(sol, env, env.theta, Xi, Ai, K_check)
            rho_j[idx] = sol.rho
        nidx = np.nonzero(k_next == k)[0]
        if nidx.size:
            W_next_new[nidx] = sol.grid.interpolate(sol.w, X[nidx + 1])

    T = log.horizon_T
    fs = math.fsum
    R1 = (T - eps * N) * rho_star_value
    e_terms = eps * rho_j - E_own + W_now - r
    R2 = fs(eps * (rho_star_value - rho_j)) + fs(e_terms)
    R3 = fs(E_own - E_true)
    R4 = fs(W_next_same - W_next_new)
    R5 = fs(E_true - W_next_same) + fs(W_next_new - W_now)
    total = fs([R1, R2, R3, R4, R5])
    reg = compute_regret(log, rho_star_value).regret

    mags = [abs(R1), np.sum(np.abs(eps * rho_j)), np.sum(np.abs(E_own)), np.sum(np.abs(W_now)),
            np.sum(np.abs(r)), np.sum(np.abs(E_true)), np.sum(np.abs(W_next_same)), np.sum(np.abs(W_next_new))]
    rounding = 64.0 * np.finfo(float).eps * float(sum(mags))
    quadrature = float(np.sum(np.abs(E_own - E_own_chk)) + np.sum(np.abs(E_true - E_true_chk)))

    L_W = max(s.lipschitz_estimate for s in sols)
    drift_gap = np.zeros(N)
    if N:
        th = result.thetas_per_event()
        mu_own = np.stack([env.family.drift_bar(t, x[None], a[None])[0] for t, x, a in zip(th, X[:-1], A)])
        mu_star = env.family.drift_bar(env.theta, X[:-1], A)
        drift_gap = eps * np.linalg.norm(mu_own - mu_star, axis=1)
    sup_state = float(np.max(np.linalg.norm(X, axis=1))) if X.size else 0.0
    switches = int(np.sum(k_next != k_of)) if N else 0
    return {
        "available": True,
        "R1": R1, "R2": R2, "R3": R3, "R4": R4, "R5": R5,
        "e_sum": fs(e_terms),
        "sum": total, "regret": reg, "reconstruction_error": abs(reg - total),
        "budget": rounding + quadrature, "budget_rounding": rounding, "budget_quadrature": quadrature,
        "L_W": L_W,
        "R3_bound": L_W * float(np.sum(drift_gap)),
        "R4_bound": 2.0 * L_W * (1.0 + sup_state) * switches,
        "R1_envelope": abs(rho_star_value) * poisson_envelope(eps, T, delta),
        "switches": switches,
        "sup_state": sup_state,
    }


def event_flags(result: AgentResult, env: ModelSpec, delta: float) -> dict:
    """Coverage, state-bound and clock events of one run (True = event holds)."""
    log = result.log
    mem = result.member[1:]
    checked = mem[~np.isnan(mem)]
    coverage = bool(np.all(checked == 1.0)) if checked.size else True
    x0 = log.states[0]
    fam = env.family
    bound = StateBound.from_model(env, fam.family_lyapunov(), x0, L0=fam.lipschitz_L0(env.reward))
    H = bound(np.arange(log.states.shape[0]), delta / 3.0)
    ratio = float(np.max(np.linalg.norm(log.states, axis=1) / H))
    clock = abs(env.epsilon * log.n_events - log.horizon_T) <= poisson_envelope(env.epsilon, log.horizon_T, delta / 3.0)
    return {"coverage": coverage, "state_bound": ratio < 1.0 and not log.exploded, "clock": bool(clock),
            "state_ratio": ratio}


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepConfig:
    epsilons: list
    horizons: list
    seeds: list
    model: dict = field(default_factory=lambda: dict(BENCHMARK))
    agent: dict = field(default_factory=lambda: dict(BENCHMARK_AGENT))
    out_dir: str | None = None
    oracle: bool = False
    decompose: bool = False

    def __post_init__(self):
        if not (self.epsilons and self.horizons and self.seeds):
            raise ValueError("sweep lists must be nonempty")

    def cells(self) -> list:
        return [(float(e), float(T), int(s)) for e in self.epsilons for T in self.horizons for s in self.seeds]


RUN_COLUMNS = ["epsilon", "T", "seed", "N_T", "K_T", "rho_star", "rho_star_residual", "reward_sum", "regret",
               "regret_per_T", "coverage", "state_bound", "clock", "state_ratio", "exploded", "clamped",
               "oracle_regret", "R1", "R2", "R3", "R4", "R5", "reconstruction_error", "budget",
               "R3_bound", "R4_bound", "L_W", "error"]


def run_cell(cfg: SweepConfig, eps: float, T: float, seed: int, caches: dict) -> dict:
    env = model_from_dict(dict(cfg.model, epsilon=eps))
    agent = AgentConfig(**dict(cfg.agent, seed=seed))
    rs, res = rho_star(env)
    row = {"epsilon": eps, "T": T, "seed": seed, "rho_star": rs, "rho_star_residual": res, "error": ""}
    ck = json.dumps(cfg.model, sort_keys=True)
    cache = caches.setdefault(ck, PlannerCache(agent.planner_tol))
    result = run(agent, env, ClockConfig(eps, T, seed), cache=cache)
    rep = compute_regret(result.log, rs)
    flags = event_flags(result, env, agent.delta)
    row.update(N_T=rep.N_T, K_T=len(result.episodes), reward_sum=rep.realized_reward_sum, regret=rep.regret,
               regret_per_T=rep.regret / T if T > 0 else 0.0, exploded=result.log.exploded,
               clamped=result.diagnostics["clamped"], **flags)
    if cfg.decompose:
        dec = decompose_regret(result, env, rs)
        if dec.get("available"):
            row.update({k: dec[k] for k in ("R1", "R2", "R3", "R4", "R5", "reconstruction_error", "budget",
                                           "R3_bound", "R4_bound", "L_W")})
    if cfg.oracle:
        oenv = oracle_model(env)
        ocache = caches.setdefault(ck + "#oracle", PlannerCache(agent.planner_tol))
        ores = run(agent, oenv, ClockConfig(eps, T, seed), cache=ocache, check_membership=False)
        row["oracle_regret"] = compute_regret(ores.log, rs).regret
    return row


def sweep(cfg: SweepConfig, progress=None) -> tuple[list, list]:
    """One row per (eps, T, seed) in that order; failures are recorded and skipped."""
    rows = []
    caches: dict = {}
    for eps, T, seed in cfg.cells():
        try:
            row = run_cell(cfg, eps, T, seed, caches)
        except Exception as exc:     # a failed run is recorded, the sweep continues
            row = {"epsilon": eps, "T": T, "seed": seed,
                   "error": f"{type(exc).__name__}: {exc}".replace("\n", " ")}
            if progress:
                progress(traceback.format_exc())
        rows.append(row)
        if progress:
            progress(f"eps={eps} T={T} seed={seed} regret={row.get('regret')}")
    summary = summarize(rows)
    if cfg.out_dir:
        write_sweep(cfg, rows, summary)
    return rows, summary


def summarize(rows: list) -> list:
    out = []
    keys = sorted({(r["epsilon"], r["T"]) for r in rows})
    for eps, T in keys:
        cell = [r for r in rows if r["epsilon"] == eps and r["T"] == T and not r.get("error")]
        if not cell:
            out.append({"epsilon": eps, "T": T, "runs": 0})
            continue
        reg = np.array([r["regret"] for r in cell])
        q1, med, q3 = np.percentile(reg, [25, 50, 75])
        s = {"epsilon": eps, "T": T, "runs": len(cell), "median_regret": float(med), "iqr_regret": float(q3 - q1),
             "median_regret_per_T": float(med / T) if T > 0 else 0.0,
             "median_K_T": float(np.median([r["K_T"] for r in cell])),
             "median_N_T": float(np.median([r["N_T"] for r in cell])),
             "coverage_frequency": float(np.mean([r["coverage"] and r["state_bound"] for r in cell])),
             "event_violation_frequency": float(np.mean([not (r["coverage"] and r["state_bound"] and r["clock"])
                                                         for r in cell]))}
        if all(r.get("oracle_regret") is not None for r in cell):
            s["median_oracle_regret"] = float(np.median([r["oracle_regret"] for r in cell]))
        out.append(s)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, rows: list, columns: list | None = None) -> None:
    columns = columns or sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_table(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            if v == "":
                conv[k] = None
                continue
            try:
                conv[k] = float(v)
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


SUMMARY_COLUMNS = ["epsilon", "T", "runs", "median_regret", "iqr_regret", "median_regret_per_T", "median_K_T",
                   "median_N_T", "coverage_frequency", "event_violation_frequency", "median_oracle_regret"]


def write_sweep(cfg: SweepConfig, rows: list, summary: list) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_table(os.path.join(cfg.out_dir, "runs.csv"), rows, RUN_COLUMNS)
    write_table(os.path.join(cfg.out_dir, "summary.csv"), summary, SUMMARY_COLUMNS)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
    emit_plots(summary, os.path.join(cfg.out_dir, "plots"))


def fitted_exponent(x, y) -> float:
    """Least-squares slope of log y against log x (nan if some y <= 0)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.any(y <= 0) or x.size < 2:
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# plots


def plot_series(summary: list, gaps: list | None = None) -> dict:
    """The exact (x, y) data behind each figure; empty series are dropped."""
    series = {}
    eps_vals = sorted({r["epsilon"] for r in summary if r.get("runs")})
    reg = {}
    for e in eps_vals:
        pts = [(r["T"], r["median_regret"]) for r in summary
               if r["epsilon"] == e and r.get("runs") and r["median_regret"] is not None and r["median_regret"] > 0]
        if pts:
            reg[e] = sorted(pts)
    if reg:
        series["regret_vs_T"] = reg
    Ts = sorted({r["T"] for r in summary if r.get("runs")})
    per = {}
    for T in Ts:
        pts = [(r["epsilon"], r["median_regret_per_T"]) for r in summary
               if r["T"] == T and r.get("runs") and r["median_regret_per_T"] is not None]
        if pts:
            per[T] = sorted(pts)
    if per:
        series["regret_per_T_vs_eps"] = per
    cov = [(f"eps={r['epsilon']:g},T={r['T']:g}", r["coverage_frequency"]) for r in summary
           if r.get("runs") and r.get("coverage_frequency") is not None]
    if cov:
        series["coverage"] = cov
    if gaps:
        series["gain_gap_vs_eps"] = sorted((g["epsilon"], g["gap"]) for g in gaps)
    return series


def emit_plots(summary: list, out_dir, gaps: list | None = None) -> list:
    """Static PNGs; metadata without timestamps so reruns are byte-stable."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    series = plot_series(summary, gaps)
    written = []
    meta = {"Software": None}

    def save(fig, name):
        path = os.path.join(out_dir, name)
        fig.savefig(path, format="png", metadata=meta, dpi=80)
        plt.close(fig)
        written.append(path)

    if "regret_vs_T" in series:
        fig, ax = plt.subplots()
        for e, pts in series["regret_vs_T"].items():
            ax.loglog(*zip(*pts), marker="o", label=f"eps={e:g}")
        ax.set_xlabel("T")
        ax.set_ylabel("median regret")
        ax.legend()
        save(fig, "regret_vs_T.png")
    if "regret_per_T_vs_eps" in series:
        fig, ax = plt.subplots()
        for T, pts in series["regret_per_T_vs_eps"].items():
            ax.plot(*zip(*pts), marker="o", label=f"T={T:g}")
        ax.set_xscale("log")
        ax.set_xlabel("eps")
        ax.set_ylabel("median regret / T")
        ax.legend()
        save(fig, "regret_per_T_vs_eps.png")
    if "coverage" in series:
        fig, ax = plt.subplots()
        labels, vals = zip(*series["coverage"])
        ax.bar(range(len(vals)), vals)
        ax.set_xticks(range(len(vals)), labels, rotation=45, ha="right")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("coverage and boundedness frequency")
        fig.tight_layout()
        save(fig, "coverage.png")
    if "gain_gap_vs_eps" in series:
        fig, ax = plt.subplots()
        ax.loglog(*zip(*series["gain_gap_vs_eps"]), marker="o")
        ax.set_xlabel("eps")
        ax.set_ylabel("|rho_bar* - rho*|")
        save(fig, "gain_gap_vs_eps.png")
    return written


# ---------------------------------------------------------------------------
# planner study


def gap_study(model: ModelSpec, epsilons, radius: float = 8.0, spacing: float = 0.0125, tol: float = 1e-8) -> list:
    """|rho_bar* - rho*| and the event-dynamics suboptimality of the diffusive policy along eps.

    The diffusive gain is Richardson-extrapolated from spacings h and 2h
    (the upwind scheme is first order in h).
    """
    from .planning import evaluate_policy_jump, solve_diffusive
    fine = Grid.for_model(model, radius, spacing)
    coarse = Grid.for_model(model, radius, 2.0 * spacing)
    d_fine = solve_diffusive(model, fine, tol)
    d_coarse = solve_diffusive(model, coarse, tol)
    rho_bar = 2.0 * d_fine.rho - d_coarse.rho
    out = []
    for e in epsilons:
        m = model.with_epsilon(float(e))
        j = solve_jump(m, fine, tol)
        gain = evaluate_policy_jump(m, fine, d_fine.policy_index)
        out.append({"epsilon": float(e), "rho_jump": j.rho, "rho_diffusive": rho_bar,
                    "gap": abs(rho_bar - j.rho), "suboptimality": j.rho - gain,
                    "residual_jump": j.residual, "residual_diffusive": d_fine.residual})
    return out
