"""Optimistic learning agent with lazy policy updates.

Each episode k fixes a least-squares fit, a confidence set and an optimistic
parameter; the deployed policy is the diffusive greedy policy of that
parameter.  A new episode starts once some member of the episode's confidence
set has accumulated more drift discrepancy than twice the current radius.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .jump_process import ClockConfig, EventLog, rng_streams, sample_arrivals, sample_marks, step
from .learning import (DesignLog, DiscrepancyTracker, RadiusSchedule, RecursiveLinearFit, StateBound,
                       fit_nlls, sq_distances)
from .models import DriftFamily, ModelSpec
from .planning import GreedyPolicy, Grid, HjbSolution, solve_diffusive


class PlannerBudgetExceeded(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class AgentConfig:
    delta: float = 0.1
    theta_grid_per_axis: int = 9
    planner_radius: float | None = None     # None: 1.5 H_delta(N_T)
    planner_spacing: float = 0.05
    planner_tol: float = 1e-8
    action_points: int = 33
    initial_action: list | None = None
    initial_theta: list | None = None       # None: centre of the parameter box
    boundary_points: bool = True
    reevaluate: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.theta_grid_per_axis < 1:
            raise ValueError("theta grid needs at least one point per axis")


@dataclass
class EpisodeRecord:
    k: int
    n_k: int
    tau_k: float
    theta_tilde: np.ndarray
    theta_hat: np.ndarray
    beta_at_start: float
    planner_rho: float
    policy_id: int
    candidates: int = 0
    grid_members: int = 0
    theta_star_member: bool | None = None


class PlannerCache:
    """Diffusive solutions keyed by (theta, grid); never invalidated."""

    def __init__(self, tol: float = 1e-8):
        self.tol = tol
        self.store: dict = {}
        self.failures: list = []

    def key(self, theta, grid: Grid) -> tuple:
        return (np.asarray(theta, dtype=float).tobytes(), grid.signature())

    def get(self, model: ModelSpec, theta, grid: Grid) -> HjbSolution | None:
        k = self.key(theta, grid)
        if k not in self.store:
            sol = solve_diffusive(model.with_theta(theta), grid, self.tol)
            if not sol.converged:
                self.failures.append((np.asarray(theta).tolist(), sol.residual))
                return None
            self.store[k] = sol
        return self.store[k]

    def __len__(self) -> int:
        return len(self.store)


def planner_grid(model: ModelSpec, cfg: AgentConfig, radius: float) -> Grid:
    return Grid.for_model(model, radius, cfg.planner_spacing, cfg.action_points)


# ---------------------------------------------------------------------------
# operations


def lazy_trigger(sup_sq_discrepancy: float, beta: float) -> bool:
    """True iff sqrt(sup cumulative squared discrepancy) > 2 beta."""
    return math.sqrt(max(sup_sq_discrepancy, 0.0)) > 2.0 * beta


def boundary_candidates(theta_hat, gram: np.ndarray, beta: float, family: DriftFamily,
                        sq_dist=None) -> np.ndarray:
    """Points of the confidence ellipsoid along the Gram eigen- and coordinate directions.

    Each ray from theta_hat is cut at the box so the point stays in the set.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    p = theta_hat.size
    w, V = np.linalg.eigh(gram)
    dirs = list(V.T) + list(np.eye(p))
    out = []
    for u in dirs:
        for s in (1.0, -1.0):
            v = s * u
            q = float(v @ gram @ v)
            t = beta / math.sqrt(q) if q > 0 else np.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                up = np.where(v > 0, (family.theta_high - theta_hat) / v, np.inf)
                dn = np.where(v < 0, (family.theta_low - theta_hat) / v, np.inf)
            t = min(t, float(np.min(up)), float(np.min(dn)))
            if not np.isfinite(t) or t <= 0:
                continue
            pt = np.clip(theta_hat + t * v, family.theta_low, family.theta_high)
            if sq_dist is not None:
                # nonlinear families: the Gram metric is a local proxy, shrink until inside
                for _ in range(20):
                    if sq_dist(pt) <= beta * beta:
                        break
                    pt = theta_hat + 0.5 * (pt - theta_hat)
                else:
                    continue
            out.append(pt)
    return np.array(out).reshape(-1, p)


def select_optimistic(candidates, model: ModelSpec, grid: Grid, cache: PlannerCache,
                      theta_hat=None) -> tuple[np.ndarray, HjbSolution, list]:
    """Candidate with the largest diffusive gain; ties go to the lowest index.

    Candidates whose solve fails are skipped and reported.
    """
    best = None
    skipped = []
    for i, th in enumerate(np.atleast_2d(candidates)):
        sol = cache.get(model, th, grid)
        if sol is None:
            skipped.append(i)
            continue
        if best is None or sol.rho > best[1].rho:
            best = (np.array(th, dtype=float), sol)
    if best is None:
        raise PlannerBudgetExceeded("planner failed on every candidate")
    if theta_hat is not None:
        ref = cache.get(model, theta_hat, grid)
        if ref is not None and best[1].rho < ref.rho - cache.tol:
            raise AssertionError("optimistic gain below the gain of the fit")
    return best[0], best[1], skipped


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class AgentResult:
    log: EventLog
    episodes: list
    episode_of_event: np.ndarray
    member: np.ndarray            # theta* in C_n(delta/3) at each event n (nan where unchecked)
    betas: np.ndarray
    policies: list
    cache: PlannerCache
    grid: Grid
    diagnostics: dict = field(default_factory=dict)
    theta_hats: np.ndarray | None = None   # least-squares fit at each event (nan where not computed)
    H: np.ndarray | None = None            # learner's state envelope H_{delta/3}(n)

    @property
    def switches(self) -> int:
        return len(self.episodes) - 1

    def thetas_per_event(self) -> np.ndarray:
        th = np.array([e.theta_tilde for e in self.episodes])
        return th[self.episode_of_event]

    def running_regret(self, rho_star: float) -> np.ndarray:
        """tau_n rho* - sum_{i<n} r_i for n = 0..N."""
        cum = np.concatenate([[0.0], np.cumsum(self.log.rewards)])
        return self.log.arrivals * rho_star - cum

    def episodes_to_csv(self, path) -> None:
        p = self.episodes[0].theta_tilde.size if self.episodes else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "n_k", "tau_n_k"] + [f"theta_tilde_{i + 1}" for i in range(p)]
                       + [f"theta_hat_{i + 1}" for i in range(p)] + ["planner_rho", "beta"])
            for e in self.episodes:
                w.writerow([e.k, e.n_k, repr(float(e.tau_k))] + [repr(float(v)) for v in e.theta_tilde]
                           + [repr(float(v)) for v in e.theta_hat] + [repr(e.planner_rho), repr(e.beta_at_start)])

    def telemetry_to_csv(self, path, rho_star: float | None = None) -> None:
        """Per event: n, k(n), beta_n, H(n), theta_hat_n, membership of theta*, running regret."""
        n_ev = self.log.n_events
        reg = self.running_regret(rho_star) if rho_star is not None else None
        p = self.theta_hats.shape[1] if self.theta_hats is not None else 0
        f = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "k", "beta_n", "H_delta"] + [f"theta_hat_{i + 1}" for i in range(p)]
                       + ["member", "running_regret"])
            for n in range(n_ev + 1):
                k = int(self.episode_of_event[min(n, n_ev - 1)]) if n_ev else 0
                m = self.member[n] if n < self.member.size else np.nan
                th = [f(v) for v in self.theta_hats[n]] if p else []
                w.writerow([n, k, f(self.betas[n]), f(self.H[n]) if self.H is not None else ""] + th
                           + ["" if np.isnan(m) else int(m), "" if reg is None else f(reg[n])])


def learner_radius(family: DriftFamily, env: ModelSpec, x0, delta: float) -> RadiusSchedule:
    """beta_n(delta) built from the family-wide certificate (theta* unknown to the learner)."""
    L0 = family.lipschitz_L0(env.reward)
    bound = StateBound.from_model(env, family.family_lyapunov(), x0, L0=L0)
    return RadiusSchedule(family, env.epsilon, env.sigma_norm, L0, bound, delta)


def run(agent: AgentConfig, env: ModelSpec, cfg: ClockConfig, x0=None, cache: PlannerCache | None = None,
        check_membership: bool = True) -> AgentResult:
    """Closed-loop run.  a_0 is the initial control; a_n = pi_k(X_n) for n >= 1."""
    fam = env.family
    d, dA = env.d, env.dA
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float).reshape(d)
    streams = rng_streams(cfg.seed)
    arrivals = sample_arrivals(cfg, streams["clock"])
    N = arrivals.size
    marks = sample_marks(N, d, streams["marks"])
    cap = 10.0 * StateBound.from_model(env, env.lyapunov(), x0)(N, 0.1)

    level = agent.delta / 3.0
    radius = learner_radius(fam, env, x0, level)
    betas = radius(np.arange(N + 1))
    if agent.planner_radius is None:
        R = 1.5 * radius.H(max(N, 1))
    else:
        R = float(agent.planner_radius)
    grid = planner_grid(env, agent, R)
    cache = cache or PlannerCache(agent.planner_tol)
    theta_grid = fam.theta_grid(agent.theta_grid_per_axis)
    linear = fam.linear_in_theta

    states = np.empty((N + 1, d))
    actions = np.empty((N, dA))
    states[0] = x0
    k_of_n = np.zeros(N, dtype=int)
    member = np.full(N + 1, np.nan)
    theta_hats = np.full((N + 1, fam.dim_theta), np.nan)
    episodes: list[EpisodeRecord] = []
    policies: list[GreedyPolicy] = []
    diag = {"empty_grid_sets": 0, "skipped_candidates": 0, "clamped": 0, "membership_refits": 0}

    fit = RecursiveLinearFit(fam, env.epsilon) if linear else None
    X_rows: list = []
    A_rows: list = []
    theta_star = env.theta

    def design(n):
        if linear:
            return fit.design()
        return DesignLog.from_trajectory(states[: n + 1], actions[:n], env.epsilon)

    def sqd(thetas, ref, n):
        if linear:
            D = np.atleast_2d(thetas) - ref
            return np.einsum("mi,ij,mj->m", D, fit.G, D)
        return sq_distances(thetas, ref, design(n), fam)

    def start_episode(n, theta_hat, beta, cand_in_set):
        nonlocal tracker_ref, cand
        # C_0 is the whole box; afterwards members of the confidence set on the grid
        gm = cand_in_set
        if gm.shape[0] == 0:
            diag["empty_grid_sets"] += 1
        extra = [theta_hat]
        if agent.boundary_points and n > 0:
            if linear:
                bp = boundary_candidates(theta_hat, fit.G, beta, fam)
            else:
                dl = design(n)
                J = env.epsilon * fam.jacobian(theta_hat, dl.states, dl.actions).reshape(-1, fam.dim_theta)
                bp = boundary_candidates(theta_hat, J.T @ J, beta, fam,
                                         sq_dist=lambda t: sq_distances(t, theta_hat, dl, fam)[0])
            extra += list(bp)
        candidates = np.vstack([gm] + [np.atleast_2d(e) for e in extra]) if gm.size else np.array(extra)
        plan_model = env.with_theta(theta_hat)
        th_tilde, sol, skipped = select_optimistic(candidates, plan_model, grid, cache, theta_hat)
        diag["skipped_candidates"] += len(skipped)
        pol = GreedyPolicy(sol, env.with_theta(th_tilde), agent.reevaluate)
        policies.append(pol)
        mem = None
        if n > 0:
            mem = bool(math.sqrt(max(float(sqd(theta_star, theta_hat, n)[0]), 0.0)) <= beta)
        episodes.append(EpisodeRecord(len(episodes), n, float(arrivals[n - 1]) if n > 0 else 0.0,
                                      th_tilde, np.asarray(theta_hat, dtype=float).copy(), float(beta),
                                      float(sol.rho), len(policies) - 1, candidates.shape[0],
                                      int(gm.shape[0]), mem))
        tracker_ref = np.asarray(theta_hat, dtype=float).copy()
        cand = candidates
        return pol

    tracker_ref = None
    cand = None
    theta0 = fam.theta_center() if agent.initial_theta is None else np.asarray(agent.initial_theta, float)
    pol = start_episode(0, theta0, float(betas[0]), theta_grid)
    tracker = None if linear else DiscrepancyTracker(fam, env.epsilon, cand, tracker_ref)

    x = x0
    exploded = False
    n_done = N
    a0 = np.zeros(dA) if agent.initial_action is None else np.asarray(agent.initial_action, float)
    for n in range(N):
        if n >= 1:
            xp, ap = states[n - 1], actions[n - 1]
            if linear:
                fit.update(xp, ap, x - xp)
            else:
                tracker.update(xp, ap)
            beta = betas[n]
            if linear:
                sup = float(np.max(sqd(cand, tracker_ref, n)))
            else:
                sup = tracker.sup()
            if lazy_trigger(sup, beta):
                if linear:
                    th_hat = fit.estimate()
                else:
                    th_hat = fit_nlls(design(n), fam, previous=episodes[-1].theta_hat).theta
                inside = sqd(theta_grid, th_hat, n) <= beta * beta
                pol = start_episode(n, th_hat, beta, theta_grid[inside])
                if not linear:
                    tracker = DiscrepancyTracker(fam, env.epsilon, cand, tracker_ref, design(n))
            if check_membership:
                member[n], th_n = _member_now(fam, fit, theta_star, betas[n], linear, n, episodes, diag,
                                              lambda: design(n))
                if th_n is not None:
                    theta_hats[n] = th_n
        a = a0 if n == 0 else np.asarray(pol(x), dtype=float).reshape(dA)
        actions[n] = a
        k_of_n[n] = len(episodes) - 1
        x = step(x, a, env, marks[n])
        states[n + 1] = x
        if math.sqrt(float(x @ x)) > cap:
            exploded = True
            n_done = n + 1
            break
    if check_membership and n_done == N and N >= 1 and not exploded:
        # membership at N uses the full design
        if linear:
            fit.update(states[N - 1], actions[N - 1], states[N] - states[N - 1])
        member[N], th_n = _member_now(fam, fit, theta_star, betas[N], linear, N, episodes, diag,
                                      lambda: DesignLog.from_trajectory(states, actions, env.epsilon))
        if th_n is not None:
            theta_hats[N] = th_n
    states, actions, marks, k_of_n = states[: n_done + 1], actions[:n_done], marks[:n_done], k_of_n[:n_done]
    rewards = env.epsilon * env.reward_bar(states[:-1], actions)
    log = EventLog(np.concatenate([[0.0], arrivals[:n_done]]), states, actions,
                   np.asarray(rewards, dtype=float).reshape(n_done), marks, env.epsilon, cfg.horizon_T,
                   exploded, cap, {"seed": cfg.seed})
    diag["clamped"] = sum(p.clamped for p in policies)
    diag["planner_radius"] = grid.R
    return AgentResult(log, episodes, k_of_n, member[: n_done + 1], betas[: n_done + 1], policies,
                       cache, grid, diag, theta_hats[: n_done + 1], radius.H(np.arange(n_done + 1)))


def _member_now(fam, fit, theta_star, beta, linear, n, episodes, diag, design_fn) -> tuple[float, np.ndarray | None]:
    """(theta* in C_n, theta_hat_n): distance to the constrained fit at n is at most beta_n."""
    if not linear:
        # nonlinear families: exact refits are costly, check on a doubling schedule and at episode starts
        if n & (n - 1) and episodes[-1].n_k != n:
            return np.nan, None
        th = fit_nlls(design_fn(), fam, previous=episodes[-1].theta_hat).theta
        return float(math.sqrt(sq_distances(theta_star, th, design_fn(), fam)[0]) <= beta), th
    ols = fit.unconstrained()
    if ols is not None and fam.contains(ols):
        D = theta_star - ols
        return float(float(D @ fit.G @ D) <= beta * beta), ols
    diag["membership_refits"] += 1
    th = fit.estimate()
    return float(fit.sq_distance(theta_star) <= beta * beta), th
