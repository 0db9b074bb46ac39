"""Ergodic HJB solvers on a box grid.

``solve_diffusive`` discretizes the diffusive HJB with an upwind Markov-chain
approximation (reflecting at the box faces); ``solve_jump`` solves the
event-driven HJB with Gauss-Hermite expectations and linear extrapolation of
the value beyond the box.  Both run Howard policy iteration on the discrete
problem and then certify the fixed point with relative-value sweeps anchored
at the origin.  Gains are reported per unit of wall-clock time.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .jump_process import ClockConfig, rng_streams, rollout
from .models import ModelSpec


class GridTooSmall(ValueError):
    """Quadrature mass falls outside three times the grid radius."""


class SolverDidNotConverge(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


# ---------------------------------------------------------------------------
# grid


@dataclass
class Grid:
    """Uniform box grid [-R, R]^d of spacing h containing the origin, plus an action grid."""

    d: int
    R: float
    h: float
    actions: np.ndarray

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("grid dimension must be 1 or 2")
        if self.h <= 0 or self.R <= 0:
            raise ValueError("grid spacing and radius must be positive")
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if self.actions.shape[0] == 0:
            raise ValueError("empty action grid")
        order = np.lexsort(self.actions.T[::-1])
        self.actions = self.actions[order]
        self.m = int(round(self.R / self.h))
        self.R = self.m * self.h
        self.axis = self.h * np.arange(-self.m, self.m + 1)
        self.n_axis = self.axis.size
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        self.nodes = np.stack([g.ravel() for g in mesh], axis=1)
        self.n = self.nodes.shape[0]
        self.origin = int(np.ravel_multi_index((self.m,) * self.d, (self.n_axis,) * self.d))

    @classmethod
    def for_model(cls, model: ModelSpec, R: float, h: float, action_points: int = 33) -> "Grid":
        return cls(model.d, R, h, model.family.action_grid(action_points))

    def signature(self) -> tuple:
        return (self.d, self.R, self.h, self.actions.tobytes())

    def multi_index(self, idx) -> tuple:
        return np.unravel_index(idx, (self.n_axis,) * self.d)

    def nearest(self, x) -> tuple[int, bool]:
        """Nearest node index of x and whether x had to be clamped."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        k = np.rint(x / self.h).astype(int) + self.m
        clamped = bool(np.any(k < 0) or np.any(k >= self.n_axis))
        k = np.clip(k, 0, self.n_axis - 1)
        return int(np.ravel_multi_index(tuple(k), (self.n_axis,) * self.d)), clamped

    def interp_weights(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Multilinear interpolation (linear extrapolation outside): (idx, w) of shape (P, 2^d)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        P = pts.shape[0]
        lo_idx, frac = [], []
        for i in range(self.d):
            u = (pts[:, i] + self.R) / self.h
            j = np.clip(np.floor(u).astype(int), 0, self.n_axis - 2)
            lo_idx.append(j)
            frac.append(u - j)
        idx = np.empty((P, 1 << self.d), dtype=np.int64)
        w = np.empty((P, 1 << self.d))
        for c, corner in enumerate(itertools.product((0, 1), repeat=self.d)):
            sub = tuple(lo_idx[i] + corner[i] for i in range(self.d))
            idx[:, c] = np.ravel_multi_index(sub, (self.n_axis,) * self.d)
            wc = np.ones(P)
            for i in range(self.d):
                wc = wc * (frac[i] if corner[i] else 1.0 - frac[i])
            w[:, c] = wc
        return idx, w

    def interpolate(self, values, points) -> np.ndarray:
        idx, w = self.interp_weights(points)
        return np.sum(np.asarray(values)[idx] * w, axis=1)


# ---------------------------------------------------------------------------
# solutions


@dataclass
class HjbSolution:
    kind: str
    grid: Grid
    w: np.ndarray
    rho: float
    policy_index: np.ndarray
    residual: float
    iterations: int
    lipschitz_estimate: float
    converged: bool = True
    epsilon: float | None = None
    theta: np.ndarray | None = None
    history: list = field(default_factory=list)

    @property
    def policy(self) -> np.ndarray:
        return self.grid.actions[self.policy_index]

    def to_files(self, csv_path, json_path) -> None:
        g = self.grid
        cols = [f"x_{i + 1}" for i in range(g.d)] + ["w"] + [f"a_{i + 1}" for i in range(g.actions.shape[1])]
        data = np.column_stack([g.nodes, self.w, self.policy])
        np.savetxt(csv_path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
        with open(json_path, "w") as fh:
            json.dump({"kind": self.kind, "rho": self.rho, "residual": self.residual,
                       "iterations": self.iterations, "lipschitz_estimate": self.lipschitz_estimate,
                       "converged": self.converged, "epsilon": self.epsilon,
                       "theta": None if self.theta is None else np.asarray(self.theta).tolist(),
                       "R": g.R, "h": g.h}, fh, indent=2)


def lipschitz_estimate(grid: Grid, w: np.ndarray) -> float:
    W = w.reshape((grid.n_axis,) * grid.d)
    return float(max(np.max(np.abs(np.diff(W, axis=i))) for i in range(grid.d)) / grid.h)


def _argmax_sticky(Q: np.ndarray, current: np.ndarray | None, tol: float) -> np.ndarray:
    """Row-wise argmax over axis 0 (first maximizer); keep the current action on near-ties."""
    best = np.argmax(Q, axis=0)
    if current is None:
        return best
    cols = np.arange(Q.shape[1])
    keep = Q[current, cols] >= Q[best, cols] - tol
    return np.where(keep, current, best)


# ---------------------------------------------------------------------------
# diffusive HJB


def _diffusion_moves(grid: Grid, cov: np.ndarray, drift: np.ndarray):
    """Markov-chain moves: list of (target index per node, rate per node/action)."""
    d, h, n = grid.d, grid.h, grid.n
    shape = (grid.n_axis,) * d
    mi = np.array(grid.multi_index(np.arange(n)))            # (d, n)
    moves = []

    def target(offset):
        t = mi + np.asarray(offset)[:, None]
        inside = np.all((t >= 0) & (t < grid.n_axis), axis=0)
        tc = np.clip(t, 0, grid.n_axis - 1)
        return np.where(inside, np.ravel_multi_index(tuple(tc), shape), -1)

    cross = cov[0, 1] if d == 2 else 0.0
    for i in range(d):
        diff = cov[i, i] - abs(cross)
        if diff < -1e-14:
            raise ValueError("covariance not diagonally dominant; scheme would not be monotone")
        e = np.zeros(d, dtype=int)
        e[i] = 1
        b = drift[..., i]                                    # (k, n)
        moves.append((target(e), 0.5 * diff / h ** 2 + np.maximum(b, 0.0) / h))
        moves.append((target(-e), 0.5 * diff / h ** 2 + np.maximum(-b, 0.0) / h))
    if d == 2 and cross != 0.0:
        c = 0.5 * abs(cross) / h ** 2
        offs = [(1, 1), (-1, -1)] if cross > 0 else [(1, -1), (-1, 1)]
        k = drift.shape[0]
        for o in offs:
            moves.append((target(o), np.full((k, n), c)))
    # reflecting faces: moves leaving the box are suppressed
    return [(t, np.where(t[None, :] >= 0, r, 0.0)) for t, r in moves]


def _hamiltonian(moves, w: np.ndarray, reward: np.ndarray) -> np.ndarray:
    H = reward.copy()
    for t, rate in moves:
        tw = np.where(t >= 0, w[np.maximum(t, 0)], w)
        H += rate * (tw - w)[None, :]
    return H


def _generator_matrix(moves, pol: np.ndarray, n: int) -> sp.csr_matrix:
    cols = np.arange(n)
    rows, cidx, vals = [], [], []
    diag = np.zeros(n)
    for t, rate in moves:
        r = rate[pol, cols]
        ok = (t >= 0) & (r > 0)
        rows.append(cols[ok])
        cidx.append(t[ok])
        vals.append(r[ok])
        diag -= np.where(ok, r, 0.0)
    rows.append(cols)
    cidx.append(cols)
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cidx))), shape=(n, n))


def _solve_average(Q: sp.spmatrix, r: np.ndarray, anchor: int, scale: float = 1.0):
    """Solve Q w + r = g 1 with w[anchor] = 0; returns (w, g)."""
    n = Q.shape[0]
    ones = sp.csr_matrix(np.ones((n, 1)) * -scale)
    e = sp.csr_matrix(([1.0], ([0], [anchor])), shape=(1, n))
    M = sp.bmat([[Q, ones], [e, None]], format="csc")
    sol = spla.spsolve(M, np.concatenate([-r, [0.0]]))
    w = sol[:n] - sol[anchor]       # the solve leaves round-off at the anchor
    return w, sol[n] * scale


def solve_diffusive(model: ModelSpec, grid: Grid, tol: float = 1e-8, max_iter: int = 200,
                    theta=None) -> HjbSolution:
    """Ergodic diffusive HJB: rho = max_a {mu_bar' grad W + r_bar} + 1/2 Tr(Sigma_bar Sigma_bar' hess W)."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    fam = model.family
    k, n = grid.actions.shape[0], grid.n
    X = grid.nodes
    drift = np.stack([fam.drift_bar(theta, X, np.broadcast_to(a, (n, a.size))) for a in grid.actions])
    reward = np.stack([model.reward_bar(X, np.broadcast_to(a, (n, a.size))) for a in grid.actions])
    cov = model.sigma_bar @ model.sigma_bar.T
    moves = _diffusion_moves(grid, cov, drift)
    total_rate = sum(r for _, r in moves)
    scale = float(np.max(np.abs(reward))) + 1.0
    pol = np.argmax(reward, axis=0)
    history = []
    w = np.zeros(n)
    rho = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        Q = _generator_matrix(moves, pol, n)
        w, rho = _solve_average(Q, reward[pol, np.arange(n)], grid.origin)
        H = _hamiltonian(moves, w, reward)
        new = _argmax_sticky(H, pol, 1e-13 * scale)
        res = float(np.max(np.abs(H.max(axis=0) - rho)))
        history.append(res)
        if np.array_equal(new, pol):
            break
        pol = new
    # relative-value sweeps on the uniformized chain certify the fixed point
    dt = 1.0 / float(np.max(total_rate))
    res = float(np.max(np.abs(_hamiltonian(moves, w, reward).max(axis=0) - rho)))
    sweeps = 0
    while res > tol and sweeps < 50 * max_iter:
        Hm = _hamiltonian(moves, w, reward).max(axis=0)
        w = w + dt * Hm
        w = w - w[grid.origin]
        Hn = _hamiltonian(moves, w, reward)
        rho = float(Hn.max(axis=0)[grid.origin])
        res = float(np.ptp(Hn.max(axis=0)))
        sweeps += 1
    H = _hamiltonian(moves, w, reward)
    pol = _argmax_sticky(H, pol, 1e-13 * scale)
    res = float(np.max(np.abs(H.max(axis=0) - rho)))
    converged = res <= tol
    return HjbSolution("diffusive", grid, w, float(rho), pol, res, it + sweeps,
                       lipschitz_estimate(grid, w), converged, None, theta, history)


# ---------------------------------------------------------------------------
# jump HJB


def gauss_hermite(K: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for E[f(xi)], xi ~ N(0, I_d), tensor product of K points per axis."""
    z, w = np.polynomial.hermite.hermgauss(K)
    z = z * math.sqrt(2.0)
    w = w / math.sqrt(math.pi)
    Z = np.array(list(itertools.product(z, repeat=d)))
    W = np.array([np.prod(c) for c in itertools.product(w, repeat=d)])
    return Z, W


def jump_operator(model: ModelSpec, grid: Grid, K: int = 11, theta=None) -> sp.csr_matrix:
    """Stacked (k n) x n matrix: row a n + i gives E[W(x_i + mu(x_i, a) + Sigma xi)]."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    Z, Wq = gauss_hermite(K, grid.d)
    shocks = Z @ model.noise_matrix.T                      # (q, d)
    n, q = grid.n, Z.shape[0]
    rows, cols, vals = [], [], []
    for ia, a in enumerate(grid.actions):
        mean = grid.nodes + model.epsilon * model.family.drift_bar(theta, grid.nodes, np.broadcast_to(a, (n, a.size)))
        pts = (mean[:, None, :] + shocks[None, :, :]).reshape(-1, grid.d)
        if np.max(np.abs(pts)) > 3.0 * grid.R:
            raise GridTooSmall("jump targets leave three times the grid radius")
        idx, w = grid.interp_weights(pts)
        w = (w.reshape(n, q, -1) * Wq[None, :, None]).reshape(n, -1)
        idx = idx.reshape(n, -1)
        rows.append(np.repeat(ia * n + np.arange(n), idx.shape[1]))
        cols.append(idx.ravel())
        vals.append(w.ravel())
    k = grid.actions.shape[0]
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(k * n, n))
    M.sum_duplicates()
    return M


def _policy_rows(M: sp.csr_matrix, pol: np.ndarray, n: int) -> sp.csr_matrix:
    return M[pol * n + np.arange(n)]


def solve_jump(model: ModelSpec, grid: Grid, tol: float = 1e-8, max_iter: int = 200, K: int = 11,
               theta=None) -> HjbSolution:
    """Event HJB: eps rho = max_a {E[W(x + mu(x, a) + Sigma xi)] - W(x) + eps r_bar(x, a)}."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    eps = model.epsilon
    k, n = grid.actions.shape[0], grid.n
    M = jump_operator(model, grid, K, theta)
    reward = eps * np.stack([model.reward_bar(grid.nodes, np.broadcast_to(a, (n, a.size))) for a in grid.actions])
    scale = float(np.max(np.abs(reward))) + eps
    I = sp.identity(n, format="csr")
    pol = np.argmax(reward, axis=0)
    history = []
    it = 0
    w = np.zeros(n)
    g = 0.0
    for it in range(1, max_iter + 1):
        P = _policy_rows(M, pol, n)
        w, g = _solve_average(P - I, reward[pol, np.arange(n)], grid.origin)
        Q = (M @ w).reshape(k, n) + reward
        new = _argmax_sticky(Q, pol, 1e-13 * scale)
        history.append(float(np.max(np.abs(Q.max(axis=0) - w - g))) / eps)
        if np.array_equal(new, pol):
            break
        pol = new
    Q = (M @ w).reshape(k, n) + reward
    res = float(np.max(np.abs(Q.max(axis=0) - w - g))) / eps
    sweeps = 0
    while res > tol and sweeps < 50 * max_iter:
        Tw = Q.max(axis=0)
        g = float(Tw[grid.origin] - w[grid.origin])
        w = Tw - Tw[grid.origin]
        Q = (M @ w).reshape(k, n) + reward
        res = float(np.max(np.abs(Q.max(axis=0) - w - g))) / eps
        sweeps += 1
    pol = _argmax_sticky(Q, pol, 1e-13 * scale)
    return HjbSolution("jump", grid, w, float(g / eps), pol, res, it + sweeps,
                       lipschitz_estimate(grid, w), res <= tol, eps, theta, history)


def evaluate_policy_jump(model: ModelSpec, grid: Grid, policy_index, K: int = 11, M=None) -> float:
    """Gain per unit time of a node policy under the discretized event dynamics."""
    n = grid.n
    M = jump_operator(model, grid, K) if M is None else M
    pol = np.asarray(policy_index)
    r = model.epsilon * model.reward_bar(grid.nodes, grid.actions[pol])
    P = _policy_rows(M, pol, n)
    _, g = _solve_average(P - sp.identity(n, format="csr"), r, grid.origin)
    return float(g / model.epsilon)


# ---------------------------------------------------------------------------
# policies


class GreedyPolicy:
    """State -> action map from a solution: nearest node, then argmax re-evaluated at x.

    Queries outside the box are clamped to the boundary node and counted.
    """

    def __init__(self, solution: HjbSolution, model: ModelSpec, reevaluate: bool = True, K: int = 11):
        self.sol = solution
        self.model = model
        self.grid = solution.grid
        self.reevaluate = reevaluate
        self.clamped = 0
        self.theta = model.theta if solution.theta is None else solution.theta
        self._acts = self.grid.actions
        if solution.kind == "jump":
            Z, W = gauss_hermite(K, self.grid.d)
            self._shocks = Z @ model.noise_matrix.T
            self._qw = W
        else:
            cov = model.sigma_bar @ model.sigma_bar.T
            self._cov = cov
            g = self.grid
            shape = (g.n_axis,) * g.d
            self._shape = shape

    def node_action(self, i: int) -> np.ndarray:
        return self._acts[self.sol.policy_index[i]]

    def _diffusive_scores(self, x, i):
        g, w, h = self.grid, self.sol.w, self.grid.h
        b = self.model.family.drift_bar(self.theta, x[None, :], self._acts)       # (k, d)
        r = self.model.reward_bar(x[None, :], self._acts)
        mi = np.array(np.unravel_index(i, self._shape))
        cross = self._cov[0, 1] if g.d == 2 else 0.0
        H = r.copy()
        for ax in range(g.d):
            diff = self._cov[ax, ax] - abs(cross)
            for sgn in (1, -1):
                t = mi.copy()
                t[ax] += sgn
                if t[ax] < 0 or t[ax] >= g.n_axis:
                    continue
                dw = w[np.ravel_multi_index(tuple(t), self._shape)] - w[i]
                H = H + (0.5 * diff / h ** 2 + np.maximum(sgn * b[:, ax], 0.0) / h) * dw
        if g.d == 2 and cross != 0.0:
            offs = [(1, 1), (-1, -1)] if cross > 0 else [(1, -1), (-1, 1)]
            for o in offs:
                t = mi + np.array(o)
                if np.all((t >= 0) & (t < g.n_axis)):
                    H = H + 0.5 * abs(cross) / h ** 2 * (w[np.ravel_multi_index(tuple(t), self._shape)] - w[i])
        return H

    def _jump_scores(self, x):
        m = self.model
        mean = x[None, :] + m.epsilon * m.family.drift_bar(self.theta, x[None, :], self._acts)
        pts = (mean[:, None, :] + self._shocks[None]).reshape(-1, self.grid.d)
        ew = (self.grid.interpolate(self.sol.w, pts).reshape(self._acts.shape[0], -1) @ self._qw)
        return ew + m.epsilon * m.reward_bar(x[None, :], self._acts)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.grid.d)
        i, clamped = self.grid.nearest(x)
        if clamped:
            self.clamped += 1
            x = self.grid.nodes[i]
        if not self.reevaluate:
            return self.node_action(i)
        s = self._jump_scores(x) if self.sol.kind == "jump" else self._diffusive_scores(x, i)
        return self._acts[int(np.argmax(s))]


def greedy_policy(solution: HjbSolution, model: ModelSpec, reevaluate: bool = True) -> GreedyPolicy:
    return GreedyPolicy(solution, model, reevaluate)


# ---------------------------------------------------------------------------
# Monte Carlo gains and the approximation diagnostics


def evaluate_gain(policy, model: ModelSpec, cfg: ClockConfig, replicas: int = 1, x0=None,
                  batches: int = 20) -> tuple[float, float]:
    """Monte Carlo estimate of (1/T) sum rewards with its standard error.

    Several replicas: standard error across replicas.  One replica: batch means
    over equal wall-clock batches.
    """
    x0 = np.zeros(model.d) if x0 is None else np.asarray(x0, dtype=float)
    roots = np.random.SeedSequence(int(cfg.seed)).spawn(replicas)
    gains = []
    last = None
    for r in range(replicas):
        log = rollout(policy, model, cfg, x0, streams=rng_streams(roots[r]))
        if log.exploded:
            raise RuntimeError("state explosion during gain evaluation")
        gains.append(float(np.sum(log.rewards)) / cfg.horizon_T)
        last = log
    gains = np.array(gains)
    if replicas > 1:
        return float(gains.mean()), float(gains.std(ddof=1) / math.sqrt(replicas))
    edges = np.linspace(0.0, cfg.horizon_T, batches + 1)
    which = np.clip(np.searchsorted(edges, last.arrivals[1:], side="left") - 1, 0, batches - 1)
    per = np.bincount(which, weights=last.rewards, minlength=batches) / (cfg.horizon_T / batches)
    return float(gains[0]), float(per.std(ddof=1) / math.sqrt(batches))


@dataclass
class ApproximationReport:
    epsilon: float
    rho_jump: float
    rho_diffusive: float
    gain_of_diffusive_policy: float
    residual_jump: float
    residual_diffusive: float

    @property
    def gain_gap(self) -> float:
        return abs(self.rho_diffusive - self.rho_jump)

    @property
    def suboptimality(self) -> float:
        return self.rho_jump - self.gain_of_diffusive_policy


def approximation_report(model: ModelSpec, grid: Grid, tol: float = 1e-8, K: int = 11,
                         diffusive: HjbSolution | None = None) -> ApproximationReport:
    jump = solve_jump(model, grid, tol, K=K)
    diff = solve_diffusive(model, grid, tol) if diffusive is None else diffusive
    gain = evaluate_policy_jump(model, grid, diff.policy_index, K)
    return ApproximationReport(model.epsilon, jump.rho, diff.rho, gain, jump.residual, diff.residual)


def policy_suboptimality(model: ModelSpec, grid: Grid, cfg: ClockConfig | None = None,
                         method: str = "quadrature", replicas: int = 8, tol: float = 1e-8) -> float:
    """rho* (event HJB) minus the event-dynamics gain of the diffusive greedy policy.

    ``quadrature`` evaluates the node policy exactly on the discretized event
    chain; ``monte_carlo`` simulates the re-evaluated greedy policy.
    """
    if method == "quadrature":
        return approximation_report(model, grid, tol).suboptimality
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    if cfg is None:
        raise ValueError("monte_carlo needs a clock config")
    rho = solve_jump(model, grid, tol).rho
    pol = greedy_policy(solve_diffusive(model, grid, tol), model)
    mean, _ = evaluate_gain(pol, model, cfg, replicas)
    return rho - mean
