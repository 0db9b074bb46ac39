"""Least-squares drift estimation, confidence radii, state bounds and eluder diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from .models import DriftFamily, LyapunovSpec, ModelSpec

PI2 = math.pi ** 2


# ---------------------------------------------------------------------------
# adaptive state bound


@dataclass(frozen=True)
class StateBound:
    """Constants of the high-probability state envelope n -> H_delta(n)."""

    ell_V: float
    L_V: float
    M_V: float
    M_V_prime: float
    c_V: float
    L0: float
    sigma_norm: float
    d: int
    x0_norm: float

    @classmethod
    def from_model(cls, model: ModelSpec, lyap: LyapunovSpec, x0, L0: float | None = None) -> "StateBound":
        return cls(lyap.ell_V, lyap.L_V, lyap.M_V, lyap.M_V_prime, lyap.c_V,
                   model.L0 if L0 is None else float(L0), model.sigma_norm, model.d,
                   float(np.linalg.norm(np.asarray(x0, dtype=float))))

    @property
    def C_H(self) -> float:
        s, d = self.sigma_norm, self.d
        return self.L_V * ((1.0 + self.L0) * s * math.sqrt(8.0 * d / math.e) + 1.0 + s * math.sqrt(d))

    @property
    def c_prime_V(self) -> float:
        s, rd = self.sigma_norm, math.sqrt(self.d)
        return (self.M_V * self.L0 * (1.0 + s * rd) + 2.0 * self.M_V * s * rd
                + 0.5 * self.M_V_prime * s * s)

    def __call__(self, n, delta: float):
        n = np.asarray(n, dtype=float)
        const = (self.C_H + self.L_V * self.x0_norm) / self.ell_V + self.c_prime_V / (self.ell_V * self.c_V)
        log_term = np.log(PI2 * (n + 1.0) ** 3 / (6.0 * delta))
        out = const + (self.M_V / self.ell_V) * self.sigma_norm * np.sqrt(2.0 / self.c_V * log_term)
        return float(out) if out.ndim == 0 else out


def h_delta(n, bound: StateBound, delta: float):
    return bound(n, delta)


# ---------------------------------------------------------------------------
# confidence radius


def kappa_n(n, delta, epsilon, sigma_bar_norm, log_cover, H, L0):
    n = np.asarray(n, dtype=float)
    return (np.log(2.0 * PI2 * n * n * epsilon / (3.0 * delta)
                   * (sigma_bar_norm ** 2 + 8.0 * L0 ** 2 * (1.0 + np.asarray(H, dtype=float))))
            + np.asarray(log_cover, dtype=float))


def beta_n(n, delta, epsilon, sigma_bar_norm, log_cover, H, L0):
    """Confidence radius; kappa is floored at zero so the square roots stay real."""
    n = np.asarray(n, dtype=float)
    kap = np.maximum(kappa_n(n, delta, epsilon, sigma_bar_norm, log_cover, H, L0), 0.0)
    se = math.sqrt(epsilon)
    inner = (np.sqrt(2.0 * np.log(4.0 * PI2 * n ** 3 / (3.0 * delta)))
             + np.sqrt(2.0 * se / sigma_bar_norm * kap))
    val = 2.0 * se * sigma_bar_norm * (np.sqrt(1.0 + 2.0 * inner) + np.sqrt(kap))
    out = np.maximum(se, val)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RadiusSchedule:
    """n -> beta_n(delta) for a family, wiring H_delta(n) into the cover radius."""

    family: DriftFamily
    epsilon: float
    sigma_norm: float
    L0: float
    bound: StateBound
    delta: float

    def H(self, n):
        return self.bound(n, self.delta)

    def log_cover(self, n) -> np.ndarray:
        n = np.atleast_1d(np.asarray(n, dtype=float))
        H = self.H(n)
        # cover tolerance eps |Sigma_bar|^2 / n on mu, i.e. |Sigma_bar|^2 / n on mu_bar
        return np.array([self.family.log_cover(h, self.sigma_norm ** 2 / k) for h, k in zip(H, n)])

    def __call__(self, n):
        scalar = np.ndim(n) == 0
        n = np.atleast_1d(np.asarray(n, dtype=float))
        out = np.full(n.shape, math.sqrt(self.epsilon))
        pos = n >= 1
        if np.any(pos):
            out[pos] = beta_n(n[pos], self.delta, self.epsilon, self.sigma_norm,
                              self.log_cover(n[pos]), self.H(n[pos]), self.L0)
        return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# design and least squares


@dataclass
class DesignLog:
    """(state, action, increment) triples X_n, a_n, X_{n+1} - X_n."""

    states: np.ndarray
    actions: np.ndarray
    increments: np.ndarray
    epsilon: float

    @classmethod
    def from_trajectory(cls, states, actions, epsilon: float, n: int | None = None) -> "DesignLog":
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        n = actions.shape[0] if n is None else n
        return cls(states[:n], actions[:n], states[1:n + 1] - states[:n], epsilon)

    def __len__(self) -> int:
        return self.states.shape[0]


def nlls_objective(theta, design: DesignLog, family: DriftFamily) -> float:
    r = design.increments - design.epsilon * family.drift_bar(theta, design.states, design.actions)
    return float(np.sum(r * r))


@dataclass
class FitResult:
    theta: np.ndarray
    objective: float
    converged: bool
    grid_dominant: bool
    iterations: int
    starts: int
    message: str = ""


def _local_fit(theta0, design: DesignLog, family: DriftFamily, max_iter: int, tol: float):
    """Projected damped Gauss-Newton with an active set on the parameter box."""
    lo, hi = family.theta_low, family.theta_high
    eps = design.epsilon
    X, A, dX = design.states, design.actions, design.increments
    theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)

    def resid(t):
        return (dX - eps * family.drift_bar(t, X, A)).ravel()

    r = resid(theta)
    obj = float(r @ r)
    lam = 1e-6
    p = theta.size
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = -eps * family.jacobian(theta, X, A).reshape(-1, p)
        g = J.T @ r
        JtJ = J.T @ J
        free = ~(((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0)))
        if not np.any(free):
            converged = True
            break
        improved = False
        for _ in range(30):
            H = JtJ[np.ix_(free, free)] + lam * np.diag(np.diag(JtJ)[free] + 1e-300)
            try:
                step = -np.linalg.solve(H, g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta.copy()
            trial[free] += step
            trial = np.clip(trial, lo, hi)
            rt = resid(trial)
            ot = float(rt @ rt)
            if ot <= obj:
                improved = True
                dec = obj - ot
                theta, r, obj = trial, rt, ot
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved or dec <= tol * (1.0 + obj):
            converged = True
            break
    return theta, obj, converged, it


def fit_nlls(design: DesignLog, family: DriftFamily, previous=None, grid_per_axis: int = 3,
             max_iter: int = 100, tol: float = 1e-15) -> FitResult:
    """Multi-start least squares over the parameter box.

    Starts: the previous estimate (if any), then a coarse tensor grid of the box.
    Ties go to the lowest-index start.  ``grid_dominant`` certifies that the
    returned objective does not exceed the objective at any coarse grid point.
    """
    if len(design) == 0:
        raise ValueError("design log is empty")
    grid = family.theta_grid(grid_per_axis)
    starts = ([np.asarray(previous, dtype=float)] if previous is not None else []) + list(grid)
    best = None
    all_conv = True
    iters = 0
    for s in starts:
        th, obj, conv, it = _local_fit(s, design, family, max_iter, tol)
        iters += it
        all_conv &= conv
        if best is None or obj < best[1] - 1e-15 * (1.0 + abs(best[1])):
            best = (th, obj)
    grid_obj = min(nlls_objective(t, design, family) for t in grid)
    dominant = best[1] <= grid_obj + 1e-9 * (1.0 + abs(grid_obj))
    msg = "" if all_conv else "some local starts hit the iteration budget"
    return FitResult(best[0], best[1], all_conv, dominant, iters, len(starts), msg)


def ols_linear(design: DesignLog, family: DriftFamily) -> np.ndarray:
    """Unconstrained least squares for families linear in theta (normal equations)."""
    Phi = family.features(design.states, design.actions)
    p = Phi.shape[-1]
    Phi = design.epsilon * Phi.reshape(-1, p)
    return np.linalg.solve(Phi.T @ Phi, Phi.T @ design.increments.ravel())


# ---------------------------------------------------------------------------
# confidence sets


def sq_distances(thetas, ref, design: DesignLog, family: DriftFamily, chunk: int = 64) -> np.ndarray:
    """sum_i |mu_theta(X_i, a_i) - mu_ref(X_i, a_i)|^2 for each row of thetas."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    ref = np.asarray(ref, dtype=float)
    eps = design.epsilon
    if len(design) == 0:
        return np.zeros(thetas.shape[0])
    if family.linear_in_theta:
        Phi = family.features(design.states, design.actions)
        p = Phi.shape[-1]
        Phi = Phi.reshape(-1, p)
        G = Phi.T @ Phi
        D = thetas - ref
        return eps * eps * np.einsum("mi,ij,mj->m", D, G, D)
    base = family.drift_bar(ref, design.states, design.actions)
    out = np.empty(thetas.shape[0])
    for i, t in enumerate(thetas):
        diff = family.drift_bar(t, design.states, design.actions) - base
        out[i] = eps * eps * float(np.sum(diff * diff))
    return out


@dataclass
class ConfidenceState:
    """Least-squares fit at event n with its radius and design."""

    family: DriftFamily
    theta_hat: np.ndarray
    n: int
    beta: float
    delta: float
    design: DesignLog
    k: int = 0
    fit: FitResult | None = None
    fit_error_sq: float | None = None

    def distance(self, theta) -> float:
        return math.sqrt(float(sq_distances(theta, self.theta_hat, self.design, self.family)[0]))

    def members(self, thetas) -> np.ndarray:
        d2 = sq_distances(thetas, self.theta_hat, self.design, self.family)
        return np.sqrt(d2) <= self.beta


def membership(theta, conf: ConfidenceState) -> bool:
    return conf.distance(theta) <= conf.beta


def build_confidence(design: DesignLog, family: DriftFamily, radius: RadiusSchedule, k: int = 0,
                     previous=None, theta_star=None) -> ConfidenceState:
    fit = fit_nlls(design, family, previous=previous)
    n = len(design)
    conf = ConfidenceState(family, fit.theta, n, radius(n), radius.delta, design, k, fit)
    if theta_star is not None:
        conf.fit_error_sq = float(sq_distances(theta_star, fit.theta, design, family)[0])
    return conf


class RecursiveLinearFit:
    """Per-event least-squares fit and theta* distance for families linear in theta.

    Keeps the normal equations; when the unconstrained solution leaves the box it
    falls back to the constrained multi-start fit on the stored design.
    """

    def __init__(self, family: DriftFamily, epsilon: float):
        if not family.linear_in_theta:
            raise ValueError("family is not linear in theta")
        self.family = family
        self.eps = epsilon
        p = family.dim_theta
        self.G = np.zeros((p, p))
        self.b = np.zeros(p)
        self.n = 0
        self.theta_hat: np.ndarray | None = None
        self._rows_X: list = []
        self._rows_A: list = []
        self._rows_dX: list = []

    def update(self, x, a, dx) -> None:
        Phi = self.eps * self.family.features(x, a)[0]
        self.G += Phi.T @ Phi
        self.b += Phi.T @ np.asarray(dx, dtype=float)
        self.n += 1
        self._rows_X.append(np.asarray(x, dtype=float))
        self._rows_A.append(np.asarray(a, dtype=float))
        self._rows_dX.append(np.asarray(dx, dtype=float))

    def design(self) -> DesignLog:
        return DesignLog(np.array(self._rows_X), np.array(self._rows_A), np.array(self._rows_dX), self.eps)

    def unconstrained(self) -> np.ndarray | None:
        if self.n == 0 or np.linalg.matrix_rank(self.G) < self.G.shape[0]:
            return None
        return np.linalg.solve(self.G, self.b)

    def estimate(self) -> np.ndarray:
        """Box-constrained least squares; same minimizer as the stored-design objective."""
        th = self.unconstrained()
        if th is None or not self.family.contains(th):
            if self.n == 0:
                th = self.family.theta_center()
            else:
                # theta' G theta - 2 b' theta = |U theta - U^{-T} b|^2 + const, G = U'U
                w, V = np.linalg.eigh(self.G)
                w = np.maximum(w, 0.0)
                U = np.sqrt(w)[:, None] * V.T
                keep = w > 1e-12 * max(w.max(), 1e-300)
                rhs = np.zeros_like(self.b)
                rhs[keep] = (V.T @ self.b)[keep] / np.sqrt(w[keep])
                lo, hi = self.family.theta_low, self.family.theta_high
                free = hi > lo       # degenerate box axes are pinned; bvls needs lo < hi
                th = lo.astype(float).copy()
                if free.any():
                    th[free] = lsq_linear(U[:, free], rhs - U[:, ~free] @ lo[~free], bounds=(lo[free], hi[free]),
                                          method="bvls", tol=1e-14).x
        self.theta_hat = np.asarray(th, dtype=float)
        return self.theta_hat

    def sq_distance(self, theta) -> float:
        D = np.asarray(theta, dtype=float) - self.theta_hat
        return float(D @ self.G @ D)


# ---------------------------------------------------------------------------
# lazy-update discrepancy tracking


class DiscrepancyTracker:
    """Running sum_i |mu_theta - mu_ref|^2 over a fixed candidate set."""

    def __init__(self, family: DriftFamily, epsilon: float, candidates, ref, design: DesignLog | None = None):
        self.family = family
        self.eps = epsilon
        self.candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
        self.ref = np.asarray(ref, dtype=float)
        if design is not None and len(design):
            self.sums = sq_distances(self.candidates, self.ref, design, family)
        else:
            self.sums = np.zeros(self.candidates.shape[0])

    def update(self, x, a) -> None:
        diff = (self.family.drift_bar_many(self.candidates, x, a)
                - self.family.drift_bar(self.ref, x, a))
        self.sums += self.eps * self.eps * np.sum(diff * diff, axis=1)

    def sup(self) -> float:
        return float(self.sums.max()) if self.sums.size else 0.0


# ---------------------------------------------------------------------------
# eluder dimension


@dataclass
class EluderReport:
    epsilon_level: float
    dimension_estimate: int
    witness_sequences: list
    exact: bool = True
    level_used: float = float("nan")


def _pair_gaps(values: np.ndarray) -> np.ndarray:
    """|f(x) - f'(x)| for each unordered pair f < f' and point x: (pairs, points)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 2:
        v = v[:, :, None]
    m = v.shape[0]
    rows = [np.linalg.norm(v[i] - v[j], axis=-1) for i in range(m) for j in range(i + 1, m)]
    return np.array(rows).reshape(len(rows), v.shape[1])


def _subset_sq_sums(gaps2: np.ndarray) -> np.ndarray:
    pairs, p = gaps2.shape
    out = np.zeros((pairs, 1 << p))
    for bit in range(p):
        lo = 1 << bit
        out[:, lo:2 * lo] = out[:, :lo] + gaps2[:, bit:bit + 1]
    return out


def estimate_eluder(values, epsilon_level: float, budget: int = 2 ** 24) -> EluderReport:
    """Eluder dimension of a finite class on a finite input set.

    ``values`` has shape (members, points) or (members, points, d).  The result
    is the longest sequence whose elements are each e-independent of their
    predecessors for a common level e >= epsilon_level.  Exact via a subset
    recursion over all critical levels when the instance fits the budget,
    otherwise a greedy lower bound at epsilon_level (``exact`` = False).
    """
    v = np.asarray(values, dtype=float)
    m, p = v.shape[0], v.shape[1]
    if m < 2 or p == 0:
        return EluderReport(epsilon_level, 0, [], True)
    gaps = _pair_gaps(v)
    pairs = gaps.shape[0]
    if pairs * (1 << p) * max(p, 1) > budget:
        seq = _greedy_sequence(gaps, epsilon_level)
        return EluderReport(epsilon_level, len(seq), [seq], False, epsilon_level)
    sums = _subset_sq_sums(gaps * gaps)
    norms = np.sqrt(sums)
    top = gaps.max()
    levels = np.unique(np.concatenate([[epsilon_level], norms[norms > epsilon_level].ravel()]))
    levels = levels[levels < top]
    if levels.size == 0:
        return EluderReport(epsilon_level, 0, [], True, epsilon_level)
    nmask = 1 << p
    popc = np.array([bin(s).count("1") for s in range(nmask)])
    best_len, best_level, best_valid = 0, epsilon_level, None
    chunk = max(1, int(budget // (pairs * nmask * p + 1)))
    for start in range(0, levels.size, chunk):
        lv = levels[start:start + chunk]
        small = norms[None, :, :] <= lv[:, None, None]            # (L, pairs, masks)
        big = gaps[None, :, :] > lv[:, None, None]                 # (L, pairs, points)
        # indep[L, x, S] = any pair with |gap|_S <= e < gap(x)
        indep = np.einsum("lqs,lqx->lxs", small.astype(np.int32), big.astype(np.int32)) > 0
        valid = np.zeros((lv.size, nmask), dtype=bool)
        valid[:, 0] = True
        for k in range(1, p + 1):
            masks = np.flatnonzero(popc == k)
            acc = np.zeros((lv.size, masks.size), dtype=bool)
            for x in range(p):
                has = (masks >> x) & 1 == 1
                sub = masks[has] ^ (1 << x)
                acc[:, has] |= valid[:, sub] & indep[:, x, sub]
            valid[:, masks] = acc
        lengths = np.where(valid, popc[None, :], 0).max(axis=1)
        j = int(np.argmax(lengths))
        if lengths[j] > best_len:
            best_len, best_level = int(lengths[j]), float(lv[j])
            best_valid = (valid[j], indep[j])
    witness = []
    if best_valid is not None:
        witness = [_reconstruct(best_valid[0], best_valid[1], popc, best_len)]
    return EluderReport(epsilon_level, best_len, witness, True, best_level)


def _reconstruct(valid: np.ndarray, indep: np.ndarray, popc: np.ndarray, length: int) -> list:
    masks = np.flatnonzero(valid & (popc == length))
    S = int(masks[0])
    seq = []
    while S:
        for x in range(indep.shape[0]):
            if S >> x & 1 and valid[S ^ (1 << x)] and indep[x, S ^ (1 << x)]:
                seq.append(x)
                S ^= 1 << x
                break
    return seq[::-1]


def _greedy_sequence(gaps: np.ndarray, level: float) -> list:
    pairs, p = gaps.shape
    acc = np.zeros(pairs)
    seq: list = []
    remaining = list(range(p))
    while True:
        ok = np.sqrt(acc) <= level
        pick = next((x for x in remaining if np.any(ok & (gaps[:, x] > level))), None)
        if pick is None:
            return seq
        seq.append(pick)
        remaining.remove(pick)
        acc += gaps[:, pick] ** 2


def eluder_level(epsilon: float, n: int) -> float:
    """Level 2 sqrt(eps / n) used for the width bounds."""
    return 2.0 * math.sqrt(epsilon / max(n, 1))


def eluder_on_ball(family: DriftFamily, epsilon: float, thetas, radius: float, n: int,
                   state_points: int = 5, action_points: int = 2) -> EluderReport:
    """Eluder dimension of {mu_theta} (theta in thetas) on a probe grid of the ball."""
    xs = np.linspace(-radius, radius, state_points)
    if family.d > 1:
        xs = np.stack([np.eye(family.d)[0] * r for r in xs])
    else:
        xs = xs[:, None]
    acts = family.action_grid(action_points)
    X = np.repeat(xs, acts.shape[0], axis=0)
    A = np.tile(acts, (xs.shape[0], 1))
    vals = np.stack([epsilon * family.drift_bar(t, X, A) for t in np.atleast_2d(thetas)])
    return estimate_eluder(vals, eluder_level(epsilon, n))


# ---------------------------------------------------------------------------
# prediction error along a trajectory


def prediction_error_bounds(states, actions, theta_seq, theta_star, family: DriftFamily,
                            epsilon: float) -> tuple[float, float]:
    """Realized (sum |mu_theta_n - mu_theta*|, sum |.|^2) along the trajectory."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    N = actions.shape[0]
    theta_seq = np.asarray(theta_seq, dtype=float).reshape(N, -1)
    star = family.drift_bar(theta_star, states[:N], actions)
    first = second = 0.0
    # group consecutive equal parameters to vectorize
    starts = np.flatnonzero(np.r_[True, np.any(theta_seq[1:] != theta_seq[:-1], axis=1)])
    ends = np.r_[starts[1:], N]
    for s, e in zip(starts, ends):
        diff = epsilon * (family.drift_bar(theta_seq[s], states[s:e], actions[s:e]) - star[s:e])
        nrm = np.linalg.norm(diff, axis=1)
        first += float(nrm.sum())
        second += float(np.sum(nrm * nrm))
    return first, second


def width_bounds(beta: float, d_E: int, n: int, sup_state: float) -> tuple[float, float]:
    """Eluder-based bounds on the first and second order prediction sums."""
    d_E = max(int(d_E), 1)
    first = 2.0 * beta * math.sqrt(d_E * n) + d_E * sup_state
    arg = n * sup_state / (16.0 * beta ** 4 * d_E ** 2)
    second = (4.0 * beta ** 2 * d_E * (3.0 + math.log(arg))
              + 2.0 * d_E * (1.0 + 2.0 * beta ** 2 * d_E) * (1.0 + sup_state ** 2))
    return first, second
