import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ofu_diffusion.agent import AgentConfig, run
from ofu_diffusion.jump_process import ClockConfig
from ofu_diffusion.learning import (ConfidenceState, DesignLog, DiscrepancyTracker, RadiusSchedule,
                                    RecursiveLinearFit, StateBound, beta_n, build_confidence, eluder_level,
                                    eluder_on_ball, estimate_eluder, fit_nlls, h_delta, kappa_n, membership,
                                    nlls_objective, ols_linear, prediction_error_bounds, sq_distances, width_bounds)
from ofu_diffusion.models import LinearFamily, ModelSpec, TanhFamily

from conftest import linear_1d

PI2 = math.pi ** 2


# ---------------------------------------------------------------------------
# radii


def beta_by_hand(n, delta, eps, s, logN, H, L0):
    kap = math.log(2 * PI2 * n * n * eps / (3 * delta) * (s * s + 8 * L0 * L0 * (1 + H))) + logN
    kap = max(kap, 0.0)
    root = math.sqrt(2 * math.log(4 * PI2 * n ** 3 / (3 * delta))) + math.sqrt(2 * math.sqrt(eps) / s * kap)
    return max(math.sqrt(eps), 2 * math.sqrt(eps) * s * (math.sqrt(1 + 2 * root) + math.sqrt(kap)))


def test_beta_frozen_value():
    assert beta_n(1, 0.5, 0.25, 1.0, 0.0, 1.0, 1.0) == pytest.approx(5.188288882684175, rel=1e-13)
    assert beta_by_hand(1, 0.5, 0.25, 1.0, 0.0, 1.0, 1.0) == pytest.approx(5.188288882684175, rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10 ** 6), st.floats(0.01, 0.9), st.floats(0.01, 1.0), st.floats(0.1, 3.0),
       st.floats(0.0, 50.0), st.floats(0.0, 100.0), st.floats(0.1, 5.0))
def test_beta_transcription_floor_and_monotone(n, delta, eps, s, logN, H, L0):
    b = beta_n(n, delta, eps, s, logN, H, L0)
    assert b == pytest.approx(beta_by_hand(n, delta, eps, s, logN, H, L0), rel=1e-12)
    assert b >= math.sqrt(eps)
    assert beta_n(2 * n, delta, eps, s, logN, H, L0) >= b
    assert beta_n(n, delta / 2, eps, s, logN, H, L0) >= b


def test_kappa_floor_only_affects_square_roots():
    k = kappa_n(1, 0.9, 0.01, 1.0, 0.0, 0.0, 0.1)
    assert k < 0
    assert beta_n(1, 0.9, 0.01, 1.0, 0.0, 0.0, 0.1) >= 0.1


def test_h_delta_frozen_value():
    b = StateBound(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1, 0.0)
    C_H = 2 * math.sqrt(8 / math.e) + 2
    c_prime = 2 + 2 + 0.5
    hand = C_H + c_prime + math.sqrt(2 * math.log(PI2 * 8 / (6 * 0.5)))
    assert h_delta(1, b, 0.5) == pytest.approx(hand, rel=1e-14)
    assert h_delta(1, b, 0.5) == pytest.approx(12.48851092545976, rel=1e-13)


def test_h_delta_growth_and_delta_monotone():
    b = StateBound.from_model(linear_1d(), linear_1d().lyapunov(), [0.0])
    n = np.logspace(3, 6, 20)
    # in units of the leading coefficient, which carries the model constants
    lead = b.M_V / b.ell_V * b.sigma_norm * math.sqrt(2.0 / b.c_V)
    ratio = (b(n, 0.1) - b(1, 0.1)) / (lead * np.sqrt(np.log(n)))
    assert np.all((ratio >= 0.5) & (ratio <= 2.0))
    assert np.all(np.diff(b(n, 0.1)) > 0)
    assert b(100, 0.01) > b(100, 0.1)


def test_radius_schedule_uses_floor_before_data():
    m = linear_1d(eps=0.1)
    bound = StateBound.from_model(m, m.lyapunov(), [0.0])
    r = RadiusSchedule(m.family, 0.1, 1.0, m.L0, bound, 0.1 / 3)
    assert r(0) == pytest.approx(math.sqrt(0.1))
    vals = r(np.arange(1, 2000, 37))
    assert np.all(np.diff(vals) >= 0)


# ---------------------------------------------------------------------------
# least squares


def synthetic_design(theta, n, eps=0.1, noise=1.0, seed=0, family=None):
    fam = family or LinearFamily(1, 1, [-2.0, 0.1], [-0.5, 3.0], [-1.0], [1.0])
    rng = np.random.default_rng(seed)
    X = np.empty((n + 1, fam.d))
    A = rng.uniform(-1, 1, (n, fam.dA))
    X[0] = 0.0
    for i in range(n):
        X[i + 1] = X[i] + eps * fam.drift_bar(theta, X[i:i + 1], A[i:i + 1])[0] \
            + noise * math.sqrt(eps) * rng.standard_normal(fam.d)
    return DesignLog.from_trajectory(X, A, eps), fam


def test_noiseless_fit_recovers_theta():
    d, fam = synthetic_design([-1.2, 1.7], 20, noise=0.0)
    assert np.allclose(fit_nlls(d, fam).theta, [-1.2, 1.7], atol=1e-8)


def test_fit_matches_ols_oracle():
    d, fam = synthetic_design([-1.0, 1.0], 400, noise=1.0, seed=3)
    ols = ols_linear(d, fam)
    assert fam.contains(ols)
    # independent route: plain normal equations on stacked features
    Phi = np.column_stack([d.epsilon * d.states[:, 0], d.epsilon * d.actions[:, 0]])
    oracle = np.linalg.solve(Phi.T @ Phi, Phi.T @ d.increments[:, 0])
    assert np.allclose(ols, oracle, atol=1e-10)
    assert np.allclose(fit_nlls(d, fam).theta, oracle, atol=1e-8)


def test_fit_grid_dominance_and_objective():
    d, fam = synthetic_design([-1.0, 1.0], 200, seed=4)
    fit = fit_nlls(d, fam)
    assert fit.grid_dominant
    grid = fam.theta_grid(7)
    assert all(fit.objective <= nlls_objective(t, d, fam) + 1e-12 for t in grid)
    assert fit.objective <= nlls_objective([-1.0, 1.0], d, fam) + 1e-9


def test_recursive_fit_matches_constrained_fit():
    fam = LinearFamily(1, 1, [-2.0, 0.1], [-0.5, 3.0], [-1.0], [1.0])
    for seed in range(5):
        d, _ = synthetic_design([-0.6, 2.9], 60, seed=seed, family=fam)
        rec = RecursiveLinearFit(fam, d.epsilon)
        for x, a, dx in zip(d.states, d.actions, d.increments):
            rec.update(x, a, dx)
        th = rec.estimate()
        ref = fit_nlls(d, fam)
        assert nlls_objective(th, d, fam) <= ref.objective + 1e-9
        assert rec.sq_distance([-0.6, 2.9]) == pytest.approx(sq_distances([-0.6, 2.9], th, d, fam)[0], rel=1e-9)


def test_tanh_fit_consistency():
    fam = TanhFamily(1, 1, [-0.5, 0.2, 0.5], [0.5, 1.0, 1.5], [-1.0], [1.0], c=1.0, margin=0.2)
    star = np.array([0.3, 0.8, 1.0])
    errs = {n: [] for n in (50, 200, 500)}
    for seed in range(50):
        d, _ = synthetic_design(star, 500, eps=0.1, noise=1.0, seed=seed, family=fam)
        for n in errs:
            sub = DesignLog(d.states[:n], d.actions[:n], d.increments[:n], d.epsilon)
            errs[n].append(np.linalg.norm(fit_nlls(sub, fam, grid_per_axis=2).theta - star))
    med = [np.median(errs[n]) for n in (50, 200, 500)]
    assert med[0] > med[1] > med[2]


# ---------------------------------------------------------------------------
# confidence sets


def test_membership_center_and_boundary():
    d, fam = synthetic_design([-1.0, 1.0], 100, seed=2)
    th = fit_nlls(d, fam).theta
    conf = ConfidenceState(fam, th, 100, 0.3, 0.1, d)
    assert membership(th, conf)
    direction = np.array([1.0, 0.5])
    unit = conf.distance(th + direction)
    edge = th + direction * (0.3 / unit)
    dist = conf.distance(edge)
    conf_at = ConfidenceState(fam, th, 100, dist, 0.1, d)
    assert membership(edge, conf_at)
    conf_below = ConfidenceState(fam, th, 100, np.nextafter(dist, 0.0), 0.1, d)
    assert not membership(edge, conf_below)


def test_sq_distances_linear_matches_direct_sum():
    d, fam = synthetic_design([-1.0, 1.0], 80, seed=6)
    thetas = fam.theta_grid(4)
    ref = np.array([-1.1, 1.3])
    fast = sq_distances(thetas, ref, d, fam)
    direct = [d.epsilon ** 2 * np.sum((fam.drift_bar(t, d.states, d.actions) - fam.drift_bar(ref, d.states, d.actions)) ** 2)
              for t in thetas]
    assert np.allclose(fast, direct, rtol=1e-12)


def test_tracker_equals_batch_recomputation():
    fam = TanhFamily(1, 1, [-0.5, 0.2, 0.5], [0.5, 1.0, 1.5], [-1.0], [1.0], c=1.0, margin=0.2)
    d, _ = synthetic_design([0.3, 0.8, 1.0], 120, seed=1, family=fam)
    cands = fam.theta_grid(2)
    ref = np.array([0.0, 0.6, 1.0])
    head = DesignLog(d.states[:40], d.actions[:40], d.increments[:40], d.epsilon)
    tr = DiscrepancyTracker(fam, d.epsilon, cands, ref, head)
    for x, a in zip(d.states[40:], d.actions[40:]):
        tr.update(x, a)
    assert np.allclose(tr.sums, sq_distances(cands, ref, d, fam), rtol=1e-12)


def test_build_confidence_reports_fit_error():
    d, fam = synthetic_design([-1.0, 1.0], 100, seed=2)
    m = linear_1d(eps=0.1)
    bound = StateBound.from_model(m, fam.family_lyapunov(), [0.0], L0=fam.lipschitz_L0(m.reward))
    r = RadiusSchedule(fam, 0.1, 1.0, bound.L0, bound, 0.1 / 3)
    conf = build_confidence(d, fam, r, theta_star=[-1.0, 1.0])
    assert conf.beta == pytest.approx(r(100))
    assert conf.fit_error_sq == pytest.approx(conf.distance([-1.0, 1.0]) ** 2)


# ---------------------------------------------------------------------------
# eluder dimension


def eluder_by_enumeration(values, level):
    """Independent route: DFS over ordered sequences, tracking the feasible level set as intervals."""
    v = np.asarray(values, dtype=float)
    m, p = v.shape
    pairs = list(itertools.combinations(range(m), 2))
    gap = np.array([np.abs(v[i] - v[j]) for i, j in pairs])       # (pairs, points)
    best = 0

    def intersect(a, b):
        out = []
        for lo1, hi1 in a:
            for lo2, hi2 in b:
                lo, hi = max(lo1, lo2), min(hi1, hi2)
                if lo < hi:
                    out.append((lo, hi))
        return out

    def dfs(used, acc, feasible, depth):
        nonlocal best
        best = max(best, depth)
        norms = np.sqrt(acc)
        for x in range(p):
            if used & (1 << x):
                continue
            # x is e-independent iff some pair has prefix norm <= e < gap at x
            ok = [(float(a), float(b)) for a, b in zip(norms, gap[:, x]) if a < b]
            nxt = intersect(feasible, ok)
            if nxt:
                dfs(used | (1 << x), acc + gap[:, x] ** 2, nxt, depth + 1)

    dfs(0, np.zeros(len(pairs)), [(level, math.inf)], 0)
    return best


def test_eluder_constant_class():
    vals = np.array([[0.0] * 5, [1.0] * 5, [2.5] * 5])
    assert estimate_eluder(vals, 0.5).dimension_estimate == 1
    assert estimate_eluder(vals, 3.0).dimension_estimate == 0


def test_eluder_singleton_class():
    assert estimate_eluder(np.array([[0.3, 1.0, 2.0]]), 0.1).dimension_estimate == 0


def test_eluder_matches_enumeration_small():
    rng = np.random.default_rng(0)
    for _ in range(15):
        m, p = rng.integers(2, 6), rng.integers(1, 7)
        vals = rng.normal(size=(m, p))
        lvl = float(rng.uniform(0.05, 1.0))
        rep = estimate_eluder(vals, lvl)
        assert rep.exact
        assert rep.dimension_estimate == eluder_by_enumeration(vals, lvl)


def test_eluder_witness_is_independent_sequence():
    vals = np.random.default_rng(2).normal(size=(5, 6))
    rep = estimate_eluder(vals, 0.2)
    seq = rep.witness_sequences[0]
    e = rep.level_used
    assert len(seq) == rep.dimension_estimate and e >= 0.2
    for k, x in enumerate(seq):
        prev = seq[:k]
        assert any(math.sqrt(sum((vals[i, y] - vals[j, y]) ** 2 for y in prev)) <= e < abs(vals[i, x] - vals[j, x])
                   for i, j in itertools.combinations(range(5), 2))


def test_eluder_monotone_in_level():
    vals = np.random.default_rng(3).normal(size=(4, 7))
    dims = [estimate_eluder(vals, e).dimension_estimate for e in (0.05, 0.2, 0.5, 1.0, 2.0)]
    assert all(a >= b for a, b in zip(dims, dims[1:]))


def test_eluder_linear_class_small():
    fam = LinearFamily(1, 1, [-2.0, 0.1], [-0.5, 3.0], [-1.0], [1.0])
    grid = np.linspace(-1, 1, 8)[:, None]
    acts = np.zeros((8, 1))
    vals = np.stack([fam.drift_bar(t, grid, acts)[:, 0] for t in fam.theta_grid([3, 2])])
    vals = vals[:6]
    rep = estimate_eluder(vals, 0.3)
    assert rep.dimension_estimate == eluder_by_enumeration(vals, 0.3)
    assert rep.dimension_estimate <= 4 * fam.dim_theta * math.log(8)


def test_eluder_budget_fallback_is_lower_bound():
    vals = np.random.default_rng(5).normal(size=(4, 6))
    exact = estimate_eluder(vals, 0.3)
    lower = estimate_eluder(vals, 0.3, budget=10)
    assert not lower.exact and lower.dimension_estimate <= exact.dimension_estimate


# ---------------------------------------------------------------------------
# prediction errors


def test_prediction_error_zero_when_exact():
    d, fam = synthetic_design([-1.0, 1.0], 30, seed=0)
    X = np.vstack([d.states, d.states[-1:] + d.increments[-1:]])
    assert prediction_error_bounds(X, d.actions, np.tile([-1.0, 1.0], (30, 1)), [-1.0, 1.0], fam, 0.1) == (0.0, 0.0)


def test_width_bound_transcription():
    f, s = width_bounds(2.0, 3, 100, 4.0)
    assert f == pytest.approx(2 * 2 * math.sqrt(300) + 12)
    assert s == pytest.approx(4 * 4 * 3 * (3 + math.log(100 * 4 / (16 * 16 * 9))) + 2 * 3 * (1 + 24) * 17)


def _learning_run(seed, T=60.0, eps=0.1):
    m = linear_1d(eps=eps)
    res = run(AgentConfig(planner_radius=6.0, planner_spacing=0.1, theta_grid_per_axis=5),
              m, ClockConfig(eps, T, seed))
    return m, res


def test_realized_second_order_below_width_bound():
    for seed in range(20):
        m, res = _learning_run(seed)
        log = res.log
        N = log.n_events
        th = res.theta_hats[:N].copy()
        th[0] = res.episodes[0].theta_hat
        for n in range(1, N):
            if np.isnan(th[n, 0]):
                th[n] = th[n - 1]
        first, second = prediction_error_bounds(log.states, log.actions, th, m.theta, m.family, m.epsilon)
        members = m.family.theta_grid(3)[:6]
        d_E = eluder_on_ball(m.family, m.epsilon, members, float(np.abs(log.states).max()), N).dimension_estimate
        sup_state = float(np.abs(log.states).max())
        _, bound2 = width_bounds(float(res.betas[N]), d_E, N, sup_state)
        assert second <= bound2


def test_first_order_sum_is_sublinear():
    m, res = _learning_run(0, T=400.0)
    log = res.log
    N = log.n_events
    th = res.theta_hats[:N].copy()
    th[0] = res.episodes[0].theta_hat
    for n in range(1, N):
        if np.isnan(th[n, 0]):
            th[n] = th[n - 1]
    Ns = np.unique(np.logspace(2, math.log10(N), 8).astype(int))
    sums = [prediction_error_bounds(log.states[:k + 1], log.actions[:k], th[:k], m.theta, m.family, m.epsilon)[0]
            for k in Ns]
    slope = np.polyfit(np.log(Ns), np.log(sums), 1)[0]
    assert slope < 0.9
