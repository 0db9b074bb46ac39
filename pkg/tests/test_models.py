import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ofu_diffusion.models import (CertificateUnavailable, LinearFamily, ModelFault, ModelSpec, Reward, TanhFamily,
                                  care_residual, contraction_chain, contraction_probes, eval_drift, eval_reward,
                                  log_cover_bound, model_from_dict, random_hurwitz, solve_care, verify_contraction)

from conftest import linear_1d


def kron_lyapunov(A):
    """Independent route: vec(A'P + PA) = (I kron A' + A' kron I) vec P."""
    d = A.shape[0]
    I = np.eye(d)
    M = np.kron(I, A.T) + np.kron(A.T, I)
    return np.linalg.solve(M, -I.reshape(-1)).reshape(d, d)


def test_care_scalar_closed_form():
    lyap = solve_care([[-1.0]])
    assert lyap.metric[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert lyap.c_V == pytest.approx(0.5, abs=1e-15)


def test_care_identity_drift():
    lyap = solve_care(-np.eye(2))
    assert np.allclose(lyap.metric, 0.5 * np.eye(2), atol=1e-14)
    assert lyap.c_V == pytest.approx(0.5)
    assert lyap.ell_V == pytest.approx(math.sqrt(0.5))
    assert lyap.L_V == pytest.approx(math.sqrt(0.5))


def test_care_matches_kronecker_oracle():
    A = np.array([[-1.0, 1.0], [0.0, -2.0]])
    lyap = solve_care(A)
    assert care_residual(A, lyap.metric) <= 1e-10
    assert np.allclose(lyap.metric, kron_lyapunov(A), atol=1e-12)


def test_care_rejects_unstable():
    with pytest.raises(CertificateUnavailable):
        solve_care([[0.5]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_contraction_chain_holds(seed, d):
    rng = np.random.default_rng(seed)
    A = random_hurwitz(d, rng)
    lyap = solve_care(A)
    z = rng.standard_normal((64, d))
    eps = rng.uniform(0.0, lyap.eps_max, 64)
    for e, zi in zip(eps, z):
        vpsi2, quad, bound = contraction_chain(A, lyap.metric, e, zi)
        assert vpsi2[0] == pytest.approx(quad[0], rel=1e-10, abs=1e-12)
        assert quad[0] <= bound[0] * (1 + 1e-12) + 1e-12


def test_verify_contraction_passes_on_certified_linear_model():
    m = linear_1d(eps=0.1)
    lyap = m.lyapunov()
    rep = verify_contraction(m, lyap, *contraction_probes(m, lyap, 10_000, seed=3))
    assert rep.passed and rep.violations.size == 0


def test_verify_contraction_eps_one_with_half_metric():
    m = linear_1d(A=-1.0, eps=1.0)
    lyap = m.lyapunov()
    assert lyap.metric[0, 0] == pytest.approx(0.5)
    x = np.linspace(-3, 3, 50)[:, None]
    rep = verify_contraction(m, lyap, x, x + 0.7, np.zeros((50, 1)), 1.0)
    assert rep.passed


def test_verify_contraction_reports_expansion():
    fam = LinearFamily(1, 1, [0.5, 0.0], [1.5, 1.0], [-1.0], [1.0])
    m = ModelSpec(fam, [1.0, 0.0], [[1.0]], 0.1)
    lyap = solve_care([[-1.0]])
    x = np.linspace(-2, 2, 20)[:, None]
    rep = verify_contraction(m, lyap, x, x + 0.5, np.zeros((20, 1)), 0.1)
    assert rep.n_pass == 0 and rep.violations.size == 20


def test_step_like_evaluations():
    m = linear_1d(A=-1.0, B=1.0)
    assert np.allclose(eval_drift(m, np.zeros((1, 1)), np.zeros((1, 1))), 0.0)
    r = Reward("bump_quadratic")
    assert float(r(np.zeros(1), np.zeros(1))) == 1.0


def test_reward_duplicate_formula():
    rng = np.random.default_rng(0)
    r = Reward("bump_quadratic", clip=0.8, center=0.3)
    x = rng.normal(size=(200, 2))
    a = rng.uniform(-2, 2, (200, 2))
    ac = np.minimum(np.maximum(a, -0.8), 0.8)
    oracle = np.exp(-((x[:, 0] - 0.3) ** 2 + (x[:, 1] - 0.3) ** 2)) - 0.5 * (ac[:, 0] ** 2 + ac[:, 1] ** 2)
    assert np.max(np.abs(r(x, a) - oracle)) <= 1e-14
    rl = Reward("bump_l1", cost=0.2)
    assert np.max(np.abs(rl(x, a) - (np.exp(-np.sum(x * x, 1)) - 0.2 * np.abs(a).sum(1)))) <= 1e-14


def test_eval_faults():
    m = linear_1d()
    with pytest.raises(ModelFault):
        eval_drift(m, np.array([[np.inf]]), np.zeros((1, 1)))


def test_model_invariants():
    with pytest.raises(ValueError):
        linear_1d(sigma=0.0)
    m = linear_1d()
    with pytest.raises(ValueError):
        m.theta[0] = 3.0
    rng = np.random.default_rng(1)
    x = rng.normal(scale=5.0, size=(500, 1))
    a = rng.uniform(-1, 1, (500, 1))
    assert np.all(np.abs(m.reward_bar(x, a)) <= m.L0)
    assert np.all(np.linalg.norm(m.drift_bar(x, a), axis=1) <= m.L0 * (1 + np.linalg.norm(x, axis=1)) + 1e-12)


def test_log_cover_single_element_and_monotone():
    fam = LinearFamily(1, 1, [-2.0, 0.1], [-0.5, 3.0], [-1.0], [1.0])
    L = fam.theta_lipschitz(5.0)
    assert log_cover_bound(fam, 5.0, fam.theta_diameter * L) == 0.0
    prev = log_cover_bound(fam, 5.0, 1.0)
    for tol in [0.5, 0.25, 0.125]:
        cur = log_cover_bound(fam, 5.0, tol)
        assert prev <= cur <= prev + fam.dim_theta * math.log(2) + 1e-9
        prev = cur
    assert log_cover_bound(fam, 6.0, 0.1) >= log_cover_bound(fam, 5.0, 0.1)


def test_log_cover_dominates_greedy_cover():
    fam = LinearFamily(1, 1, [-2.0, 0.1], [-0.5, 3.0], [-1.0], [1.0])
    R, tol = 5.0, 0.1
    g = fam.theta_grid([40, 40])
    # sup over |x| <= R, |a| <= 1 of |dA x + dB a|
    dist = lambda t, S: np.abs(S[:, 0] - t[0]) * R + np.abs(S[:, 1] - t[1])
    uncovered = np.ones(len(g), dtype=bool)
    centers = 0
    while uncovered.any():
        i = int(np.flatnonzero(uncovered)[0])
        uncovered &= dist(g[i], g) > tol
        centers += 1
    assert math.log(centers) <= log_cover_bound(fam, R, tol)


def test_tanh_family_certificate():
    fam = TanhFamily(1, 1, [-0.5, 0.1, 0.5], [0.5, 1.0, 1.5], [-1.0], [1.0], c=1.0, margin=0.2)
    m = ModelSpec(fam, [0.3, 0.8, 1.0], [[1.0]], 0.1)
    lyap = fam.family_lyapunov()
    rep = verify_contraction(m, lyap, *contraction_probes(m, lyap, 10_000, seed=5))
    assert rep.passed


def test_model_from_dict_roundtrip():
    m = linear_1d()
    m2 = model_from_dict(m.to_dict())
    assert np.array_equal(m.theta, m2.theta) and m2.reward == m.reward and m2.epsilon == m.epsilon
