"""Parametric drift/reward families, model specs and Lyapunov certificates.

A :class:`ModelSpec` bundles a parameter point with the rescaled drift,
reward and noise maps it induces.  The two shipped drift families are

* ``linear``:  mu_bar(x, a) = A x + B a, theta = (vec A, vec B)
* ``tanh``:    mu_bar(x, a) = -c x + t1 * tanh(t2 * x) + B a, theta = (t1, t2, vec B)

Vectors are numpy arrays; all maps broadcast over leading axes.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class ModelFault(RuntimeError):
    """A drift or reward evaluation produced a non-finite value."""


class CertificateUnavailable(ValueError):
    """No stability certificate exists for the requested drift."""


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class Reward:
    """Bounded reward map r_bar(x, a).

    kinds: ``constant`` (value), ``bump`` (exp(-|x - center|^2)),
    ``bump_quadratic`` (bump - 0.5 |clip(a)|^2), ``bump_l1`` (bump - cost |a|_1).
    An off-origin center makes the optimal drift switch asymmetrically.
    """

    kind: str = "bump_quadratic"
    value: float = 1.0
    cost: float = 0.1
    clip: float = 1.0
    center: float = 0.0

    def __call__(self, x, a) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        if self.kind == "constant":
            shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
            return np.full(shape, float(self.value))
        xc = x - self.center
        bump = np.exp(-np.sum(xc * xc, axis=-1))
        if self.kind == "bump":
            return bump + 0.0 * a[..., 0]
        if self.kind == "bump_quadratic":
            ac = np.clip(a, -self.clip, self.clip)
            return bump - 0.5 * np.sum(ac * ac, axis=-1)
        if self.kind == "bump_l1":
            return bump - self.cost * np.sum(np.abs(a), axis=-1)
        raise ValueError(f"unknown reward kind {self.kind!r}")

    def bound(self, action_low: np.ndarray, action_high: np.ndarray) -> float:
        """sup |r_bar| over states and the action box."""
        amax = np.maximum(np.abs(action_low), np.abs(action_high))
        if self.kind == "constant":
            return abs(float(self.value))
        if self.kind == "bump":
            return 1.0
        if self.kind == "bump_quadratic":
            ac = np.minimum(amax, self.clip)
            return max(1.0, 0.5 * float(ac @ ac))
        if self.kind == "bump_l1":
            return max(1.0, self.cost * float(np.sum(amax)))
        raise ValueError(f"unknown reward kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "cost": self.cost, "clip": self.clip,
                "center": self.center}


# ---------------------------------------------------------------------------
# Lyapunov certificates


@dataclass(frozen=True)
class LyapunovSpec:
    """Norm-type Lyapunov function V(z) = sqrt(z' P z) with its constants.

    ``eps_max`` is the largest clock scale for which the contraction
    V(z + eps (mu(x) - mu(x'))) <= (1 - eps c_V) V(z) is certified.
    ``M_V_prime`` is a Hessian bound measured on the shell |z| >= hessian_radius;
    it is exact (zero) in dimension one.
    """

    metric: np.ndarray
    ell_V: float
    L_V: float
    M_V: float
    M_V_prime: float
    c_V: float
    eps_max: float
    hessian_radius: float = 1.0
    hessian_bound_local: bool = False

    def value(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.sqrt(np.einsum("...i,ij,...j->...", z, self.metric, z))


def _vec_norm_metric(P: np.ndarray, hessian_radius: float = 1.0, probes: int = 512,
                     seed: int = 0) -> tuple[float, float, float, float, bool]:
    """ell_V, L_V, M_V, M'_V for V = |.|_P; M'_V is probe-measured on |z| = hessian_radius."""
    evals = np.linalg.eigvalsh(P)
    lmin, lmax = float(evals[0]), float(evals[-1])
    d = P.shape[0]
    ell, L = math.sqrt(lmin), math.sqrt(lmax)
    # grad V = P z / V(z); sup |grad V| = sqrt(lmax)
    M = L
    if d == 1:
        return ell, L, M, 0.0, False
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((probes, d))
    z *= hessian_radius / np.linalg.norm(z, axis=1, keepdims=True)
    Pz = z @ P
    v = np.sqrt(np.sum(z * Pz, axis=1))
    hess = P[None] / v[:, None, None] - Pz[:, :, None] * Pz[:, None, :] / v[:, None, None] ** 3
    Mp = float(np.max(np.linalg.norm(hess, ord=2, axis=(1, 2))))
    return ell, L, M, Mp, True


def _contraction_eps_max(P: np.ndarray, jacobians: list[np.ndarray], c_V: float,
                         grid: int = 2000) -> float:
    """Largest eps in (0, 1] with |P^1/2 (I + e J) P^-1/2| <= 1 - e c_V for all e <= eps, all J."""
    S = scipy.linalg.sqrtm(P).real
    Si = np.linalg.inv(S)
    eps = np.linspace(1.0 / grid, 1.0, grid)
    ok = np.ones(grid, dtype=bool)
    d = P.shape[0]
    for J in jacobians:
        for i, e in enumerate(eps):
            if not ok[i]:
                continue
            M = S @ (np.eye(d) + e * J) @ Si
            if np.linalg.norm(M, 2) > 1.0 - e * c_V + 1e-12:
                ok[i] = False
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return 1.0
    return float(eps[bad[0] - 1]) if bad[0] > 0 else 0.0


def solve_care(A_bar) -> LyapunovSpec:
    """Solve A' P + P A = -I for Hurwitz A and build the norm certificate.

    c_V = 1 / (4 lambda_max(P)).  The certified clock range is
    eps <= min(1 / (2 lambda_max(P)), 1 / (2 lambda_max(A' P A))); the second
    term bounds the eps^2 A' P A contribution to V(psi)^2.
    """
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    eig = np.linalg.eigvals(A)
    if not np.all(eig.real < 0):
        raise CertificateUnavailable(f"drift matrix not Hurwitz: eigenvalues {eig}")
    d = A.shape[0]
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -np.eye(d))
    P = 0.5 * (P + P.T)
    ell, L, M, Mp, local = _vec_norm_metric(P)
    lmax = L * L
    c_V = 1.0 / (4.0 * lmax)
    lam_apa = float(np.linalg.eigvalsh(A.T @ P @ A)[-1])
    eps_max = min(1.0, 1.0 / (2.0 * lmax), 1.0 / (2.0 * lam_apa))
    return LyapunovSpec(P, ell, L, M, Mp, c_V, eps_max, 1.0, local)


def care_residual(A_bar, P) -> float:
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    return float(np.linalg.norm(A.T @ P + P @ A + np.eye(A.shape[0]), 2))


def contraction_chain(A_bar, P, eps: float, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (V(psi)^2, z'(P - eps I + eps^2 A'PA)z, (1 - eps/(2 lmax)) V(z)^2) per row of z."""
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    d = A.shape[0]
    psi = z + eps * z @ A.T
    vpsi2 = np.einsum("ni,ij,nj->n", psi, P, psi)
    Q = P - eps * np.eye(d) + eps * eps * A.T @ P @ A
    quad = np.einsum("ni,ij,nj->n", z, Q, z)
    lmax = float(np.linalg.eigvalsh(P)[-1])
    bound = (1.0 - eps / (2.0 * lmax)) * np.einsum("ni,ij,nj->n", z, P, z)
    return vpsi2, quad, bound


# ---------------------------------------------------------------------------
# drift families


class DriftFamily:
    """Base class: parameter box, action box and the drift map mu_bar_theta."""

    family_id = "base"
    linear_in_theta = False

    def __init__(self, d: int, dA: int, theta_low, theta_high, action_low, action_high):
        self.d = int(d)
        self.dA = int(dA)
        self.theta_low = np.asarray(theta_low, dtype=float).ravel()
        self.theta_high = np.asarray(theta_high, dtype=float).ravel()
        self.action_low = np.asarray(action_low, dtype=float).ravel()
        self.action_high = np.asarray(action_high, dtype=float).ravel()
        if self.theta_low.shape != self.theta_high.shape or np.any(self.theta_low > self.theta_high):
            raise ValueError("invalid parameter box")
        if self.action_low.size != self.dA or np.any(self.action_low > self.action_high):
            raise ValueError("invalid action box")

    @property
    def dim_theta(self) -> int:
        return self.theta_low.size

    @property
    def theta_diameter(self) -> float:
        return float(np.linalg.norm(self.theta_high - self.theta_low))

    @property
    def action_radius(self) -> float:
        return float(np.linalg.norm(np.maximum(np.abs(self.action_low), np.abs(self.action_high))))

    def theta_center(self) -> np.ndarray:
        return 0.5 * (self.theta_low + self.theta_high)

    def theta_corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.theta_low, self.theta_high))))

    def theta_grid(self, per_axis) -> np.ndarray:
        """Tensor grid over the parameter box, lexicographic order."""
        per_axis = np.broadcast_to(np.asarray(per_axis), (self.dim_theta,))
        axes = [np.linspace(lo, hi, int(k)) if k > 1 else np.array([0.5 * (lo + hi)])
                for lo, hi, k in zip(self.theta_low, self.theta_high, per_axis)]
        return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, self.dim_theta)

    def contains(self, theta, atol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.theta_low - atol) and np.all(theta <= self.theta_high + atol))

    def action_grid(self, per_axis: int = 33) -> np.ndarray:
        axes = [np.linspace(lo, hi, per_axis) if hi > lo else np.array([lo])
                for lo, hi in zip(self.action_low, self.action_high)]
        return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, self.dA)

    # subclasses implement
    def drift_bar(self, theta, x, a) -> np.ndarray:
        raise NotImplementedError

    def drift_bar_many(self, thetas, x, a) -> np.ndarray:
        """Drift for m parameters at one (x, a): returns (m, d)."""
        return np.stack([self.drift_bar(t, x, a) for t in np.atleast_2d(thetas)])

    def jacobian(self, theta, x, a) -> np.ndarray:
        """d mu_bar / d theta at rows of (x, a): returns (n, d, p)."""
        raise NotImplementedError

    def state_jacobians(self, theta) -> list[np.ndarray]:
        """Jacobians in x used for contraction certificates (extreme points)."""
        raise NotImplementedError

    def growth_bound(self, theta) -> float:
        """L with |mu_bar(x, a)| <= L (1 + |x|) on the action box."""
        raise NotImplementedError

    def theta_lipschitz(self, state_radius: float) -> float:
        """L_probe with sup_{|x|<=R, a} |mu_bar_t1 - mu_bar_t2| <= L_probe |t1 - t2|_inf-ish."""
        raise NotImplementedError

    def log_cover(self, state_radius: float, tol: float) -> float:
        return log_cover_bound(self, state_radius, tol)

    def family_lyapunov(self) -> LyapunovSpec:
        raise NotImplementedError

    def lyapunov(self, theta) -> LyapunovSpec:
        raise NotImplementedError

    def lipschitz_L0(self, reward: Reward) -> float:
        g = max(self.growth_bound(t) for t in self.theta_corners())
        return max(g, reward.bound(self.action_low, self.action_high))

    def to_dict(self) -> dict:
        return {"family_id": self.family_id, "d": self.d, "dA": self.dA,
                "theta_low": self.theta_low.tolist(), "theta_high": self.theta_high.tolist(),
                "action_low": self.action_low.tolist(), "action_high": self.action_high.tolist()}


class LinearFamily(DriftFamily):
    """mu_bar(x, a) = A x + B a with theta = (A.ravel(), B.ravel()) row-major."""

    family_id = "linear"
    linear_in_theta = True

    def __init__(self, d, dA, theta_low, theta_high, action_low, action_high):
        super().__init__(d, dA, theta_low, theta_high, action_low, action_high)
        if self.dim_theta != d * d + d * dA:
            raise ValueError("linear family needs d*d + d*dA parameters")

    def split(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        d, dA = self.d, self.dA
        return theta[: d * d].reshape(d, d), theta[d * d:].reshape(d, dA)

    def drift_bar(self, theta, x, a):
        A, B = self.split(theta)
        return np.asarray(x, dtype=float) @ A.T + np.asarray(a, dtype=float) @ B.T

    def drift_bar_many(self, thetas, x, a):
        thetas = np.atleast_2d(thetas)
        d, dA = self.d, self.dA
        As = thetas[:, : d * d].reshape(-1, d, d)
        Bs = thetas[:, d * d:].reshape(-1, d, dA)
        return As @ np.asarray(x, dtype=float) + Bs @ np.asarray(a, dtype=float)

    def features(self, x, a) -> np.ndarray:
        """Phi with mu_bar = Phi @ theta: (n, d, p)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        n, d, dA = x.shape[0], self.d, self.dA
        phi = np.zeros((n, d, self.dim_theta))
        for i in range(d):
            phi[:, i, i * d:(i + 1) * d] = x
            off = d * d + i * dA
            phi[:, i, off:off + dA] = a
        return phi

    def jacobian(self, theta, x, a):
        return self.features(x, a)

    def state_jacobians(self, theta):
        return [self.split(theta)[0]]

    def growth_bound(self, theta):
        A, B = self.split(theta)
        amax = np.maximum(np.abs(self.action_low), np.abs(self.action_high))
        return max(float(np.linalg.norm(A, 2)), float(np.linalg.norm(B, 2) * np.linalg.norm(amax)))

    def theta_lipschitz(self, state_radius):
        return 1.0 + state_radius + self.action_radius

    def lyapunov(self, theta):
        return solve_care(self.split(theta)[0])

    def family_lyapunov(self):
        # CARE at the least stable corner, contraction range checked over all corners
        corners = self.theta_corners()
        abscissa = [max(np.linalg.eigvals(self.split(t)[0]).real) for t in corners]
        worst = corners[int(np.argmax(abscissa))]
        base = solve_care(self.split(worst)[0])
        jacs = [self.split(t)[0] for t in corners]
        eps_max = _contraction_eps_max(base.metric, jacs, base.c_V)
        if eps_max <= 0.0:
            raise CertificateUnavailable("no common contraction range over the parameter box")
        return LyapunovSpec(base.metric, base.ell_V, base.L_V, base.M_V, base.M_V_prime,
                            base.c_V, eps_max, base.hessian_radius, base.hessian_bound_local)


class TanhFamily(DriftFamily):
    """mu_bar(x, a) = -c x + t1 tanh(t2 x) + B a, tanh elementwise, theta = (t1, t2, B.ravel())."""

    family_id = "tanh"

    def __init__(self, d, dA, theta_low, theta_high, action_low, action_high, c: float = 1.0,
                 margin: float = 0.1):
        super().__init__(d, dA, theta_low, theta_high, action_low, action_high)
        if self.dim_theta != 2 + d * dA:
            raise ValueError("tanh family needs 2 + d*dA parameters")
        self.c = float(c)
        self.margin = float(margin)
        if self.max_gain() > self.c - self.margin:
            raise CertificateUnavailable("|t1 t2| must stay below c - margin on the box")

    def max_gain(self) -> float:
        return max(abs(t[0] * t[1]) for t in self.theta_corners())

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return theta[0], theta[1], theta[2:].reshape(self.d, self.dA)

    def drift_bar(self, theta, x, a):
        t1, t2, B = self.split(theta)
        x = np.asarray(x, dtype=float)
        return -self.c * x + t1 * np.tanh(t2 * x) + np.asarray(a, dtype=float) @ B.T

    def drift_bar_many(self, thetas, x, a):
        thetas = np.atleast_2d(thetas)
        x = np.asarray(x, dtype=float)
        Bs = thetas[:, 2:].reshape(-1, self.d, self.dA)
        return (-self.c * x[None] + thetas[:, :1] * np.tanh(thetas[:, 1:2] * x[None])
                + Bs @ np.asarray(a, dtype=float))

    def jacobian(self, theta, x, a):
        t1, t2, _ = self.split(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        n, d, dA = x.shape[0], self.d, self.dA
        J = np.zeros((n, d, self.dim_theta))
        th = np.tanh(t2 * x)
        J[:, :, 0] = th
        J[:, :, 1] = t1 * x * (1.0 - th * th)
        for i in range(d):
            J[:, i, 2 + i * dA: 2 + (i + 1) * dA] = a
        return J

    def state_jacobians(self, theta):
        t1, t2, _ = self.split(theta)
        g = t1 * t2
        eye = np.eye(self.d)
        # Jacobian -c I + g diag(sech^2) ranges over the segment between these
        return [-self.c * eye, (-self.c + g) * eye]

    def growth_bound(self, theta):
        t1, _, B = self.split(theta)
        amax = np.maximum(np.abs(self.action_low), np.abs(self.action_high))
        return self.c + abs(t1) * math.sqrt(self.d) + float(np.linalg.norm(B, 2) * np.linalg.norm(amax))

    def theta_lipschitz(self, state_radius):
        t1max = float(np.max(np.abs(self.theta_corners()[:, 0])))
        return math.sqrt(self.d) + t1max * state_radius + self.action_radius

    def _euclid(self, gain: float) -> LyapunovSpec:
        P = np.eye(self.d)
        c_V = self.c - gain
        eps_max = min(1.0, 1.0 / (self.c + gain))
        ell, L, M, Mp, local = _vec_norm_metric(P)
        return LyapunovSpec(P, ell, L, M, Mp, c_V, eps_max, 1.0, local)

    def lyapunov(self, theta):
        t1, t2, _ = self.split(theta)
        return self._euclid(abs(t1 * t2))

    def family_lyapunov(self):
        return self._euclid(self.max_gain())


def log_cover_bound(family: DriftFamily, state_radius: float, tol: float) -> float:
    """Upper bound on log N for the family on the ball of radius state_radius.

    Box-cover argument: dim_theta * log(1 + 2 L_probe diam / tol); zero once a
    single element covers (tol >= diam * L_probe).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    L = family.theta_lipschitz(state_radius)
    diam = family.theta_diameter
    if tol >= diam * L:
        return 0.0
    return family.dim_theta * math.log1p(2.0 * L * diam / tol)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A parameter point bundled with its rescaled model maps."""

    family: DriftFamily
    theta: np.ndarray
    sigma_bar: np.ndarray
    epsilon: float
    reward: Reward = field(default_factory=Reward)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        sig = np.atleast_2d(np.asarray(self.sigma_bar, dtype=float))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma_bar", sig)
        if theta.size != self.family.dim_theta:
            raise ValueError("theta has the wrong dimension")
        if sig.shape != (self.family.d, self.family.d):
            raise ValueError("sigma_bar must be d x d")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.ellipticity <= 0.0:
            raise ValueError("sigma_bar sigma_bar' must be positive definite")
        theta.setflags(write=False)
        sig.setflags(write=False)
        object.__setattr__(self, "_noise", math.sqrt(self.epsilon) * sig)

    @property
    def d(self) -> int:
        return self.family.d

    @property
    def dA(self) -> int:
        return self.family.dA

    @property
    def family_id(self) -> str:
        return self.family.family_id

    @property
    def ellipticity(self) -> float:
        return float(np.linalg.eigvalsh(self.sigma_bar @ self.sigma_bar.T)[0])

    @property
    def sigma_norm(self) -> float:
        return float(np.linalg.norm(self.sigma_bar, 2))

    @property
    def noise_matrix(self) -> np.ndarray:
        """Sigma = eps^{1/2} Sigma_bar."""
        return self._noise

    @property
    def L0(self) -> float:
        return max(self.family.growth_bound(self.theta),
                   self.reward.bound(self.family.action_low, self.family.action_high))

    def with_theta(self, theta) -> "ModelSpec":
        return ModelSpec(self.family, theta, self.sigma_bar, self.epsilon, self.reward)

    def with_epsilon(self, epsilon: float) -> "ModelSpec":
        return ModelSpec(self.family, self.theta, self.sigma_bar, epsilon, self.reward)

    def drift_bar(self, x, a) -> np.ndarray:
        return self.family.drift_bar(self.theta, x, a)

    def drift(self, x, a) -> np.ndarray:
        """mu = eps * mu_bar."""
        return self.epsilon * self.family.drift_bar(self.theta, x, a)

    def reward_bar(self, x, a) -> np.ndarray:
        return self.reward(x, a)

    def lyapunov(self) -> LyapunovSpec:
        return self.family.lyapunov(self.theta)

    def to_dict(self) -> dict:
        out = self.family.to_dict()
        if isinstance(self.family, TanhFamily):
            out.update(c=self.family.c, margin=self.family.margin)
        out.update(theta=self.theta.tolist(), sigma_bar=self.sigma_bar.tolist(),
                   epsilon=self.epsilon, reward=self.reward.to_dict())
        return out


def eval_drift(model: ModelSpec, x, a) -> np.ndarray:
    out = model.drift_bar(x, a)
    if not np.all(np.isfinite(out)):
        raise ModelFault("non-finite drift")
    return out


def eval_reward(model: ModelSpec, x, a, atol: float = 1e-12) -> np.ndarray:
    out = model.reward_bar(x, a)
    if not np.all(np.isfinite(out)):
        raise ModelFault("non-finite reward")
    if np.any(np.abs(out) > model.L0 + atol):
        raise ModelFault("reward exceeds its declared bound")
    return out


@dataclass
class ContractionReport:
    n_probes: int
    n_pass: int
    violations: np.ndarray
    max_ratio: float

    @property
    def fraction(self) -> float:
        return self.n_pass / self.n_probes if self.n_probes else 1.0

    @property
    def passed(self) -> bool:
        return self.n_pass == self.n_probes


def verify_contraction(model: ModelSpec, lyap: LyapunovSpec, x, x_prime, a, eps,
                       atol: float = 1e-12) -> ContractionReport:
    """Check V(x + eps mu(x,a) - x' - eps mu(x',a)) <= (1 - eps c_V) V(x - x') per probe."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xp = np.atleast_2d(np.asarray(x_prime, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (x.shape[0],))
    fam, th = model.family, model.theta
    diff = x - xp
    psi = diff + eps[:, None] * (fam.drift_bar(th, x, a) - fam.drift_bar(th, xp, a))
    lhs = lyap.value(psi)
    base = lyap.value(diff)
    rhs = (1.0 - eps * lyap.c_V) * base
    ok = lhs <= rhs + atol
    ratio = np.where(base > 0, lhs / np.where(base > 0, base, 1.0), 0.0)
    return ContractionReport(x.shape[0], int(ok.sum()), np.flatnonzero(~ok),
                             float(ratio.max()) if ratio.size else 0.0)


def contraction_probes(model: ModelSpec, lyap: LyapunovSpec, n: int, radius: float = 5.0,
                       seed: int = 0):
    """Random probes (x, x', a, eps) with x != x' and eps in (0, eps_max]."""
    rng = np.random.default_rng(seed)
    d, fam = model.d, model.family
    x = rng.uniform(-radius, radius, (n, d))
    h = rng.standard_normal((n, d))
    h *= rng.uniform(1e-3, radius, (n, 1)) / np.linalg.norm(h, axis=1, keepdims=True)
    a = rng.uniform(fam.action_low, fam.action_high, (n, fam.dA))
    eps = rng.uniform(0.0, 1.0, n) * lyap.eps_max
    eps = np.where(eps == 0.0, lyap.eps_max, eps)
    return x, x + h, a, eps


# ---------------------------------------------------------------------------
# construction from declarative configs


def family_from_dict(cfg: dict) -> DriftFamily:
    fid = cfg["family_id"]
    d = int(cfg.get("d", 1))
    dA = int(cfg.get("dA", 1))
    args = (d, dA, cfg["theta_low"], cfg["theta_high"],
            cfg.get("action_low", [-1.0] * dA), cfg.get("action_high", [1.0] * dA))
    if fid == "linear":
        return LinearFamily(*args)
    if fid == "tanh":
        return TanhFamily(*args, c=float(cfg.get("c", 1.0)), margin=float(cfg.get("margin", 0.1)))
    raise ValueError(f"unknown family_id {fid!r}")


def model_from_dict(cfg: dict) -> ModelSpec:
    fam = family_from_dict(cfg)
    rw = cfg.get("reward", {"kind": "bump_quadratic"})
    if isinstance(rw, str):
        rw = {"kind": rw}
    return ModelSpec(fam, cfg["theta"], cfg.get("sigma_bar", np.eye(fam.d).tolist()),
                     float(cfg.get("epsilon", 0.1)), Reward(**rw))


def random_hurwitz(d: int, rng: np.random.Generator, margin: float = 0.2) -> np.ndarray:
    """Random matrix shifted so every eigenvalue has real part <= -margin."""
    M = rng.standard_normal((d, d))
    shift = max(np.linalg.eigvals(M).real) + margin + rng.uniform(0.0, 1.0)
    return M - shift * np.eye(d)
