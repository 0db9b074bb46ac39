"""Controlled marked compound-Poisson state process.

Events arrive on a Poisson clock with mean gap eps.  At each arrival the
state moves by X <- X + eps mu_bar(X, a) + eps^{1/2} Sigma_bar xi and the
reward eps r_bar(X, a) of the previous state/action pair is collected.
Between arrivals the state is piecewise constant (left limits).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import ModelFault, ModelSpec

STREAMS = ("clock", "marks", "agent")


@dataclass(frozen=True)
class ClockConfig:
    epsilon: float
    horizon_T: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.horizon_T < 0.0:
            raise ValueError("horizon must be nonnegative")


def rng_streams(seed) -> dict[str, np.random.Generator]:
    """Independent generators for the clock, the marks and the agent."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    children = root.spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def sample_arrivals(cfg: ClockConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Arrival times tau_1 < tau_2 < ... <= T with exponential(mean eps) gaps."""
    if rng is None:
        rng = rng_streams(cfg.seed)["clock"]
    if cfg.horizon_T <= 0.0:
        return np.empty(0)
    mean = cfg.horizon_T / cfg.epsilon
    chunk = int(mean + 6.0 * math.sqrt(mean) + 16)
    times = np.cumsum(rng.exponential(cfg.epsilon, chunk))
    while times[-1] <= cfg.horizon_T:
        more = times[-1] + np.cumsum(rng.exponential(cfg.epsilon, chunk))
        times = np.concatenate([times, more])
    return times[: np.searchsorted(times, cfg.horizon_T, side="right")]


def sample_marks(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, d))


def step(state, action, model: ModelSpec, mark) -> np.ndarray:
    """One event: state + mu(state, action) + Sigma mark."""
    out = state + model.drift(state, action) + model.noise_matrix @ mark
    if not np.all(np.isfinite(out)):
        raise ModelFault("non-finite state after step")
    return out


@dataclass
class EventLog:
    """Realized trajectory.

    arrivals[0] = 0 and arrivals[n] = tau_n; states has N + 1 rows;
    actions[n], rewards[n] and marks[n] belong to the transition n -> n + 1,
    so rewards[n] = eps r_bar(states[n], actions[n]) is collected at tau_{n+1}.
    """

    arrivals: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    marks: np.ndarray
    epsilon: float
    horizon_T: float
    exploded: bool = False
    cap: float = math.inf
    meta: dict = field(default_factory=dict)

    @property
    def n_events(self) -> int:
        return self.rewards.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def state_at(self, t: float) -> np.ndarray:
        """Left-limit convention: the state on [tau_{n}, tau_{n+1}) is states[n]."""
        idx = int(np.searchsorted(self.arrivals, t, side="right")) - 1
        return self.states[max(idx, 0)]

    def counts_at(self, t) -> np.ndarray:
        """N_t for each t (number of arrivals in (0, t])."""
        return np.searchsorted(self.arrivals[1:], np.asarray(t), side="right")

    def to_csv(self, path) -> None:
        d, dA = self.states.shape[1], self.actions.shape[1] if self.actions.ndim == 2 else 0
        header = (["n", "tau"] + [f"x_{i + 1}" for i in range(d)] + [f"a_{i + 1}" for i in range(dA)]
                  + ["reward"] + [f"xi_{i + 1}" for i in range(d)])
        fmt = "{:.17g}".format
        N = self.n_events
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for n in range(N + 1):
                row = [str(n), fmt(self.arrivals[n])] + [fmt(v) for v in self.states[n]]
                # action/mark of the transition leaving n; reward collected at tau_n
                row += [fmt(v) for v in self.actions[n]] if n < N else [""] * dA
                row += [fmt(self.rewards[n - 1])] if n > 0 else [""]
                row += [fmt(v) for v in self.marks[n]] if n < N else [""] * d
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, epsilon: float, horizon_T: float) -> "EventLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(h.startswith("x_") for h in header)
        dA = sum(h.startswith("a_") for h in header)
        N = len(body) - 1
        arr = np.array([float(r[1]) for r in body])
        states = np.array([[float(v) for v in r[2:2 + d]] for r in body]).reshape(N + 1, d)
        actions = np.array([[float(v) for v in r[2 + d:2 + d + dA]] for r in body[:N]]).reshape(N, dA)
        rewards = np.array([float(r[2 + d + dA]) for r in body[1:]])
        marks = np.array([[float(v) for v in r[3 + d + dA:3 + 2 * d + dA]] for r in body[:N]]).reshape(N, d)
        return cls(arr, states, actions, rewards, marks, epsilon, horizon_T)


Policy = Callable[[np.ndarray], np.ndarray]


def rollout(policy: Policy, model: ModelSpec, cfg: ClockConfig, x0, cap: float | None = None,
            cap_delta: float = 0.1, streams: dict | None = None,
            initial_action=None) -> EventLog:
    """Simulate the closed loop under a stationary policy.

    The hard cap on |X| defaults to 10 H_delta(N_T) built from the model's own
    certificate; crossing it truncates the log and sets ``exploded``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(model.d)
    streams = streams or rng_streams(cfg.seed)
    arrivals = sample_arrivals(cfg, streams["clock"])
    N = arrivals.size
    marks = sample_marks(N, model.d, streams["marks"])
    if cap is None:
        from .learning import StateBound
        cap = 10.0 * StateBound.from_model(model, model.lyapunov(), x0)(N, cap_delta)
    states = np.empty((N + 1, model.d))
    actions = np.empty((N, model.dA))
    states[0] = x0
    x = x0
    exploded = False
    n_done = N
    for n in range(N):
        a = np.asarray(initial_action if (n == 0 and initial_action is not None) else policy(x),
                       dtype=float).reshape(model.dA)
        actions[n] = a
        x = step(x, a, model, marks[n])
        states[n + 1] = x
        if math.sqrt(float(x @ x)) > cap:
            exploded = True
            n_done = n + 1
            break
    states, actions, marks = states[: n_done + 1], actions[:n_done], marks[:n_done]
    rewards = model.epsilon * model.reward_bar(states[:-1], actions)
    return EventLog(np.concatenate([[0.0], arrivals[:n_done]]), states, actions,
                    np.asarray(rewards, dtype=float).reshape(n_done), marks,
                    model.epsilon, cfg.horizon_T, exploded, cap)


def replay(log: EventLog, model: ModelSpec) -> np.ndarray:
    """Recompute the states of a log from x0, its actions and its marks."""
    out = np.empty_like(log.states)
    out[0] = x = log.states[0]
    for n in range(log.n_events):
        x = step(x, log.actions[n], model, log.marks[n])
        out[n + 1] = x
    return out


def poisson_envelope(epsilon: float, T: float, delta: float) -> float:
    """2 sqrt(eps T log(2/delta)) v 2 eps log(2/delta)."""
    L = math.log(2.0 / delta)
    return max(2.0 * math.sqrt(epsilon * T * L), 2.0 * epsilon * L)


def poisson_violation(cfg: ClockConfig, delta: float, n_events: int) -> bool:
    return abs(cfg.epsilon * n_events - cfg.horizon_T) > poisson_envelope(cfg.epsilon, cfg.horizon_T, delta)


def sup_ratio_to_bound(log: EventLog, bound: Callable[[int], float]) -> float:
    """sup_t |X_t| / H(N_t); on [tau_n, tau_{n+1}) the state is states[n] and N_t = n."""
    norms = np.linalg.norm(log.states, axis=1)
    H = np.array([bound(n) for n in range(norms.size)])
    return float(np.max(norms / H))
