"""Desk-scale environments: finite MDPs with episodic wrappers and a
pendulum swing-up task.

Tabular instances (chain, gridworld, random) expose their full model
(transition tensor, rewards, initial distribution) so the oracles can
compute exact quantities. Both environment classes support resetting to an
arbitrary stored state, which the Monte-Carlo true-value protocol needs,
and batch rollouts so value estimation stays vectorized.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


class ProtocolError(RuntimeError):
    """step() called on a finished episode without reset()."""


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP (P, r, rho0, gamma) with row-stochastic transitions."""

    transitions: np.ndarray  # (S, A, S), rows sum to 1
    rewards: np.ndarray      # (S, A)
    initial: np.ndarray      # (S,)
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        rho = np.asarray(self.initial, dtype=np.float64)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial", rho)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition tensor must be (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ValueError(f"rewards must be (S, A) = ({S}, {A}), got {r.shape}")
        if rho.shape != (S,):
            raise ValueError(f"initial distribution must have length {S}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be distributions (tol 1e-12)")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1 (tol 1e-12)")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    # Human-readable fixture format: one "key: values" line per field with
    # flattened row-major arrays.
    def to_text(self) -> str:
        lines = [
            f"n_states: {self.n_states}",
            f"n_actions: {self.n_actions}",
            f"gamma: {float(self.gamma)!r}",
            "transitions: " + " ".join(repr(float(v)) for v in self.transitions.ravel()),
            "rewards: " + " ".join(repr(float(v)) for v in self.rewards.ravel()),
            "initial: " + " ".join(repr(float(v)) for v in self.initial.ravel()),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularMdp":
        fields = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
        S = int(fields["n_states"])
        A = int(fields["n_actions"])
        parse = lambda key: np.array([float(v) for v in fields[key].split()])
        return cls(
            transitions=parse("transitions").reshape(S, A, S),
            rewards=parse("rewards").reshape(S, A),
            initial=parse("initial"),
            gamma=float(fields["gamma"]),
        )


def chain_mdp(n_states: int = 10, gamma: float = 0.99,
              goal_reward: float = 1.0) -> TabularMdp:
    """Deterministic chain: action 1 advances (self-loop at the goal, where
    it pays goal_reward), action 0 stays in place for free. The start is
    state 0."""
    S, A = n_states, 2
    P = np.zeros((S, A, S))
    r = np.zeros((S, A))
    for s in range(S):
        P[s, 0, s] = 1.0
        P[s, 1, min(s + 1, S - 1)] = 1.0
    P[S - 1, 1, S - 1] = 1.0
    r[S - 1, 1] = goal_reward
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdp(P, r, rho, gamma)


def gridworld_mdp(rows: int = 4, cols: int = 4, gamma: float = 0.95,
                  slip: float = 0.1, goal_reward: float = 1.0) -> TabularMdp:
    """Rows x cols grid, 4 move actions with slip probability spread over
    the other directions; the bottom-right cell is an absorbing goal whose
    actions pay goal_reward. Start at the top-left corner."""
    S = rows * cols
    A = 4  # up, down, left, right
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    P = np.zeros((S, A, S))
    r = np.zeros((S, A))
    goal = S - 1

    def clip_move(s, move):
        rr, cc = divmod(s, cols)
        nr = min(max(rr + move[0], 0), rows - 1)
        nc = min(max(cc + move[1], 0), cols - 1)
        return nr * cols + nc

    for s in range(S):
        for a in range(A):
            if s == goal:
                P[s, a, s] = 1.0
                r[s, a] = goal_reward
                continue
            for b, move in enumerate(moves):
                prob = 1.0 - slip if b == a else slip / 3.0
                P[s, a, clip_move(s, move)] += prob
    rho = np.zeros(S)
    rho[0] = 1.0
    return TabularMdp(P, r, rho, gamma)


def random_mdp(n_states: int, n_actions: int, gamma: float = 0.95,
               seed: int = 0) -> TabularMdp:
    """Dense random MDP with Dirichlet transition rows and uniform [0, 1)
    rewards; initial distribution is Dirichlet too."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMdp(P, r, rho, gamma)


class TabularEnv:
    """Episodic wrapper around a TabularMdp.

    Episodes end only by truncation at the horizon; the MDPs here have no
    terminal states (gamma < 1 keeps values finite), so pushed transitions
    carry terminal=False and bootstrapping stays correct across resets.
    """

    discrete = True

    def __init__(self, mdp: TabularMdp, horizon: int = 1000,
                 rng: np.random.Generator | None = None):
        self.mdp = mdp
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._state: int | None = None
        self._t = 0
        self._done = True
        self._cum = np.cumsum(mdp.transitions, axis=2)
        self._cum_init = np.cumsum(mdp.initial)

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    def reset(self) -> int:
        self._state = int(np.searchsorted(self._cum_init, self.rng.random()))
        self._t = 0
        self._done = False
        return self._state

    def reset_to(self, state: int) -> int:
        self._state = int(state)
        self._t = 0
        self._done = False
        return self._state

    def step(self, action: int):
        if self._done or self._state is None:
            raise ProtocolError("step() after episode end; call reset()")
        s = self._state
        a = int(action)
        nxt = int(np.searchsorted(self._cum[s, a], self.rng.random()))
        reward = float(self.mdp.rewards[s, a])
        self._t += 1
        truncated = self._t >= self.horizon
        self._done = truncated
        self._state = nxt
        return nxt, reward, False, truncated

    def batch_rollout(self, states, first_actions, policy_fn, horizon: int,
                      gamma: float, rng: np.random.Generator) -> np.ndarray:
        """Vectorized discounted returns from each (state, action) start,
        following policy_fn (batch states -> batch actions) afterwards."""
        s = np.asarray(states, dtype=np.int64).copy()
        a = np.asarray(first_actions, dtype=np.int64).copy()
        n = len(s)
        returns = np.zeros(n)
        discount = 1.0
        for t in range(horizon):
            returns += discount * self.mdp.rewards[s, a]
            u = rng.random(n)
            rows = self._cum[s, a]
            nxt = (u[:, None] < rows).argmax(axis=1)
            s = nxt
            a = np.asarray(policy_fn(s), dtype=np.int64)
            discount *= gamma
        return returns


@dataclass
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0


class PendulumEnv:
    """Torque-limited pendulum swing-up with quadratic state/action costs.

    Semi-implicit Euler at dt = 0.05 s, 200-step episodes by default.
    Observations are (cos th, sin th, thdot); actions live in [-1, 1] and
    are scaled by max_torque internally. The physical state is recoverable
    from an observation, which makes reset-to-pair rollouts possible.
    """

    discrete = False
    obs_dim = 3
    action_dim = 1

    def __init__(self, horizon: int = 200, rng: np.random.Generator | None = None,
                 params: PendulumParams | None = None):
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.p = params if params is not None else PendulumParams()
        self._theta = 0.0
        self._thdot = 0.0
        self._t = 0
        self._done = True

    def _obs(self) -> np.ndarray:
        return np.array([np.cos(self._theta), np.sin(self._theta), self._thdot])

    def reset(self) -> np.ndarray:
        self._theta = float(self.rng.uniform(-np.pi, np.pi))
        self._thdot = float(self.rng.uniform(-1.0, 1.0))
        self._t = 0
        self._done = False
        return self._obs()

    def reset_to(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        self._theta = float(np.arctan2(obs[1], obs[0]))
        self._thdot = float(obs[2])
        self._t = 0
        self._done = False
        return self._obs()

    @staticmethod
    def _angle_norm(x):
        return ((x + np.pi) % (2.0 * np.pi)) - np.pi

    def _dynamics(self, theta, thdot, torque):
        p = self.p
        cost = self._angle_norm(theta) ** 2 + 0.1 * thdot**2 + 0.001 * torque**2
        accel = (3.0 * p.gravity / (2.0 * p.length)) * np.sin(theta) \
            + 3.0 * torque / (p.mass * p.length**2)
        new_thdot = np.clip(thdot + accel * p.dt, -p.max_speed, p.max_speed)
        new_theta = theta + new_thdot * p.dt
        return new_theta, new_thdot, -cost

    def step(self, action):
        if self._done:
            raise ProtocolError("step() after episode end; call reset()")
        u = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
        torque = u * self.p.max_torque
        self._theta, self._thdot, reward = self._dynamics(
            self._theta, self._thdot, torque
        )
        self._t += 1
        truncated = self._t >= self.horizon
        self._done = truncated
        return self._obs(), float(reward), False, truncated

    def batch_rollout(self, states, first_actions, policy_fn, horizon: int,
                      gamma: float, rng: np.random.Generator) -> np.ndarray:
        """Vectorized discounted returns from each observation/action start."""
        obs = np.asarray(states, dtype=np.float64)
        theta = np.arctan2(obs[:, 1], obs[:, 0])
        thdot = obs[:, 2].copy()
        act = np.asarray(first_actions, dtype=np.float64).reshape(len(obs), -1)[:, 0]
        returns = np.zeros(len(obs))
        discount = 1.0
        for t in range(horizon):
            torque = np.clip(act, -1.0, 1.0) * self.p.max_torque
            theta, thdot, reward = self._dynamics(theta, thdot, torque)
            returns += discount * reward
            discount *= gamma
            ob = np.stack([np.cos(theta), np.sin(theta), thdot], axis=1)
            act = np.asarray(policy_fn(ob), dtype=np.float64).reshape(len(obs), -1)[:, 0]
        return returns

    def energy(self) -> float:
        p = self.p
        kinetic = 0.5 * p.mass * (p.length * self._thdot) ** 2
        potential = p.mass * p.gravity * p.length * np.cos(self._theta)
        return float(kinetic + potential)
