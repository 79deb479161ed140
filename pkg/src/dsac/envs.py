"""Small self-contained control tasks and explicit tabular MDPs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .neuro import ConfigurationError


class ConfigurationWarning(UserWarning):
    pass


class EnvFault(RuntimeError):
    """Raised when an environment reaches an invalid internal state."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_steps: int
    reward: str
    failure: str = "none"

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigurationError(f"{self.name}: max episode length must be at least 1")
        low = np.broadcast_to(np.asarray(self.action_low, dtype=float), (self.action_dim,)).copy()
        high = np.broadcast_to(np.asarray(self.action_high, dtype=float), (self.action_dim,)).copy()
        if np.any(low >= high):
            raise ConfigurationError(f"{self.name}: empty action box")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    def scale_action(self, unit_action) -> np.ndarray:
        """Map a policy action in ``[-1, 1]^d`` onto the environment's action box."""
        u = np.asarray(unit_action, dtype=float)
        return self.action_low + 0.5 * (u + 1.0) * (self.action_high - self.action_low)


class Env:
    """Common episode bookkeeping: seeding, horizon and action clipping."""

    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.state = None

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self._reset()
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        """Advance one step; ``info`` flags clipping, failure and time-limit truncation."""
        if self.state is None:
            raise EnvFault(f"{self.spec.name}: step called before reset")
        action = np.asarray(action, dtype=float).reshape(self.spec.action_dim)
        if not np.all(np.isfinite(action)):
            raise EnvFault(f"{self.spec.name}: non-finite action {action}")
        clipped = np.clip(action, self.spec.action_low, self.spec.action_high)
        reward, failed = self._advance(clipped)
        self.t += 1
        truncated = not failed and self.t >= self.spec.max_steps
        obs = self.observe()
        if not (np.all(np.isfinite(obs)) and np.isfinite(reward)):
            raise EnvFault(f"{self.spec.name}: non-finite transition at t={self.t}")
        info = {"clipped": bool(np.any(clipped != action)), "failed": failed, "truncated": truncated}
        return obs, float(reward), bool(failed or truncated), info

    def _reset(self) -> None:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> tuple[float, bool]:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------- pendulum


def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class PendulumParams:
    max_torque: float = 2.0
    max_speed: float = 8.0
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    horizon: int = 200


def pendulum_cost(theta: float, theta_dot: float, torque: float) -> float:
    return float(wrap_angle(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * torque**2)


class Pendulum(Env):
    """Torque-limited swing-up of a frictionless point-mass pendulum.

    ``theta = 0`` is upright.  Observation ``(cos theta, sin theta, theta_dot)``,
    reward the negative quadratic cost above, no terminal states.
    """

    def __init__(self, params: PendulumParams | None = None, seed: int | None = None):
        super().__init__(seed)
        self.params = params or PendulumParams()
        p = self.params
        self.spec = EnvSpec("pendulum", 3, 1, -p.max_torque, p.max_torque, p.horizon,
                            "-(theta^2 + 0.1 theta_dot^2 + 0.001 u^2)")

    def _reset(self) -> None:
        self.state = np.array([self.rng.uniform(-np.pi, np.pi), self.rng.uniform(-1.0, 1.0)])

    def set_state(self, theta: float, theta_dot: float) -> None:
        self.state = np.array([theta, theta_dot], dtype=float)

    def _advance(self, action):
        p = self.params
        theta, theta_dot = self.state
        u = float(action[0])
        cost = pendulum_cost(theta, theta_dot, u)
        accel = 3.0 * p.gravity / (2.0 * p.length) * np.sin(theta) + 3.0 / (p.mass * p.length**2) * u
        theta_dot = np.clip(theta_dot + accel * p.dt, -p.max_speed, p.max_speed)
        self.state = np.array([theta + theta_dot * p.dt, theta_dot])
        return -cost, False

    def observe(self):
        theta, theta_dot = self.state
        return np.array([np.cos(theta), np.sin(theta), theta_dot])


def swing_up_controller(params: PendulumParams | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Hand-coded baseline: energy pumping far from upright, PD capture near it."""
    p = params or PendulumParams()
    stiffness = 3.0 * p.gravity / (2.0 * p.length)

    def act(obs):
        cos_t, sin_t, theta_dot = obs
        if cos_t > 0.8:
            u = -(10.0 * np.arctan2(sin_t, cos_t) + 2.0 * theta_dot)
        elif abs(theta_dot) < 1e-6:
            u = p.max_torque
        else:
            # energy is zero at rest upright; torque along theta_dot raises it
            energy = 0.5 * theta_dot**2 + stiffness * (cos_t - 1.0)
            u = -energy * np.sign(theta_dot)
        return np.array([np.clip(u, -p.max_torque, p.max_torque)])

    return act


# ---------------------------------------------------------------- risky path


@dataclass(frozen=True)
class RiskyPathParams:
    """Each step the action picks a mix ``u`` between a safe and a risky lane.

    The risky lane pays more on average, but with probability
    ``fail_prob * u`` the agent falls, receives ``fall_reward`` and the
    episode ends.
    """

    safe_mean: float = 0.5
    safe_std: float = 0.1
    risky_mean: float = 3.0
    risky_std: float = 0.5
    fail_prob: float = 0.08
    fall_reward: float = -8.0
    horizon: int = 20

    def __post_init__(self):
        if not 0.0 <= self.fail_prob <= 1.0:
            raise ConfigurationError(f"fail_prob must lie in [0, 1], got {self.fail_prob}")
        if self.safe_std < 0 or self.risky_std < 0:
            raise ConfigurationError("reward standard deviations must be non-negative")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if self.risky_mean <= self.safe_mean:
            warnings.warn("risky lane mean does not exceed the safe lane mean; the task has no trade-off",
                          ConfigurationWarning, stacklevel=3)

    def lane_mix(self, action) -> float:
        return float(np.clip(0.5 + 0.6 * np.asarray(action).reshape(-1)[0], 0.0, 1.0))

    def reward_moments(self, u: float) -> tuple[float, float]:
        mean = (1 - u) * self.safe_mean + u * self.risky_mean
        std = (1 - u) * self.safe_std + u * self.risky_std
        return mean, std


class RiskyPath(Env):
    """One-dimensional lane-choice task.

    The observation is 1.0 while the agent is on the path and 0.0 once it has
    fallen. It carries no clock, so every policy is a single stationary lane mix.
    """

    def __init__(self, params: RiskyPathParams | None = None, seed: int | None = None):
        super().__init__(seed)
        self.params = params or RiskyPathParams()
        self.spec = EnvSpec("risky_path", 1, 1, -1.0, 1.0, self.params.horizon,
                            "normal lane reward, fall penalty on failure", "fell off the risky lane")

    def _reset(self) -> None:
        self.state = np.array([1.0])

    def _advance(self, action):
        p = self.params
        u = p.lane_mix(action)
        if self.rng.random() < p.fail_prob * u:
            self.state = np.array([0.0])
            return p.fall_reward, True
        mean, std = p.reward_moments(u)
        return mean + std * self.rng.standard_normal(), False

    def observe(self):
        return self.state.copy()


# ---------------------------------------------------------------- tabular MDPs


@dataclass
class TabularMDP:
    """Finite MDP with rewards conditioned on ``(s, a, s')``.

    ``transitions[s, a, s']`` are probabilities; ``reward_values[s, a, s', k]``
    with weights ``reward_probs[s, a, s', k]`` give a finite reward law.
    """

    transitions: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    gamma: float
    name: str = "tabular"
    terminal: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.reward_values = np.asarray(self.reward_values, dtype=float)
        self.reward_probs = np.asarray(self.reward_probs, dtype=float)
        if self.reward_values.ndim == 3:
            self.reward_values = self.reward_values[..., None]
            self.reward_probs = np.ones_like(self.reward_values)
        s, a, s2 = self.transitions.shape
        if s != s2:
            raise ConfigurationError(f"transition tensor must be (S, A, S), got {self.transitions.shape}")
        if self.reward_values.shape[:3] != (s, a, s) or self.reward_values.shape != self.reward_probs.shape:
            raise ConfigurationError("reward tables must have shape (S, A, S, K)")
        if np.any(self.transitions < 0) or np.max(np.abs(self.transitions.sum(-1) - 1)) > 1e-12:
            raise ConfigurationError("transition rows must be non-negative and sum to 1")
        if np.any(self.reward_probs < 0) or np.max(np.abs(self.reward_probs.sum(-1) - 1)) > 1e-12:
            raise ConfigurationError("reward outcome weights must be non-negative and sum to 1")
        if not np.all(np.isfinite(self.reward_values)):
            raise ConfigurationError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def expected_reward(self) -> np.ndarray:
        """``r(s, a) = E[R | s, a]`` over next states and reward outcomes."""
        per_next = np.sum(self.reward_values * self.reward_probs, axis=-1)
        return np.sum(self.transitions * per_next, axis=-1)

    def deterministic(self) -> bool:
        return bool(np.all((self.transitions == 0) | (self.transitions == 1))
                    and np.all(np.sum(self.reward_probs > 0, axis=-1) == 1))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
               reward_outcomes: int = 2, sparsity: float = 0.0) -> TabularMDP:
    """Dirichlet transitions and a small discrete reward law per ``(s, a, s')``."""
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(p.shape) < sparsity
        mask[..., 0] = False
        p = np.where(mask, 0.0, p)
        p /= p.sum(-1, keepdims=True)
    shape = (n_states, n_actions, n_states, reward_outcomes)
    values = rng.normal(size=shape)
    probs = rng.dirichlet(np.ones(reward_outcomes), size=shape[:3])
    return TabularMDP(p, values, probs, gamma, name="random")


def chain_mdp(n_states: int = 5, gamma: float = 0.9, slip: float = 0.1, goal_reward: float = 1.0) -> TabularMDP:
    """Left/right chain; ``right`` at the last state pays ``goal_reward`` (noisy)."""
    if n_states < 2:
        raise ConfigurationError("a chain needs at least two states")
    p = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        p[s, 0, left] += 1 - slip
        p[s, 0, right] += slip
        p[s, 1, right] += 1 - slip
        p[s, 1, left] += slip
    values = np.zeros((n_states, 2, n_states, 2))
    probs = np.zeros_like(values)
    probs[..., 0] = 1.0
    last = n_states - 1
    values[last, 1, last] = [goal_reward - 0.5, goal_reward + 0.5]
    probs[last, 1, last] = [0.5, 0.5]
    return TabularMDP(p, values, probs, gamma, name="chain")


class TabularEnv(Env):
    """Continuous-action adapter over a TabularMDP.

    The observation is a one-hot state; the first action coordinate in
    ``[-1, 1]`` is split into equal bins, one per discrete action.
    """

    def __init__(self, mdp: TabularMDP, horizon: int = 100, start_state: int = 0, seed: int | None = None):
        super().__init__(seed)
        self.mdp = mdp
        self.start_state = start_state
        self.spec = EnvSpec(mdp.name, mdp.n_states, 1, -1.0, 1.0, horizon, "tabular reward law")

    def action_index(self, action) -> int:
        x = float(np.asarray(action).reshape(-1)[0])
        return int(min(np.floor((x + 1.0) / 2.0 * self.mdp.n_actions), self.mdp.n_actions - 1))

    def _reset(self) -> None:
        self.state = self.start_state

    def _advance(self, action):
        a = self.action_index(action)
        s2 = self.rng.choice(self.mdp.n_states, p=self.mdp.transitions[self.state, a])
        k = self.rng.choice(self.mdp.reward_probs.shape[-1], p=self.mdp.reward_probs[self.state, a, s2])
        reward = self.mdp.reward_values[self.state, a, s2, k]
        self.state = int(s2)
        return reward, False

    def observe(self):
        return np.eye(self.mdp.n_states)[self.state]


# ---------------------------------------------------------------- registry


def _make_chain(seed=None, **params):
    horizon = params.pop("horizon", 100)
    return TabularEnv(chain_mdp(**params), horizon=horizon, seed=seed)


REGISTRY: dict[str, Callable[..., Env]] = {
    "pendulum": lambda seed=None, **kw: Pendulum(PendulumParams(**kw), seed=seed),
    "risky_path": lambda seed=None, **kw: RiskyPath(RiskyPathParams(**kw), seed=seed),
    "chain": _make_chain,
}


def make_env(name: str, seed: int | None = None, **params) -> Env:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown environment {name!r}; registered: {sorted(REGISTRY)}") from None
    try:
        return factory(seed=seed, **params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for environment {name!r}: {exc}") from None
