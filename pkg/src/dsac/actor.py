"""Squashed-Gaussian policy and the soft policy objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neuro as nn
from .fractions import FractionSet
from .risk import RiskSpec, risk_readout

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


@dataclass
class ActionSample:
    action: nn.Tensor
    log_prob: nn.Tensor
    noise: np.ndarray


def _squash_correction(u):
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    if isinstance(u, nn.Tensor):
        return 2.0 * (_LOG2 - u - nn.softplus(u * -2.0))
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator, hidden: int = 256):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.l1 = nn.Dense(state_dim, hidden, rng)
        self.l2 = nn.Dense(hidden, hidden, rng)
        self.mean_head = nn.Dense(hidden, action_dim, rng)
        self.log_std_head = nn.Dense(hidden, action_dim, rng)

    def distribution(self, s) -> tuple[nn.Tensor, nn.Tensor]:
        """Pre-squash mean and clamped log standard deviation."""
        h = nn.relu(self.l2(nn.relu(self.l1(np.atleast_2d(s)))))
        return self.mean_head(h), nn.clip(self.log_std_head(h), LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, s, rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> ActionSample:
        """Reparameterized draw ``a = tanh(mu + sigma * eps)`` with its log-density."""
        mu, log_std = self.distribution(s)
        if noise is None:
            noise = rng.standard_normal(mu.shape)
        noise = np.broadcast_to(np.asarray(noise, dtype=float), mu.shape)
        u = mu + nn.exp(log_std) * noise
        gauss = -0.5 * noise**2 - _HALF_LOG_2PI - log_std
        log_prob = (gauss - _squash_correction(u)).sum(axis=1)
        return ActionSample(nn.tanh(u), log_prob, np.array(noise))

    def deterministic(self, s) -> np.ndarray:
        mu, _ = self.distribution(s)
        return np.tanh(mu.data)

    def log_prob(self, s, a) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("log_prob is only defined for actions strictly inside (-1, 1)")
        mu, log_std = self.distribution(s)
        u = np.arctanh(a)
        z = (u - mu.data) / np.exp(log_std.data)
        gauss = -0.5 * z**2 - _HALF_LOG_2PI - log_std.data
        return (gauss - _squash_correction(u)).sum(axis=1)


def min_critic_quantiles(critics: Sequence, s, a, taus) -> nn.Tensor:
    z = [c(s, a, taus) for c in critics]
    out = z[0]
    for other in z[1:]:
        out = nn.minimum(out, other)
    return out


def policy_objective(policy: GaussianPolicy, critics: Sequence, risk: RiskSpec, fractions: FractionSet,
                     states, alpha: float, rng: np.random.Generator | None = None,
                     noise: np.ndarray | None = None) -> tuple[nn.Tensor, ActionSample]:
    """Batch mean of ``alpha * log pi(a~|s) - Q_r(s, a~)`` with ``a~`` reparameterized.

    ``Q_r`` is the risk readout of the elementwise minimum of the critics'
    quantiles.  Critic parameters are frozen while the graph is built, so
    gradients reach only the policy.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    sample = policy.sample(states, rng, noise)
    flags = [[p.requires_grad for p in c.parameters()] for c in critics]
    for c in critics:
        c.requires_grad_(False)
    try:
        z = min_critic_quantiles(critics, states, sample.action, fractions.midpoints)

        def quantile_at(beta: float) -> nn.Tensor:
            taus = np.full((z.shape[0], 1), beta)
            return min_critic_quantiles(critics, states, sample.action, taus).reshape(-1)

        q = risk_readout(z, fractions, risk, quantile_at)
    finally:
        for c, fl in zip(critics, flags):
            for p, f in zip(c.parameters(), fl):
                p.requires_grad = f
    loss = (sample.log_prob * alpha - q).mean()
    return loss, sample
