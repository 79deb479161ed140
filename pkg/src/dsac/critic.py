"""Implicit quantile critic, twin-critic TD errors and the quantile Huber objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import neuro as nn
from .fractions import FractionSet, fix_fractions
from .risk import QuantileEstimate

DEFAULT_KAPPA = 1.0


class QuantileCritic(nn.Module):
    """``Z_tau(s, a) = head(psi(s, a) * phi(tau))``.

    ``psi`` is one ReLU layer over the concatenated state and action, ``phi``
    a sigmoid layer over the cosine features ``cos(i pi tau)``, ``i = 1..n``.
    The merged features pass through one hidden layer with layer norm before
    the scalar output.
    """

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden: int = 256, embedding: int = 64):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.embedding = embedding
        self.trunk = nn.Dense(state_dim + action_dim, hidden, rng)
        self.embed = nn.Dense(embedding, hidden, rng)
        self.merge = nn.Dense(hidden, hidden, rng)
        self.norm = nn.LayerNorm(hidden)
        self.out = nn.Dense(hidden, 1, rng)
        self._freqs = np.pi * np.arange(1, embedding + 1)

    def features(self, taus: np.ndarray) -> np.ndarray:
        return np.cos(taus[..., None] * self._freqs)

    def __call__(self, s, a, taus) -> nn.Tensor:
        s = np.atleast_2d(s)
        if not isinstance(a, nn.Tensor):
            a = np.atleast_2d(a)
        batch = s.shape[0]
        taus = np.asarray(taus, dtype=float)
        if taus.ndim == 1:
            taus = np.broadcast_to(taus, (batch, taus.shape[0]))
        if taus.shape[0] != batch:
            raise nn.ConfigurationError(f"critic: {taus.shape[0]} fraction rows for batch {batch}")
        m = taus.shape[1]
        psi = nn.relu(self.trunk(nn.concat([s, a], axis=1)))
        phi = nn.sigmoid(self.embed(self.features(taus).reshape(batch * m, self.embedding)))
        h = psi.reshape(batch, 1, self.hidden) * phi.reshape(batch, m, self.hidden)
        h = nn.relu(self.norm(self.merge(h.reshape(batch * m, self.hidden))))
        z = self.out(h).reshape(batch, m)
        if not np.all(np.isfinite(z.data)):
            bad = {
                "psi": bool(np.all(np.isfinite(psi.data))),
                "phi": bool(np.all(np.isfinite(phi.data))),
                "hidden": bool(np.all(np.isfinite(h.data))),
            }
            raise nn.NonFiniteError(f"critic produced non-finite quantiles; finite layers: {bad}")
        return z


def quantile_value(critic, s, a, tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return float(critic(np.atleast_2d(s), np.atleast_2d(a), np.array([[tau]])).data[0, 0])


class CriticPair:
    """Two online critics and their target copies."""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden: int = 256, embedding: int = 64, rate: float = 0.005):
        if not 0.0 < rate <= 1.0:
            raise ValueError(f"soft update rate must lie in (0, 1], got {rate}")
        self.rate = rate
        self.online = [QuantileCritic(state_dim, action_dim, rng, hidden, embedding) for _ in range(2)]
        self.target = [QuantileCritic(state_dim, action_dim, rng, hidden, embedding) for _ in range(2)]
        for tgt, src in zip(self.target, self.online):
            nn.copy_parameters(tgt, src)
            tgt.requires_grad_(False)


def soft_update(pair: CriticPair) -> None:
    for tgt, src in zip(pair.target, pair.online):
        nn.polyak_update(tgt, src, pair.rate)


@dataclass
class TDMatrix:
    """Pairwise TD errors ``delta[b, i, j]`` (target fraction ``i``, online fraction ``j``)."""

    delta: nn.Tensor
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"Huber threshold must be positive, got {self.kappa}")


def td_target(batch, fractions: FractionSet, target_critics: Sequence, target_policy,
              alpha: float, gamma: float, rng: np.random.Generator | None = None,
              next_sample=None) -> np.ndarray:
    """``r + gamma * (1 - done) * (min_k Z_i(s', a'; target_k) - alpha log pi(a'|s'))``.

    ``next_sample`` may carry a pre-drawn ``(action, log_prob)`` from the target
    policy; otherwise one is drawn with ``rng``.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if next_sample is None:
        next_sample = target_policy.sample(batch.s2, rng)
    next_a = _array(next_sample.action)
    next_logp = _array(next_sample.log_prob).reshape(-1, 1)
    mids = fractions.midpoints
    y = np.minimum(*(_array(c(batch.s2, next_a, mids)) for c in target_critics))
    r = np.asarray(batch.r, dtype=float).reshape(-1, 1)
    live = 1.0 - np.asarray(batch.done, dtype=float).reshape(-1, 1)
    return r + gamma * live * (y - alpha * next_logp)


def pairwise_td(batch, fractions: FractionSet, critics: Sequence, target_critics: Sequence,
                target_policy, alpha: float, gamma: float, rng: np.random.Generator | None = None,
                kappa: float = DEFAULT_KAPPA, next_sample=None) -> tuple[list[TDMatrix], np.ndarray]:
    """TD matrices for each online critic, plus the shared target values."""
    target = td_target(batch, fractions, target_critics, target_policy, alpha, gamma, rng, next_sample)
    mids = fractions.midpoints
    out = []
    for critic in critics:
        z = critic(batch.s, batch.a, mids)
        b, n = z.shape
        out.append(TDMatrix(nn.sub(target.reshape(b, n, 1), z.reshape(b, 1, n)), kappa))
    return out, target


def huber_quantile_loss(delta, tau, kappa: float = DEFAULT_KAPPA):
    """``|tau - 1{delta < 0}| * L_kappa(delta) / kappa`` on plain arrays."""
    if not kappa > 0:
        raise ValueError(f"Huber threshold must be positive, got {kappa}")
    delta = np.asarray(delta, dtype=float)
    absd = np.abs(delta)
    huber = np.where(absd <= kappa, 0.5 * delta * delta, kappa * (absd - 0.5 * kappa))
    return np.abs(tau - (delta < 0)) * huber / kappa


def critic_objective(tdm: TDMatrix, fractions: FractionSet, normalize: bool = True) -> nn.Tensor:
    """Batch mean of ``sum_ij (tau_{i+1} - tau_i) rho_{hat tau_j}(delta_ij)``.

    With ``normalize`` the double sum is divided by ``N``.
    """
    widths = fractions.widths[..., :, None]
    mids = fractions.midpoints[..., None, :]
    rho = nn.quantile_huber(tdm.delta, mids, tdm.kappa)
    per_sample = (rho * widths).sum(axis=(1, 2))
    if normalize:
        per_sample = per_sample * (1.0 / fractions.n)
    return per_sample.mean()


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, nn.Tensor) else np.asarray(x, dtype=float)


def fit_known_distribution(samples, n_fractions: int = 32, kappa: float = DEFAULT_KAPPA,
                           steps: int = 3000, batch: int = 2048, lr: float = 0.05,
                           rng: np.random.Generator | None = None) -> QuantileEstimate:
    """Fit a state-free quantile head (one free value per midpoint) by Huber QR.

    Minibatch Adam with a linearly decaying step size; the returned values
    are the Polyak average over the last fifth of training.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 10_000:
        raise ValueError(f"need at least 10^4 samples, got {samples.size}")
    rng = rng or np.random.default_rng(0)
    fractions = fix_fractions(n_fractions)
    mids = fractions.midpoints
    head = nn.Parameter(np.full(n_fractions, np.median(samples)))
    opt = nn.Adam([("head", head)], lr=lr)
    avg = np.zeros(n_fractions)
    avg_from = int(0.8 * steps)
    for step in range(steps):
        opt.lr = lr * (1.0 - step / steps) + 1e-4
        x = samples[rng.integers(0, samples.size, size=batch)]
        delta = nn.sub(x.reshape(-1, 1), head.reshape(1, n_fractions))
        loss = nn.quantile_huber(delta, mids, kappa).mean(axis=0).sum()
        if not np.isfinite(loss.data):
            raise nn.NonFiniteError(f"quantile fit diverged at step {step}")
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        if step >= avg_from:
            avg += head.data
    return QuantileEstimate(fractions, avg / (steps - avg_from))
