"""Quantile fraction grids: fixed, randomly sampled, or proposed by a network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neuro as nn

SCHEMES = ("fix", "random", "net")
FRACTION_NET_LR = 1e-5


@dataclass(frozen=True)
class FractionSet:
    """Ascending fractions ``tau_0 = 0 < ... < tau_N = 1``.

    ``taus`` has shape ``(N + 1,)`` or ``(batch, N + 1)``; a batched set holds
    one independent grid per sample.
    """

    taus: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        object.__setattr__(self, "taus", taus)
        if taus.shape[-1] < 2:
            raise ValueError("a fraction set needs at least two endpoints")
        if np.any(taus[..., 0] != 0.0) or np.any(taus[..., -1] != 1.0):
            raise ValueError("fraction endpoints must be exactly 0 and 1")
        if np.any(np.diff(taus, axis=-1) <= 0.0):
            raise ValueError("fractions must be strictly ascending")

    @property
    def n(self) -> int:
        return self.taus.shape[-1] - 1

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.taus[..., 1:] + self.taus[..., :-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.taus, axis=-1)

    @property
    def batched(self) -> bool:
        return self.taus.ndim == 2


def _check_count(n: int) -> None:
    if int(n) != n or n < 1:
        raise ValueError(f"number of fractions must be a positive integer, got {n}")


def fix_fractions(n: int, batch: int | None = None) -> FractionSet:
    _check_count(n)
    taus = np.arange(n + 1) / n
    if batch is not None:
        taus = np.tile(taus, (batch, 1))
    return FractionSet(taus)


def fractions_from_draws(eps: np.ndarray) -> FractionSet:
    """Cumulative normalized sums of positive draws, with exact endpoints."""
    eps = np.asarray(eps, dtype=float)
    cums = np.cumsum(eps, axis=-1)
    interior = cums[..., :-1] / cums[..., -1:]
    zeros = np.zeros(eps.shape[:-1] + (1,))
    ones = np.ones(eps.shape[:-1] + (1,))
    return FractionSet(np.concatenate([zeros, interior, ones], axis=-1))


def random_fractions(n: int, rng: np.random.Generator, batch: int | None = None) -> FractionSet:
    """Uniform draws turned into an ascending grid by normalized cumulative sums."""
    _check_count(n)
    shape = (n,) if batch is None else (batch, n)
    eps = rng.random(shape)
    # a zero draw would collapse two fractions; redraw those rows
    bad = np.any(eps <= 0.0, axis=-1)
    while np.any(bad):
        eps[bad] = rng.random(eps[bad].shape)
        bad = np.any(eps <= 0.0, axis=-1)
    return fractions_from_draws(eps)


class FractionProposalNet(nn.Module):
    """Two hidden layers of 128 units and a softmax head over ``n`` cells."""

    def __init__(self, input_dim: int, n: int, rng: np.random.Generator, hidden: int = 128,
                 floor: float = 1e-4):
        _check_count(n)
        self.n = n
        self.l1 = nn.Dense(input_dim, hidden, rng)
        self.l2 = nn.Dense(hidden, hidden, rng)
        self.head = nn.Dense(hidden, n, rng)
        # mixing in a uniform floor keeps every cell strictly positive
        self.floor = floor

    def probabilities(self, s, a) -> nn.Tensor:
        x = nn.concat([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
        h1 = nn.relu(self.l1(x))
        h2 = nn.relu(self.l2(h1))
        logits = self.head(h2)
        for name, t in (("l1", h1), ("l2", h2), ("head", logits)):
            if not np.all(np.isfinite(t.data)):
                raise nn.NonFiniteError(f"fraction proposal net: non-finite activations after {name}")
        return nn.softmax(logits) * (1.0 - self.n * self.floor) + self.floor

    def interior_taus(self, s, a) -> nn.Tensor:
        """Differentiable ``tau_1 .. tau_{N-1}``, shape ``(batch, N - 1)``."""
        p = self.probabilities(s, a)
        return _drop_last(nn.cumsum(p))


def _drop_last(t: nn.Tensor) -> nn.Tensor:
    n = t.shape[-1]
    select = np.eye(n)[:, : n - 1]
    return t @ select


def net_fractions(net: FractionProposalNet, s, a) -> FractionSet:
    with np.errstate(all="ignore"):
        p = net.probabilities(s, a).data
    cums = np.cumsum(p, axis=-1)
    taus = np.concatenate([np.zeros((p.shape[0], 1)), cums[:, :-1], np.ones((p.shape[0], 1))], axis=1)
    return FractionSet(taus)


def fqf_fraction_grad(z_taus, z_hats, i: int | None = None):
    """Gradient of the 1-Wasserstein error w.r.t. the interior fractions.

    ``z_taus`` holds quantile values at ``tau_0..tau_N`` (endpoint entries are
    ignored) and ``z_hats`` at the midpoints ``hat_tau_0..hat_tau_{N-1}``.
    Returns ``2 Z(tau_i) - Z(hat_tau_i) - Z(hat_tau_{i-1})`` for ``i = 1..N-1``,
    or the single entry ``i`` when given.
    """
    z_taus = np.asarray(z_taus, dtype=float)
    z_hats = np.asarray(z_hats, dtype=float)
    n = z_hats.shape[-1]
    if z_taus.shape[-1] != n + 1:
        raise ValueError(f"expected {n + 1} values at fractions, got {z_taus.shape[-1]}")
    if i is None:
        return 2.0 * z_taus[..., 1:-1] - z_hats[..., 1:] - z_hats[..., :-1]
    if not 0 < i < n:
        raise ValueError(f"fraction index {i} is an endpoint; only 0 < i < {n} are free")
    return 2.0 * z_taus[..., i] - z_hats[..., i] - z_hats[..., i - 1]
