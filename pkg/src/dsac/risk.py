"""Risk readouts of a quantile-represented return distribution.

Supported measures: the neutral mean, value-at-risk (a quantile read straight
from the critic), mean minus ``beta`` standard deviations, and distorted
expectations under the CPW, Wang and CVaR distortions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from . import neuro as nn
from .fractions import FractionSet

KINDS = ("neutral", "var", "mean_variance", "distortion")
DISTORTIONS = ("cpw", "wang", "cvar")


@dataclass(frozen=True)
class RiskSpec:
    kind: str = "neutral"
    distortion: str | None = None
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown risk kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "distortion":
            _check_distortion(self.distortion, self.beta)
        elif self.distortion is not None:
            raise ValueError(f"risk kind {self.kind!r} takes no distortion")
        if self.kind == "var" and not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"VaR level beta must lie in [0, 1], got {self.beta}")
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")

    @classmethod
    def parse(cls, kind: str, beta: float = 0.0, distortion: str | None = None) -> RiskSpec:
        """Accept ``cpw``/``wang``/``cvar`` as shorthands for a distortion kind."""
        kind = kind.lower().replace("-", "_")
        if kind in DISTORTIONS:
            if distortion not in (None, kind):
                raise ValueError(f"risk kind {kind!r} conflicts with distortion {distortion!r}")
            return cls("distortion", kind, float(beta))
        return cls(kind, distortion, float(beta))

    @property
    def label(self) -> str:
        if self.kind == "neutral":
            return "neutral"
        name = self.distortion if self.kind == "distortion" else self.kind
        return f"{name}({self.beta:g})"

    @property
    def is_neutral(self) -> bool:
        return self.kind == "neutral"


def _check_distortion(kind: str | None, beta: float) -> None:
    if kind not in DISTORTIONS:
        raise ValueError(f"unknown distortion {kind!r}; expected one of {DISTORTIONS}")
    if kind == "cvar" and not 0.0 < beta < 1.0:
        raise ValueError(f"CVaR level beta must lie in (0, 1), got {beta}")
    if kind == "cpw" and not beta > 0.0:
        raise ValueError(f"CPW exponent beta must be positive, got {beta}")


@dataclass(frozen=True)
class QuantileEstimate:
    """Quantile values ``Z(hat_tau_i)`` attached to their fraction grid."""

    fractions: FractionSet
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != self.fractions.midpoints.shape:
            raise ValueError(f"values shape {values.shape} != midpoints {self.fractions.midpoints.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("quantile values must be finite")


def norm_cdf(x):
    return ndtr(x)


def norm_ppf(p):
    return ndtri(p)


def distortion_g(kind: str, beta: float, tau):
    """Distortion function ``g`` on ``[0, 1]`` with ``g(0) = 0`` and ``g(1) = 1``.

    CPW is only monotone for ``beta`` above roughly 0.28.
    """
    _check_distortion(kind, beta)
    tau = np.asarray(tau, dtype=float)
    if np.any((tau < 0.0) | (tau > 1.0)):
        raise ValueError("tau must lie in [0, 1]")
    if kind == "cvar":
        return np.minimum(tau / beta, 1.0)
    if kind == "wang":
        return norm_cdf(norm_ppf(tau) + beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        num = tau**beta
        den = (num + (1.0 - tau) ** beta) ** (1.0 / beta)
        return num / den


def distortion_derivative(kind: str, beta: float, tau):
    """Closed-form ``g'(tau)``; infinite where the distortion is singular."""
    _check_distortion(kind, beta)
    tau = np.asarray(tau, dtype=float)
    if kind == "cvar":
        return np.where(tau < beta, 1.0 / beta, 0.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if kind == "wang":
            x = norm_ppf(tau)
            return np.exp(-beta * x - 0.5 * beta * beta)
        a = tau**beta
        b = (1.0 - tau) ** beta
        d = a + b
        bracket = beta * d - tau * (tau ** (beta - 1.0) - (1.0 - tau) ** (beta - 1.0))
        return tau ** (beta - 1.0) * d ** (-1.0 / beta - 1.0) * bracket


def distortion_weights(fractions: FractionSet, kind: str, beta: float, method: str = "cell") -> np.ndarray:
    """Per-cell weights ``w_i`` with ``sum_i w_i Z(hat_tau_i)`` the distorted mean.

    ``cell`` uses ``g(tau_{i+1}) - g(tau_i)``, the width times the cell average
    of ``g'``; it integrates the piecewise-constant quantile function exactly and
    stays finite at the singular endpoints of CPW and Wang.  ``midpoint`` uses
    ``(tau_{i+1} - tau_i) * g'(hat_tau_i)``.
    """
    if method == "cell":
        return np.diff(distortion_g(kind, beta, fractions.taus), axis=-1)
    if method == "midpoint":
        return fractions.widths * distortion_derivative(kind, beta, fractions.midpoints)
    raise ValueError(f"unknown distortion weighting {method!r}")


def expectation(q: QuantileEstimate):
    return np.sum(q.fractions.widths * q.values, axis=-1)


def distorted_expectation(q: QuantileEstimate, spec: RiskSpec, method: str = "cell"):
    if spec.kind != "distortion":
        raise ValueError(f"distorted_expectation needs a distortion spec, got {spec.kind!r}")
    w = distortion_weights(q.fractions, spec.distortion, spec.beta, method)
    return np.sum(w * q.values, axis=-1)


def var_value(quantile_at: Callable[[float], float], beta: float):
    """Value-at-risk read from a quantile function that is defined for every tau."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"VaR level beta must lie in [0, 1], got {beta}")
    return quantile_at(beta)


def variance_estimate(q: QuantileEstimate):
    mean = expectation(q)
    dev = q.values - np.expand_dims(mean, -1)
    return np.sum(q.fractions.widths * dev * dev, axis=-1)


def risk_value(q: QuantileEstimate, spec: RiskSpec, quantile_at: Callable[[float], float] | None = None):
    if spec.kind == "neutral":
        return expectation(q)
    if spec.kind == "var":
        if quantile_at is None:
            raise ValueError("VaR needs a quantile accessor evaluated at tau = beta")
        return var_value(quantile_at, spec.beta)
    if spec.kind == "mean_variance":
        return expectation(q) - spec.beta * np.sqrt(variance_estimate(q))
    return distorted_expectation(q, spec)


def risk_readout(z: nn.Tensor, fractions: FractionSet, spec: RiskSpec,
                 quantile_at: Callable[[float], nn.Tensor] | None = None) -> nn.Tensor:
    """Differentiable counterpart of :func:`risk_value` on a ``(batch, N)`` tensor."""
    widths = fractions.widths
    if spec.kind == "neutral":
        return (z * widths).sum(axis=-1)
    if spec.kind == "distortion":
        return (z * distortion_weights(fractions, spec.distortion, spec.beta)).sum(axis=-1)
    if spec.kind == "var":
        if quantile_at is None:
            raise ValueError("VaR needs a quantile accessor evaluated at tau = beta")
        return quantile_at(spec.beta)
    mean = (z * widths).sum(axis=-1, keepdims=True)
    dev = z - mean
    variance = (dev * dev * widths).sum(axis=-1)
    # the small shift keeps the square-root gradient finite for point masses
    return mean.reshape(-1) - spec.beta * nn.sqrt(variance + 1e-12)
