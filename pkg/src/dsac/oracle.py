"""Exact tabular propagation of soft return distributions.

Distributions are finite sets of weighted atoms.  The distributional soft
Bellman operator is applied as an exact pushforward over next state, reward
outcome and next action.  Two optional atom caps keep long iterations
tractable, and both preserve every expectation exactly:

``greedy``
    repeatedly merge the adjacent pair whose weighted-mean merge moves the
    distribution least in 1-Wasserstein distance.
``cells``
    replace the quantile function by its average over ``cap`` equal
    probability cells.  This map is non-expansive in ``W_1``, so the capped
    operator keeps the contraction modulus of the exact one; it is the cap
    used for the iterated evaluation checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .envs import TabularMDP
from .risk import RiskSpec, distortion_g

MASS_TOL = 1e-10
DEFAULT_ATOM_LIMIT = 200_000


class AtomLimitError(MemoryError):
    """Uncapped propagation would exceed the atom budget."""


@dataclass(frozen=True)
class EmpiricalDist:
    """Weighted atoms sorted by value; equal values are pooled."""

    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if values.shape != weights.shape or values.size == 0:
            raise ValueError("need matching, non-empty value and weight arrays")
        if not np.all(np.isfinite(values)):
            raise ValueError("atom values must be finite")
        if np.any(weights <= 0):
            raise ValueError("atom weights must be positive")
        total = weights.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")
        order = np.argsort(values, kind="stable")
        values, weights = values[order], weights[order]
        if values.size > 1 and np.any(values[1:] == values[:-1]):
            values, inverse = np.unique(values, return_inverse=True)
            weights = np.bincount(inverse, weights=weights)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point(cls, value: float) -> EmpiricalDist:
        return cls(np.array([value]), np.array([1.0]))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def mean(self) -> float:
        return float(self.weights @ self.values)

    def variance(self) -> float:
        dev = self.values - self.mean()
        return float(self.weights @ (dev * dev))

    def cdf_levels(self) -> np.ndarray:
        return np.cumsum(self.weights)

    def quantile(self, tau):
        """Left-continuous inverse CDF ``inf {x : F(x) >= tau}``."""
        idx = np.searchsorted(self.cdf_levels(), np.asarray(tau, dtype=float), side="left")
        return self.values[np.minimum(idx, self.size - 1)]

    def shifted(self, offset: float) -> EmpiricalDist:
        return EmpiricalDist(self.values + offset, self.weights)


def wasserstein(p: float, u: EmpiricalDist, v: EmpiricalDist) -> float:
    """Exact ``W_p`` from the inverse CDFs on the merged cumulative-weight grid."""
    if not (p >= 1 and np.isfinite(p)):
        raise ValueError(f"order p must be finite and at least 1, got {p}")
    for d in (u, v):
        if abs(d.mass - 1.0) > MASS_TOL:
            raise ValueError("wasserstein needs normalized distributions")
    grid = np.union1d(u.cdf_levels(), v.cdf_levels())
    grid = np.concatenate([[0.0], grid[grid < 1.0 - 1e-15], [1.0]])
    widths = np.diff(grid)
    mids = 0.5 * (grid[1:] + grid[:-1])
    gap = np.abs(u.quantile(mids) - v.quantile(mids))
    if p == 1:
        return float(widths @ gap)
    return float((widths @ gap**p) ** (1.0 / p))


def merge_to_cap(values: np.ndarray, weights: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Merge adjacent atoms (sorted input) until at most ``cap`` remain.

    Merging ``(x1, w1)`` and ``(x2, w2)`` into their weighted mean costs
    ``2 w1 w2 (x2 - x1) / (w1 + w2)`` in W1.  Each round merges a batch of
    non-overlapping pairs that are local minima of that cost, cheapest first.
    """
    if cap < 1:
        raise ValueError("atom cap must be at least 1")
    while values.size > cap:
        w1, w2 = weights[:-1], weights[1:]
        cost = 2.0 * w1 * w2 * (values[1:] - values[:-1]) / (w1 + w2)
        padded = np.concatenate([[np.inf], cost, [np.inf]])
        local = np.flatnonzero((cost <= padded[:-2]) & (cost < padded[2:]))
        need = values.size - cap
        pick = local[np.argsort(cost[local], kind="stable")[:need]]
        keep = np.ones(values.size, dtype=bool)
        keep[pick + 1] = False
        new_w = weights.copy()
        new_w[pick] = weights[pick] + weights[pick + 1]
        new_v = values.copy()
        new_v[pick] = (weights[pick] * values[pick] + weights[pick + 1] * values[pick + 1]) / new_w[pick]
        values, weights = new_v[keep], new_w[keep]
    return values, weights


def project_cells(values: np.ndarray, weights: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight atoms at the cell averages of the quantile function (sorted input)."""
    if n < 1:
        raise ValueError("atom cap must be at least 1")
    levels = np.minimum(np.concatenate([[0.0], np.cumsum(weights)]), 1.0)
    levels[-1] = 1.0
    area = np.concatenate([[0.0], np.cumsum(weights * values)])
    grid = np.arange(n + 1) / n
    return n * np.diff(np.interp(grid, levels, area)), np.full(n, 1.0 / n)


CAP_METHODS = {"greedy": merge_to_cap, "cells": project_cells}


@dataclass
class DistTable:
    """One EmpiricalDist per state-action pair."""

    dists: list[list[EmpiricalDist]]

    def __post_init__(self):
        widths = {len(row) for row in self.dists}
        if len(widths) != 1 or not self.dists:
            raise ValueError("distribution table must be complete over states x actions")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.dists), len(self.dists[0])

    def __getitem__(self, sa: tuple[int, int]) -> EmpiricalDist:
        return self.dists[sa[0]][sa[1]]

    def pairs(self):
        n_s, n_a = self.shape
        for s in range(n_s):
            for a in range(n_a):
                yield s, a

    def means(self) -> np.ndarray:
        return np.array([[d.mean() for d in row] for row in self.dists])

    def variances(self) -> np.ndarray:
        return np.array([[d.variance() for d in row] for row in self.dists])

    def atom_counts(self) -> np.ndarray:
        return np.array([[d.size for d in row] for row in self.dists])

    def shifted(self, offset: float) -> DistTable:
        return DistTable([[d.shifted(offset) for d in row] for row in self.dists])

    @classmethod
    def constant(cls, n_states: int, n_actions: int, value: float = 0.0) -> DistTable:
        return cls([[EmpiricalDist.point(value) for _ in range(n_actions)] for _ in range(n_states)])

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: int,
               max_atoms: int = 5, scale: float = 3.0) -> DistTable:
        rows = []
        for _ in range(n_states):
            row = []
            for _ in range(n_actions):
                k = int(rng.integers(1, max_atoms + 1))
                row.append(EmpiricalDist(rng.normal(scale=scale, size=k), rng.dirichlet(np.ones(k))))
            rows.append(row)
        return cls(rows)


def sup_metric(p: float, z1: DistTable, z2: DistTable) -> float:
    if z1.shape != z2.shape:
        raise ValueError(f"tables index different state-action sets: {z1.shape} vs {z2.shape}")
    return max(wasserstein(p, z1[sa], z2[sa]) for sa in z1.pairs())


def _check_policy(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} != {(mdp.n_states, mdp.n_actions)}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(1) - 1)) > 1e-12:
        raise ValueError("policy rows must be probability vectors")
    return pi


def _policy_log(pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)), 0.0)


def apply_dsb(mdp: TabularMDP, pi, alpha: float, z: DistTable, cap: int | None = None,
              atom_limit: int = DEFAULT_ATOM_LIMIT, cap_method: str = "greedy") -> DistTable:
    """``R + gamma * (Z(s', a') - alpha log pi(a'|s'))`` pushed forward exactly.

    Branch weights are ``P(s'|s,a) q(r|s,a,s') pi(a'|s')``.  With ``cap`` each
    output keeps at most that many atoms; otherwise exceeding ``atom_limit``
    raises :class:`AtomLimitError`.  The ``cells`` cap is applied to every
    output so that all entries pass through the same projection.
    """
    if cap_method not in CAP_METHODS:
        raise ValueError(f"unknown cap method {cap_method!r}; expected one of {sorted(CAP_METHODS)}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    pi = _check_policy(mdp, pi)
    if z.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"table shape {z.shape} does not match the MDP")
    log_pi = _policy_log(pi)
    gamma = mdp.gamma
    # soft next-state mixtures over a', already discounted
    nxt = []
    for s2 in range(mdp.n_states):
        acts = np.flatnonzero(pi[s2] > 0)
        vals = np.concatenate([z[s2, a].values - alpha * log_pi[s2, a] for a in acts])
        wts = np.concatenate([z[s2, a].weights * pi[s2, a] for a in acts])
        nxt.append((gamma * vals, wts))
    rows = []
    for s in range(mdp.n_states):
        row = []
        for a in range(mdp.n_actions):
            vals, wts = [], []
            for s2 in np.flatnonzero(mdp.transitions[s, a] > 0):
                nv, nw = nxt[s2]
                for k in np.flatnonzero(mdp.reward_probs[s, a, s2] > 0):
                    vals.append(mdp.reward_values[s, a, s2, k] + nv)
                    wts.append(mdp.transitions[s, a, s2] * mdp.reward_probs[s, a, s2, k] * nw)
            vals, wts = np.concatenate(vals), np.concatenate(wts)
            if cap is None and vals.size > atom_limit:
                raise AtomLimitError(
                    f"state {s}, action {a}: {vals.size} atoms exceed the limit {atom_limit}; pass an atom cap")
            dist = EmpiricalDist(vals, wts)
            if cap is not None and (dist.size > cap or cap_method == "cells"):
                dist = EmpiricalDist(*CAP_METHODS[cap_method](dist.values, dist.weights, cap))
            row.append(dist)
        rows.append(row)
    return DistTable(rows)


# ---------------------------------------------------------------- expectations


def soft_bellman(mdp: TabularMDP, pi, alpha: float, q: np.ndarray) -> np.ndarray:
    """Expected-value operator: ``r + gamma E[Q(s', a') - alpha log pi(a'|s')]``."""
    pi = _check_policy(mdp, pi)
    soft_v = np.sum(pi * (q - alpha * _policy_log(pi)), axis=1)
    return mdp.expected_reward() + mdp.gamma * mdp.transitions @ soft_v


def soft_q_linear(mdp: TabularMDP, pi, alpha: float) -> np.ndarray:
    """Solve ``(I - gamma P_pi) Q = r - gamma alpha sum P pi log pi`` directly."""
    pi = _check_policy(mdp, pi)
    n_s, n_a = mdp.n_states, mdp.n_actions
    # P_pi[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')
    p_pi = (mdp.transitions[:, :, :, None] * pi[None, None, :, :]).reshape(n_s * n_a, n_s * n_a)
    entropy_term = mdp.transitions @ np.sum(pi * _policy_log(pi), axis=1)
    rhs = (mdp.expected_reward() - mdp.gamma * alpha * entropy_term).ravel()
    q = np.linalg.solve(np.eye(n_s * n_a) - mdp.gamma * p_pi, rhs)
    return q.reshape(n_s, n_a)


def soft_value_iteration(mdp: TabularMDP, alpha: float, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Optimal soft Q with ``V(s) = alpha logsumexp(Q(s, .) / alpha)``."""
    if alpha <= 0:
        raise ValueError("soft value iteration needs alpha > 0")
    r = mdp.expected_reward()
    q = np.zeros_like(r)
    for _ in range(max_iter):
        v = alpha * logsumexp(q / alpha, axis=1)
        new = r + mdp.gamma * mdp.transitions @ v
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    return q


def kl_improvement(q: np.ndarray, alpha: float) -> np.ndarray:
    """Closed-form KL projection ``pi(a|s) ∝ exp(Q(s, a) / alpha)``."""
    if alpha <= 0:
        raise ValueError("the KL improvement step needs alpha > 0; use greedy improvement when alpha = 0")
    logits = q / alpha
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


# ---------------------------------------------------------------- lemma checks


@dataclass
class ContractionReport:
    max_ratio: float
    ratios: np.ndarray
    skipped: int


def check_contraction(mdp: TabularMDP, pi, alpha: float, trials: int, rng: np.random.Generator,
                      p: float = 1.0, pairs=None) -> ContractionReport:
    """Ratios ``d(TZ1, TZ2) / d(Z1, Z2)`` over random table pairs (0/0 pairs are skipped)."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if pairs is None:
        pairs = [(DistTable.random(rng, mdp.n_states, mdp.n_actions),
                  DistTable.random(rng, mdp.n_states, mdp.n_actions)) for _ in range(trials)]
    ratios, skipped = [], 0
    for z1, z2 in pairs:
        before = sup_metric(p, z1, z2)
        if before == 0.0:
            skipped += 1
            continue
        after = sup_metric(p, apply_dsb(mdp, pi, alpha, z1), apply_dsb(mdp, pi, alpha, z2))
        ratios.append(after / before)
    ratios = np.array(ratios)
    return ContractionReport(float(ratios.max()) if ratios.size else float("nan"), ratios, skipped)


@dataclass
class EvaluationResult:
    table: DistTable
    gaps: list[float] = field(default_factory=list)
    mean_gaps: list[float] = field(default_factory=list)

    def gap_ratios(self, first: int | None = None) -> np.ndarray:
        g = np.array(self.gaps[: first + 1] if first is not None else self.gaps)
        keep = g[:-1] > 0
        return g[1:][keep] / g[:-1][keep]


def evaluate_policy_dist(mdp: TabularMDP, pi, alpha: float, iterations: int, cap: int | None = None,
                         start: DistTable | None = None, mean_tol: float | None = None,
                         cap_method: str = "cells", track_gaps: bool = True) -> EvaluationResult:
    """Iterate the operator from a zero point-mass table.

    Records the ``d_1`` gap and the sup change of the means at each
    iteration; stops early once the mean change falls to ``mean_tol``.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    z = start or DistTable.constant(mdp.n_states, mdp.n_actions)
    result = EvaluationResult(z)
    means = z.means()
    for _ in range(iterations):
        nxt = apply_dsb(mdp, pi, alpha, z, cap=cap, cap_method=cap_method)
        if track_gaps:
            result.gaps.append(sup_metric(1, nxt, z))
        new_means = nxt.means()
        result.mean_gaps.append(float(np.max(np.abs(new_means - means))))
        z, means = nxt, new_means
        if mean_tol is not None and result.mean_gaps[-1] <= mean_tol:
            break
    result.table = z
    return result


@dataclass
class ImprovementReport:
    q_history: list[np.ndarray]
    policies: list[np.ndarray]
    min_slack: float
    final_error: float


def check_improvement(mdp: TabularMDP, alpha: float, steps: int, cap: int = 8,
                      eval_iterations: int = 100_000, mean_tol: float = 1e-14,
                      start_policy: np.ndarray | None = None) -> ImprovementReport:
    """Alternate distributional evaluation and the KL improvement step.

    Starts from the uniform policy unless ``start_policy`` is given.
    ``min_slack`` is the smallest entry of ``Q_new - Q_old`` across rounds and
    ``final_error`` the sup distance of the last soft Q to soft value iteration.
    """
    if alpha <= 0:
        raise ValueError("the KL improvement step needs alpha > 0; use greedy improvement when alpha = 0")
    if start_policy is None:
        pi = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    else:
        pi = _check_policy(mdp, start_policy)
    z = None
    q_hist, pols = [], [pi]
    for _ in range(steps + 1):
        res = evaluate_policy_dist(mdp, pi, alpha, eval_iterations, cap=cap, start=z,
                                   mean_tol=mean_tol, track_gaps=False)
        z = res.table
        q_hist.append(z.means())
        pi = kl_improvement(q_hist[-1], alpha)
        pols.append(pi)
    slack = min(float(np.min(b - a)) for a, b in zip(q_hist[:-1], q_hist[1:]))
    q_star = soft_value_iteration(mdp, alpha)
    return ImprovementReport(q_hist, pols, slack, float(np.max(np.abs(q_hist[-1] - q_star))))


def monte_carlo_soft_returns(mdp: TabularMDP, pi, alpha: float, s: int, a: int, n: int,
                             rng: np.random.Generator, horizon: int | None = None) -> np.ndarray:
    """Sampled ``sum_t gamma^t (R_t - alpha [t >= 1] log pi(a_t|s_t))`` from ``(s, a)``."""
    pi = _check_policy(mdp, pi)
    log_pi = _policy_log(pi)
    if horizon is None:
        horizon = int(np.ceil(np.log(1e-12) / np.log(max(mdp.gamma, 1e-12)))) + 1
    state = np.full(n, s)
    action = np.full(n, a)
    total = np.zeros(n)
    discount = 1.0
    cum_p = np.cumsum(mdp.transitions, axis=-1)
    cum_q = np.cumsum(mdp.reward_probs, axis=-1)
    cum_pi = np.cumsum(pi, axis=-1)
    for t in range(horizon):
        if t > 0:
            action = _draw(cum_pi[state], rng)
            total -= discount * alpha * log_pi[state, action]
        nxt = _draw(cum_p[state, action], rng)
        k = _draw(cum_q[state, action, nxt], rng)
        total += discount * mdp.reward_values[state, action, nxt, k]
        state = nxt
        discount *= mdp.gamma
    return total


def _draw(cum: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cum.shape[0]) * cum[:, -1]
    return np.minimum((u[:, None] >= cum).sum(axis=1), cum.shape[1] - 1)


# ---------------------------------------------------------------- risk on atoms


def dist_risk(dist: EmpiricalDist, spec: RiskSpec) -> float:
    """Exact risk readout of a finite distribution."""
    if spec.kind == "neutral":
        return dist.mean()
    if spec.kind == "mean_variance":
        return dist.mean() - spec.beta * np.sqrt(dist.variance())
    if spec.kind == "var":
        return float(dist.quantile(spec.beta))
    levels = np.clip(np.concatenate([[0.0], dist.cdf_levels()]), 0.0, 1.0)
    levels[-1] = 1.0
    weights = np.diff(distortion_g(spec.distortion, spec.beta, levels))
    return float(weights @ dist.values)


def risky_path_mdp(params, gamma: float, lane_grid) -> TabularMDP:
    """Two-state discretization (alive, fallen) with one action per lane mix.

    Surviving rewards use the two-point law ``mean +- std`` (equal weights),
    which keeps the first two moments; the fallen state is absorbing with
    zero reward.
    """
    grid = np.asarray(lane_grid, dtype=float)
    n_a = grid.size
    p = np.zeros((2, n_a, 2))
    values = np.zeros((2, n_a, 2, 2))
    probs = np.zeros_like(values)
    probs[..., 0] = 1.0
    for i, u in enumerate(grid):
        fall = params.fail_prob * u
        p[0, i] = [1 - fall, fall]
        mean, std = params.reward_moments(u)
        values[0, i, 0] = [mean - std, mean + std]
        probs[0, i, 0] = [0.5, 0.5]
        values[0, i, 1, 0] = params.fall_reward
    p[1, :, 1] = 1.0
    return TabularMDP(p, values, probs, gamma, name="risky_path_discrete")


def enumerate_lane_policies(params, gamma: float, risk: RiskSpec, lane_grid=None,
                            iterations: int = 400, cap: int = 256) -> tuple[float, np.ndarray]:
    """Best constant lane mix under ``risk`` by exhaustive enumeration.

    Returns the argmax lane mix and the risk value of every grid entry,
    computed on the return distribution from the alive state.
    """
    grid = np.linspace(0.0, 1.0, 11) if lane_grid is None else np.asarray(lane_grid, dtype=float)
    scores = np.empty(grid.size)
    for i, u in enumerate(grid):
        mdp = risky_path_mdp(params, gamma, [u])
        table = evaluate_policy_dist(mdp, np.ones((2, 1)), 0.0, iterations, cap=cap,
                                     mean_tol=1e-12, track_gaps=False).table
        scores[i] = dist_risk(table[0, 0], risk)
    return float(grid[int(np.argmax(scores))]), scores


# ---------------------------------------------------------------- report


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""


def verify_mdp(mdp: TabularMDP, alpha: float = 0.2, seed: int = 0, trials: int = 100,
               cap: int = 64) -> list[CheckResult]:
    """Run the contraction, evaluation, improvement and mass checks on one MDP."""
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    results = []
    contraction = check_contraction(mdp, pi, alpha, trials, rng)
    results.append(CheckResult("contraction_ratio", contraction.max_ratio <= mdp.gamma + 1e-9,
                               contraction.max_ratio, mdp.gamma + 1e-9, f"{contraction.ratios.size} pairs"))
    z = DistTable.random(rng, mdp.n_states, mdp.n_actions)
    tz = apply_dsb(mdp, pi, alpha, z)
    mass_err = max(abs(tz[sa].mass - 1.0) for sa in tz.pairs())
    results.append(CheckResult("mass_preserved", mass_err <= 1e-12, mass_err, 1e-12))
    commute = float(np.max(np.abs(tz.means() - soft_bellman(mdp, pi, alpha, z.means()))))
    results.append(CheckResult("expectation_commutes", commute <= 1e-10, commute, 1e-10))
    evaluation = evaluate_policy_dist(mdp, pi, alpha, 30, cap=cap)
    ratio = float(np.max(evaluation.gap_ratios()))
    results.append(CheckResult("evaluation_gap_ratio", ratio <= mdp.gamma + 0.02, ratio, mdp.gamma + 0.02))
    fixed = evaluate_policy_dist(mdp, pi, alpha, 100_000, cap=cap, start=evaluation.table,
                                 mean_tol=1e-14, track_gaps=False)
    q_err = float(np.max(np.abs(fixed.table.means() - soft_q_linear(mdp, pi, alpha))))
    results.append(CheckResult("fixed_point_matches_linear_solve", q_err <= 1e-6, q_err, 1e-6))
    if alpha > 0:
        improvement = check_improvement(mdp, alpha, 20)
        results.append(CheckResult("improvement_slack", improvement.min_slack >= -1e-8,
                                   improvement.min_slack, -1e-8))
        results.append(CheckResult("matches_soft_value_iteration", improvement.final_error <= 1e-6,
                                   improvement.final_error, 1e-6))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{status}  {r.name:<{width}}  measured={r.measured:.3e}  bound={r.bound:.3e}{extra}")
    return "\n".join(lines) + "\n"
