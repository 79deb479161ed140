from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from dsac import neuro as nn
from dsac.critic import (
    CriticPair,
    QuantileCritic,
    TDMatrix,
    critic_objective,
    fit_known_distribution,
    huber_quantile_loss,
    pairwise_td,
    quantile_value,
    soft_update,
    td_target,
)
from dsac.fractions import FractionSet, fix_fractions, random_fractions

from conftest import numerical_grad, rel_error


class LookupCritic:
    """Scripted critic: ``Z_tau(s, a) = table[s_index] + slope * tau``, ignoring the action."""

    def __init__(self, table, slope=0.0):
        self.table = np.asarray(table, dtype=float)
        self.slope = slope

    def __call__(self, s, a, taus):
        s = np.atleast_2d(s)
        taus = np.broadcast_to(np.asarray(taus, dtype=float), (s.shape[0], np.shape(taus)[-1]))
        idx = s[:, 0].astype(int)
        return nn.Tensor(self.table[idx][:, None] + self.slope * taus)


class FixedPolicy:
    def __init__(self, log_prob=0.0):
        self.lp = log_prob

    def sample(self, s, rng=None):
        b = np.atleast_2d(s).shape[0]
        return SimpleNamespace(action=np.zeros((b, 1)), log_prob=np.full(b, self.lp))


def batch_of(s, a, r, s2, done):
    return SimpleNamespace(s=np.atleast_2d(s), a=np.atleast_2d(a), r=np.asarray(r, float),
                           s2=np.atleast_2d(s2), done=np.asarray(done, float))


# quantile_value


def test_zero_embedding_makes_output_tau_independent(rng):
    critic = QuantileCritic(3, 2, rng, hidden=16, embedding=8)
    critic.embed.weight.data[:] = 0.0
    critic.embed.bias.data[:] = 0.0
    s, a = rng.normal(size=3), rng.normal(size=2)
    vals = [quantile_value(critic, s, a, t) for t in np.linspace(0, 1, 11)]
    assert np.ptp(vals) == 0.0


def test_golden_value():
    critic = QuantileCritic(3, 1, np.random.default_rng(11), hidden=16, embedding=8)
    assert quantile_value(critic, [0.1, -0.4, 0.7], [0.25], 0.3) == pytest.approx(0.020790624609014874, abs=1e-14)


def test_continuous_in_tau(rng):
    for _ in range(20):
        critic = QuantileCritic(2, 1, rng, hidden=32, embedding=64)
        s, a = rng.normal(size=2), rng.normal(size=1)
        for t in rng.random(10) * (1 - 1e-6):
            assert abs(quantile_value(critic, s, a, t) - quantile_value(critic, s, a, t + 1e-6)) < 1e-3


def test_quantile_value_rejects_bad_tau(rng):
    critic = QuantileCritic(1, 1, rng, hidden=4, embedding=4)
    with pytest.raises(ValueError):
        quantile_value(critic, [0.0], [0.0], 1.5)


def test_non_finite_activation_is_diagnosed(rng):
    critic = QuantileCritic(1, 1, rng, hidden=4, embedding=4)
    critic.trunk.weight.data[:] = np.inf
    with pytest.raises(nn.NonFiniteError, match="psi"):
        critic([[1.0]], [[1.0]], [0.5])


def test_critic_batched_shapes(rng):
    critic = QuantileCritic(3, 2, rng, hidden=8, embedding=4)
    fs = random_fractions(5, rng, batch=7)
    z = critic(rng.normal(size=(7, 3)), rng.normal(size=(7, 2)), fs.midpoints)
    assert z.shape == (7, 5)
    # a shared grid gives the same values as an explicitly tiled one
    shared = critic(np.ones((2, 3)), np.ones((2, 2)), np.array([0.1, 0.9]))
    tiled = critic(np.ones((2, 3)), np.ones((2, 2)), np.array([[0.1, 0.9], [0.1, 0.9]]))
    assert np.array_equal(shared.data, tiled.data)


# TD errors


def test_myopic_td_is_reward_minus_current(rng):
    critic = QuantileCritic(2, 1, rng, hidden=8, embedding=4)
    targets = [QuantileCritic(2, 1, rng, hidden=8, embedding=4) for _ in range(2)]
    b = batch_of(rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), [1.0, -2.0, 0.5], rng.normal(size=(3, 2)), [0, 0, 0])
    fs = random_fractions(4, rng)
    (tdm,), _ = pairwise_td(b, fs, [critic], targets, FixedPolicy(-1.3), alpha=0.0, gamma=0.0)
    z = critic(b.s, b.a, fs.midpoints).data
    expected = b.r[:, None, None] - z[:, None, :]
    assert np.array_equal(tdm.delta.data, np.broadcast_to(expected, (3, 4, 4)))


def test_identical_twins_match_single_critic(rng):
    c = QuantileCritic(2, 1, rng, hidden=8, embedding=4)
    twin = QuantileCritic(2, 1, rng, hidden=8, embedding=4)
    nn.copy_parameters(twin, c)
    b = batch_of(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), [0.3, 0.1], rng.normal(size=(2, 2)), [0, 1])
    fs = fix_fractions(3)
    pol = FixedPolicy(-0.5)
    y_twin = td_target(b, fs, [c, twin], pol, 0.2, 0.9)
    y_single = td_target(b, fs, [c, c], pol, 0.2, 0.9)
    z2 = c(b.s2, np.zeros((2, 1)), fs.midpoints).data
    hand = b.r[:, None] + 0.9 * (1 - b.done[:, None]) * (z2 + 0.2 * 0.5)
    assert np.array_equal(y_twin, y_single)
    np.testing.assert_allclose(y_single, hand, rtol=0, atol=1e-15)


def test_scripted_lookup_td_matrix():
    # states 0 and 1; online Z(s=0) = 2 + tau; targets Z(s'=1) = 4 + tau and 3 + 2 tau
    online = LookupCritic([2.0, 0.0], slope=1.0)
    targets = [LookupCritic([0.0, 4.0], slope=1.0), LookupCritic([0.0, 3.0], slope=2.0)]
    fs = fix_fractions(2)  # midpoints 0.25, 0.75
    b = batch_of([[0.0]], [[0.0]], [1.0], [[1.0]], [0])
    (tdm,), target = pairwise_td(b, fs, [online], targets, FixedPolicy(), alpha=0.0, gamma=0.5)
    # y_i = min(4 + t, 3 + 2t): t=0.25 -> 3.5, t=0.75 -> 4.5
    assert target.tolist() == [[1 + 0.5 * 3.5, 1 + 0.5 * 4.5]]
    # Z_j(s, a) = 2.25, 2.75
    hand = np.array([[2.75 - 2.25, 2.75 - 2.75], [3.25 - 2.25, 3.25 - 2.75]])
    assert np.array_equal(tdm.delta.data[0], hand)


def test_alpha_zero_reduces_to_plain_distributional_td():
    online = LookupCritic([1.0, -1.0], slope=3.0)
    targets = [LookupCritic([0.5, 2.0], slope=1.0)] * 2
    fs = FractionSet([0.0, 0.2, 0.7, 1.0])
    b = batch_of([[0.0], [1.0]], [[0.0], [0.0]], [0.4, -0.6], [[1.0], [0.0]], [0, 0])
    (tdm,), _ = pairwise_td(b, fs, [online], targets, FixedPolicy(-5.0), alpha=0.0, gamma=0.9)
    mids = fs.midpoints
    for k in range(2):
        s, s2 = int(b.s[k, 0]), int(b.s2[k, 0])
        for i in range(3):
            for j in range(3):
                plain = b.r[k] + 0.9 * (targets[0].table[s2] + mids[i]) - (online.table[s] + 3.0 * mids[j])
                assert tdm.delta.data[k, i, j] == plain


def test_terminal_target_is_reward():
    targets = [LookupCritic([10.0, 20.0])] * 2
    b = batch_of([[0.0]], [[0.0]], [0.7], [[1.0]], [1])
    y = td_target(b, fix_fractions(4), targets, FixedPolicy(-3.0), 0.2, 0.99)
    assert np.array_equal(y, np.full((1, 4), 0.7))


def test_td_target_validates():
    b = batch_of([[0.0]], [[0.0]], [0.0], [[0.0]], [0])
    with pytest.raises(ValueError):
        td_target(b, fix_fractions(2), [LookupCritic([0.0])], FixedPolicy(), -0.1, 0.9)
    with pytest.raises(ValueError):
        TDMatrix(nn.Tensor(np.zeros((1, 2, 2))), kappa=0.0)


# Huber quantile loss


def test_huber_examples():
    assert huber_quantile_loss(0.0, 0.3) == 0.0
    assert huber_quantile_loss(0.5, 0.5, 1.0) == 0.0625
    assert huber_quantile_loss(-2.0, 0.25, 1.0) == 1.125


def test_huber_branches_agree_at_kappa():
    for kappa in (0.1, 1.0, 3.0):
        for tau in (0.1, 0.5, 0.9):
            for edge in (kappa, -kappa):
                quad = abs(tau - (edge < 0)) * 0.5 * edge * edge / kappa
                lin = abs(tau - (edge < 0)) * kappa * (abs(edge) - 0.5 * kappa) / kappa
                assert abs(quad - lin) < 1e-12
                left = huber_quantile_loss(np.nextafter(edge, 0), tau, kappa)
                right = huber_quantile_loss(np.nextafter(edge, 2 * edge), tau, kappa)
                assert abs(left - right) < 1e-12


def test_huber_convex_in_delta(rng):
    for _ in range(200):
        tau, kappa = rng.random(), rng.uniform(0.1, 3)
        x, y = rng.normal(scale=3, size=2)
        lam = rng.random()
        mix = huber_quantile_loss(lam * x + (1 - lam) * y, tau, kappa)
        assert mix <= lam * huber_quantile_loss(x, tau, kappa) + (1 - lam) * huber_quantile_loss(y, tau, kappa) + 1e-12


def test_tensor_huber_matches_numpy(rng):
    delta = rng.normal(scale=2, size=(3, 4, 4))
    taus = rng.random(4)
    t = nn.quantile_huber(nn.Tensor(delta), taus, 0.7)
    np.testing.assert_allclose(t.data, huber_quantile_loss(delta, taus, 0.7), atol=1e-15)


# critic objective


def test_objective_zero_for_perfect_fit():
    fs = fix_fractions(3)
    assert critic_objective(TDMatrix(nn.Tensor(np.zeros((2, 3, 3)))), fs).item() == 0.0


def test_objective_single_fraction_is_plain_huber_at_median():
    deltas = np.array([0.3, -1.7, 2.5])
    loss = critic_objective(TDMatrix(nn.Tensor(deltas.reshape(3, 1, 1))), fix_fractions(1)).item()
    assert loss == pytest.approx(np.mean(huber_quantile_loss(deltas, 0.5, 1.0)), abs=1e-15)


def test_objective_hand_sum_two_fractions():
    delta = np.array([[0.5, -2.0], [1.0, 0.0]])
    # midpoints 0.25, 0.75; widths 0.5; normalized by N=2
    rho = np.array([
        [0.25 * 0.125, 0.25 * 1.5],
        [0.25 * 0.5, 0.0],
    ])
    hand = 0.5 * rho.sum() / 2
    loss = critic_objective(TDMatrix(nn.Tensor(delta[None])), fix_fractions(2)).item()
    assert loss == pytest.approx(hand, abs=1e-15)
    unnormalized = critic_objective(TDMatrix(nn.Tensor(delta[None])), fix_fractions(2), normalize=False).item()
    assert unnormalized == pytest.approx(2 * hand, abs=1e-15)


def test_objective_nonnegative(rng):
    for _ in range(50):
        fs = random_fractions(5, rng, batch=3)
        d = nn.Tensor(rng.normal(scale=3, size=(3, 5, 5)))
        assert critic_objective(TDMatrix(d), fs).item() >= 0.0


@pytest.mark.parametrize("seed", range(20))
def test_objective_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    critic = QuantileCritic(2, 1, rng, hidden=5, embedding=3)
    targets = [QuantileCritic(2, 1, rng, hidden=5, embedding=3) for _ in range(2)]
    b = batch_of(rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), rng.normal(size=3), rng.normal(size=(3, 2)), [0, 1, 0])
    fs = random_fractions(4, rng)
    nxt = SimpleNamespace(action=rng.normal(size=(3, 1)), log_prob=rng.normal(size=3))
    # kappa small enough that both Huber branches are exercised
    kappa = 0.3

    def loss():
        (tdm,), _ = pairwise_td(b, fs, [critic], targets, None, 0.2, 0.9, kappa=kappa, next_sample=nxt)
        return critic_objective(tdm, fs)

    critic.zero_grad()
    nn.backward(loss())
    for name, p in critic.named_parameters():
        num = numerical_grad(lambda: loss().item(), p.data, h=1e-6)
        assert rel_error(p.grad, num) < 1e-4, name
    for t in targets:
        assert all(p.grad is None for p in t.parameters())


# soft update


def test_soft_update_examples(rng):
    pair = CriticPair(1, 1, rng, hidden=4, embedding=2, rate=1.0)
    for p in pair.online[0].parameters():
        p.data += 1.0
    soft_update(pair)
    for t, o in zip(pair.target, pair.online):
        for pt, po in zip(t.parameters(), o.parameters()):
            assert np.array_equal(pt.data, po.data)

    pair = CriticPair(1, 1, rng, hidden=4, embedding=2, rate=0.005)
    for t, o in zip(pair.target, pair.online):
        for pt, po in zip(t.parameters(), o.parameters()):
            pt.data[...] = 0.0
            po.data[...] = 1.0
    soft_update(pair)
    for t in pair.target:
        for p in t.parameters():
            assert np.allclose(p.data, 0.005, atol=1e-15)


def test_soft_update_converges_geometrically(rng):
    pair = CriticPair(1, 1, rng, hidden=4, embedding=2, rate=0.05)
    for p in pair.target[0].parameters():
        p.data[...] = 0.0
    online = [p.data.copy() for p in pair.online[0].parameters()]
    for k in range(1, 101):
        soft_update(pair)
        if k in (10, 50, 100):
            for p, o in zip(pair.target[0].parameters(), online):
                np.testing.assert_allclose(p.data, o * (1 - 0.95**k), rtol=1e-12, atol=1e-15)


def test_critic_pair_targets_start_equal_and_frozen(rng):
    pair = CriticPair(2, 1, rng, hidden=4, embedding=2)
    for t, o in zip(pair.target, pair.online):
        for (n1, pt), (n2, po) in zip(t.named_parameters(), o.named_parameters()):
            assert n1 == n2 and np.array_equal(pt.data, po.data)
            assert not pt.requires_grad and po.requires_grad
    with pytest.raises(ValueError):
        CriticPair(1, 1, rng, rate=0.0)


# fitting a known law


def normal_score(q, tau, kappa):
    def clipped(lo, hi):
        return integrate.quad(lambda x: np.clip(x - q, -kappa, kappa) * stats.norm.pdf(x), lo, hi, limit=200)[0]
    return tau * clipped(q, np.inf) + (1 - tau) * clipped(-np.inf, q)


def test_fit_point_mass():
    est = fit_known_distribution(np.full(10_000, 1.7), n_fractions=8, steps=300, batch=256)
    assert np.max(np.abs(est.values - 1.7)) <= 0.01


def test_fit_normal_median():
    samples = np.random.default_rng(0).standard_normal(100_000)
    est = fit_known_distribution(samples, n_fractions=32, kappa=1.0, steps=1500, batch=1024)
    mid = est.fractions.midpoints
    # tau-hat = 0.5 sits between the two central cells; interpolate
    median = np.interp(0.5, mid, est.values)
    assert abs(median) < 0.05


@pytest.mark.slow
def test_fit_tracks_huber_minimizer_for_normal():
    samples = np.random.default_rng(1).standard_normal(100_000)
    est = fit_known_distribution(samples, n_fractions=8, kappa=1.0, steps=3000, batch=2048)
    roots = [optimize.brentq(lambda q: normal_score(q, t, 1.0), -5, 5) for t in est.fractions.midpoints]
    assert np.max(np.abs(est.values - np.array(roots))) < 0.03


def test_fit_small_kappa_recovers_uniform_quantiles():
    samples = np.random.default_rng(2).random(100_000)
    est = fit_known_distribution(samples, n_fractions=16, kappa=0.01, steps=3000, batch=1024)
    assert np.max(np.abs(est.values - est.fractions.midpoints)) < 0.02


def test_fit_rejects_small_sample_and_divergence():
    with pytest.raises(ValueError):
        fit_known_distribution(np.zeros(100))
    with pytest.raises(nn.NonFiniteError):
        fit_known_distribution(np.full(10_000, np.inf), steps=5)
