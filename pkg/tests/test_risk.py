import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsac import neuro as nn
from dsac.fractions import FractionSet, fix_fractions, random_fractions
from dsac.risk import (
    QuantileEstimate,
    RiskSpec,
    distorted_expectation,
    distortion_derivative,
    distortion_g,
    distortion_weights,
    expectation,
    risk_readout,
    risk_value,
    var_value,
    variance_estimate,
)


def q_equal(values):
    return QuantileEstimate(fix_fractions(len(values)), np.asarray(values, dtype=float))


def test_expectation_examples():
    assert expectation(q_equal([1, 2, 3, 4])) == 2.5
    assert expectation(q_equal([7.0] * 5)) == pytest.approx(7.0, abs=1e-14)


def test_expectation_matches_direct_sum(rng):
    for _ in range(100):
        n = rng.integers(1, 40)
        fs = random_fractions(n, rng)
        vals = rng.normal(size=n)
        direct = 0.0
        for i in range(n):
            direct += (fs.taus[i + 1] - fs.taus[i]) * vals[i]
        assert abs(expectation(QuantileEstimate(fs, vals)) - direct) < 1e-12


def test_distortion_examples():
    taus = np.linspace(0, 1, 11)
    np.testing.assert_allclose(distortion_g("wang", 0.0, taus), taus, atol=1e-15)
    assert distortion_g("cvar", 0.25, 0.1) == pytest.approx(0.4)
    np.testing.assert_allclose(distortion_g("cpw", 1.0, taus), taus, atol=1e-15)


@pytest.mark.parametrize("kind,beta", [("cvar", 0.0), ("cvar", 1.0), ("cpw", 0.0), ("cpw", -1.0)])
def test_distortion_rejects_bad_beta(kind, beta):
    with pytest.raises(ValueError):
        distortion_g(kind, beta, 0.5)
    with pytest.raises(ValueError):
        RiskSpec.parse(kind, beta)


def test_riskspec_validation():
    with pytest.raises(ValueError):
        RiskSpec("var", beta=1.5)
    with pytest.raises(ValueError):
        RiskSpec("bogus")
    spec = RiskSpec.parse("cvar", 0.25)
    assert spec.kind == "distortion" and spec.distortion == "cvar"
    assert spec.label == "cvar(0.25)"


BETA_RANGES = {"cpw": (0.3, 2.0), "wang": (-2.0, 2.0), "cvar": (0.01, 0.99)}


@pytest.mark.parametrize("kind", sorted(BETA_RANGES))
def test_distortions_are_monotone_with_fixed_endpoints(kind, rng):
    lo, hi = BETA_RANGES[kind]
    for beta in rng.uniform(lo, hi, size=1000):
        assert distortion_g(kind, beta, 0.0) == pytest.approx(0.0, abs=1e-9)
        assert distortion_g(kind, beta, 1.0) == pytest.approx(1.0, abs=1e-9)
    taus = np.sort(rng.uniform(size=1000))
    for beta in rng.uniform(lo, hi, size=50):
        g = distortion_g(kind, beta, taus)
        assert np.all(np.diff(g) >= -1e-12)


@pytest.mark.parametrize("kind,beta", [("cpw", 0.71), ("cpw", 1.6), ("wang", 0.75), ("wang", -0.75)])
def test_derivative_matches_finite_difference(kind, beta):
    taus = np.linspace(0.02, 0.98, 49)
    h = 1e-6
    fd = (distortion_g(kind, beta, taus + h) - distortion_g(kind, beta, taus - h)) / (2 * h)
    np.testing.assert_allclose(distortion_derivative(kind, beta, taus), fd, rtol=1e-6)


def test_identity_distortion_reduces_to_expectation(rng):
    fs = random_fractions(9, rng)
    q = QuantileEstimate(fs, np.sort(rng.normal(size=9)))
    assert distorted_expectation(q, RiskSpec.parse("wang", 0.0)) == pytest.approx(expectation(q), abs=1e-14)
    assert distorted_expectation(q, RiskSpec.parse("cpw", 1.0)) == pytest.approx(expectation(q), abs=1e-14)


def test_cvar_hand_example():
    q = q_equal([1, 2, 3, 4])
    spec = RiskSpec.parse("cvar", 0.5)
    assert distorted_expectation(q, spec) == pytest.approx(1.5)
    assert distorted_expectation(q, spec, method="midpoint") == pytest.approx(1.5)


def test_cell_and_midpoint_weights_converge():
    fs = fix_fractions(4000)
    for kind, beta in (("cpw", 0.71), ("wang", 0.75), ("cvar", 0.25)):
        cell = distortion_weights(fs, kind, beta, "cell")
        mid = distortion_weights(fs, kind, beta, "midpoint")
        assert cell.sum() == pytest.approx(1.0)
        assert np.abs(cell - mid).sum() < 5e-3


def quadrature(q: QuantileEstimate, kind, beta, points=10**6):
    w = (np.arange(points) + 0.5) / points
    idx = np.searchsorted(q.fractions.taus, w, side="right") - 1
    return float(np.mean(distortion_derivative(kind, beta, w) * q.values[idx]))


@pytest.mark.parametrize("kind,beta", [("cpw", 0.71), ("wang", 0.75), ("wang", -0.75), ("cvar", 0.1)])
def test_distorted_expectation_matches_quadrature(kind, beta, rng):
    for _ in range(5):
        n = int(rng.integers(2, 40))
        q = QuantileEstimate(random_fractions(n, rng), 3.0 + np.sort(rng.normal(size=n)))
        est = distorted_expectation(q, RiskSpec.parse(kind, beta))
        ref = quadrature(q, kind, beta)
        assert abs(est - ref) / abs(ref) < 1e-3


def test_var_value_examples():
    assert var_value(lambda t: 4.2, 0.3) == 4.2
    assert var_value(lambda t: t, 0.7) == 0.7
    assert var_value(lambda t: np.tan(np.pi * (t - 0.5)), 0.5) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        var_value(lambda t: t, 1.5)


def test_variance_examples():
    assert variance_estimate(q_equal([3.0, 3.0, 3.0])) == 0.0
    assert variance_estimate(q_equal([0.0, 2.0])) == pytest.approx(1.0)


def test_variance_matches_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(1, 30))
        fs = random_fractions(n, rng)
        vals = rng.normal(size=n) * 3
        q = QuantileEstimate(fs, vals)
        p = fs.widths
        m = sum(pi * vi for pi, vi in zip(p, vals))
        v = sum(pi * (vi - m) ** 2 for pi, vi in zip(p, vals))
        assert abs(variance_estimate(q) - v) < 1e-12


def test_risk_value_dispatch():
    q = q_equal([1, 2, 3, 4])
    assert risk_value(q, RiskSpec()) == 2.5
    q2 = q_equal([0.0, 2.0])
    assert risk_value(q2, RiskSpec("mean_variance", beta=1.0)) == pytest.approx(0.0)
    assert risk_value(q2, RiskSpec("mean_variance", beta=0.0)) == expectation(q2)
    assert risk_value(q, RiskSpec("var", beta=0.2), quantile_at=lambda t: -1.0) == -1.0
    with pytest.raises(ValueError):
        risk_value(q, RiskSpec("var", beta=0.2))


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 40),
    seed=st.integers(0, 2**32 - 1),
    beta=st.floats(0.01, 0.99),
)
def test_cvar_never_exceeds_mean(n, seed, beta):
    rng = np.random.default_rng(seed)
    q = QuantileEstimate(random_fractions(n, rng), np.sort(rng.normal(size=n) * 5))
    assert distorted_expectation(q, RiskSpec.parse("cvar", beta)) <= expectation(q) + 1e-12
    assert variance_estimate(q) >= 0.0


@pytest.mark.parametrize(
    "spec",
    [RiskSpec(), RiskSpec.parse("cvar", 0.3), RiskSpec.parse("cpw", 0.71), RiskSpec("mean_variance", beta=0.5)],
)
def test_tensor_readout_matches_numpy(spec, rng):
    fs = random_fractions(8, rng, batch=3)
    vals = np.sort(rng.normal(size=(3, 8)), axis=1)
    z = nn.Tensor(vals, requires_grad=True)
    got = risk_readout(z, fs, spec)
    want = risk_value(QuantileEstimate(fs, vals), spec)
    np.testing.assert_allclose(got.data, want, rtol=1e-10)
    nn.backward(got.sum())
    assert np.all(np.isfinite(z.grad))
