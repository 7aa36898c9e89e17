import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpop.errors import DomainError, ModelError
from ddpop.model import (Box, Polynomial, PopulationModel, Simplex, TransitionChannel, drift, make_logistic,
                         make_sis, model_from_dict, total_rate)
from ddpop.rates import RateFunction


def test_sis_channels():
    m = make_sis(2.0, 0.8)
    assert m.d == 2 and m.conserved == (1, 1)
    assert [ch.jump for ch in m.channels] == [(-1, 1), (1, -1)]
    np.testing.assert_allclose(m.channel_rates(0.3, [0.6, 0.4]), [0.48, 0.32])


def test_sis_time_varying_rates():
    m = make_sis(RateFunction.sinusoid(2.0, 1.0), 1.0)
    np.testing.assert_allclose(m.channel_rates(math.pi / 2, [0.5, 0.5]), [0.75, 0.5])


def test_sis_rejects_zero_cure():
    with pytest.raises(ModelError):
        make_sis(2.0, 0.0)


def test_logistic_examples():
    m = make_logistic(1.0, 1.0)
    np.testing.assert_allclose(m.channel_rates(0.0, [0.5]), [0.25, 0.25])
    np.testing.assert_allclose(m.channel_rates(0.0, [0.0]), [0.0, 0.0])
    np.testing.assert_allclose(make_logistic(2.0, 1.0).channel_rates(0.0, [1.0]), [2.0, 1.0])


def test_drift_examples():
    np.testing.assert_allclose(drift(make_sis(2.0, 0.8), 1.0, [0.6, 0.4]), [-0.16, 0.16], atol=1e-15)
    np.testing.assert_allclose(drift(make_sis(2.0, 0.8), 1.0, [1.0, 0.0]), [0.0, 0.0])
    for x in (0.0, 0.3, 2.5):
        assert drift(make_logistic(1.3, 1.3), 0.0, [x])[0] == 0.0


def test_drift_outside_domain():
    with pytest.raises(DomainError):
        drift(make_sis(2.0, 0.8), 0.0, [0.9, 0.9])


def test_total_rate_examples():
    assert total_rate(make_sis(2.0, 0.8), 100, 5.0, [0.6, 0.4]) == pytest.approx(80.0)
    assert total_rate(make_sis(2.0, 0.8), 100, 5.0, [1.0, 0.0]) == 0.0
    assert total_rate(make_logistic(1.0, 1.0), 10, 0.0, [1.0]) == pytest.approx(20.0)


def test_negative_rate_rejected():
    ch = TransitionChannel((1,), Polynomial.monomial(-1.0, (1,)))
    with pytest.raises(ModelError, match="negative"):
        PopulationModel(1, Box((0.0,), (1.0,)), (ch,))


def test_boundary_exit_rejected():
    ch = TransitionChannel((1,), Polynomial.constant(1.0, 1))
    with pytest.raises(ModelError, match="leaves the domain"):
        PopulationModel(1, Box((0.0,), (1.0,)), (ch,))


def test_conservation_checked():
    ch = TransitionChannel((1, 0), Polynomial.monomial(1.0, (0, 1)))
    with pytest.raises(ModelError, match="conservation"):
        PopulationModel(2, Simplex(2, 1.0), (ch,), conserved=(1, 1))


def test_model_json_round_trip():
    spec = {"preset": "sis", "lambda": {"form": "sinusoid", "a": 2, "b": 1}, "mu": 1}
    m = model_from_dict(spec)
    m2 = model_from_dict(m.to_dict())
    for t, x in [(0.3, [0.2, 0.8]), (2.0, [0.5, 0.5])]:
        np.testing.assert_allclose(m.channel_rates(t, x), m2.channel_rates(t, x))


def test_polynomial_algebra():
    x, y = Polynomial.variable(0, 2), Polynomial.variable(1, 2)
    p = (x + y) * (x - y)
    pts = np.random.default_rng(0).random((20, 2))
    np.testing.assert_allclose(p(0.0, pts), pts[:, 0] ** 2 - pts[:, 1] ** 2, atol=1e-15)
    pos, neg = p.split_by_sign()
    np.testing.assert_allclose((pos - neg)(0.0, pts), p(0.0, pts), atol=1e-15)


states = st.tuples(st.floats(0, 1), st.floats(0, 1)).map(lambda v: (v[0] * (1 - v[1]), v[1]))
rates_pos = st.floats(0.05, 5)


@given(rates_pos, rates_pos, st.floats(0, 1), st.floats(0, 20))
@settings(max_examples=200, deadline=None)
def test_sis_invariants(lam, mu, y, t):
    m = make_sis(RateFunction.sinusoid(lam + 1.0, 0.5 * lam), mu)
    x = (1 - y, y)
    r = m.channel_rates(t, x)
    assert np.all(r >= 0)
    f = drift(m, t, x)
    assert abs(np.dot(m.conserved, f)) <= 1e-14 * (1 + np.abs(f).max())


@given(rates_pos, rates_pos, st.floats(0, 1), st.floats(0, 20), st.integers(0, 1))
@settings(max_examples=100, deadline=None)
def test_drift_linear_in_channels(lam, mu, y, t, drop):
    m = make_sis(lam, mu)
    x = (1 - y, y)
    rest = PopulationModel(2, m.domain, tuple(ch for i, ch in enumerate(m.channels) if i != drop),
                           m.conserved)
    ch = m.channels[drop]
    np.testing.assert_allclose(drift(m, t, x) - np.asarray(ch.jump) * float(ch.beta(t, np.array(x))),
                               drift(rest, t, x), atol=1e-14)
