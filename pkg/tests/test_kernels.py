"""The compiled and pure-Python kernels must produce bit-identical paths."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpop import _backend
from ddpop.construct import LORENZ_BOX, affine_rescale, lorenz_model, lorenz_start
from ddpop.errors import SimulationError
from ddpop.model import Box, Polynomial, PopulationModel, TransitionChannel, make_logistic, make_sis
from ddpop.rates import RateFunction
from ddpop.simulate import simulate

pytestmark = pytest.mark.skipif(not _backend.compiled_available(), reason="compiled kernels not built")


def assert_same(a, b):
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.channel_ids, b.channel_ids)
    assert a.proposals == b.proposals and a.n_events == b.n_events


def both(model, n, x0, horizon, **kw):
    return (simulate(model, n, x0, horizon, backend="python", **kw),
            simulate(model, n, x0, horizon, backend="compiled", **kw))


rates = st.one_of(
    st.floats(0.2, 3).map(RateFunction.constant),
    st.tuples(st.floats(1.5, 3), st.floats(0, 1), st.floats(0.2, 4), st.floats(0, 6)).map(
        lambda p: RateFunction.sinusoid(*p)),
    st.tuples(st.floats(0.5, 2), st.floats(0, 1), st.floats(-1, 0.1)).map(lambda p: RateFunction.exponential(*p)),
    st.lists(st.floats(0.2, 3), min_size=2, max_size=5).map(
        lambda v: RateFunction.piecewise_linear([(2.0 * i, x) for i, x in enumerate(v)])),
)


@given(rates, rates, st.integers(0, 2 ** 32), st.sampled_from(["thinning", "next_reaction"]),
       st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_sis_backends_identical(lam, mu, seed, engine, every):
    m = make_sis(lam, mu, horizon=10.0)
    a, b = both(m, 60, (40, 20), 6.0, seed=seed, engine=engine, record_every=every)
    assert_same(a, b)


@given(st.integers(0, 1000), st.sampled_from(["thinning", "next_reaction"]))
@settings(max_examples=10, deadline=None)
def test_logistic_backends_identical(seed, engine):
    m = make_logistic(RateFunction.sinusoid(1.0, 0.5), 1.0)
    assert_same(*both(m, 50, (25,), 3.0, seed=seed, engine=engine))


def test_lorenz_backends_identical():
    m = lorenz_model(n=600)
    x0 = lorenz_start(affine_rescale(LORENZ_BOX, 1 / 3), 600)
    assert_same(*both(m, 600, x0, 1e9, seed=5, max_events=3000))


def test_clipped_next_reaction_identical():
    # clipped channels exercise the adaptive Simpson path
    x = Polynomial.variable(0, 1)
    rate = x.scale(-1.0) + Polynomial.constant(0.5, 1, RateFunction.sinusoid(1.0, 1.0))
    ch_up = TransitionChannel((1,), rate, clip=True)
    ch_down = TransitionChannel((-1,), x, clip=False)
    m = PopulationModel(1, Box((0.0,), (1.0,)), (ch_up, ch_down), check_boundary=False)
    for engine in ("thinning", "next_reaction"):
        assert_same(*both(m, 40, (10,), 5.0, seed=3, engine=engine))


def test_bound_overflow_names_channel():
    grow = RateFunction.exponential(0.0, 1e-308, 14.0)
    ch = TransitionChannel((1,), Polynomial.constant(1.0, 1, grow), label="runaway")
    m = PopulationModel(1, Box((0.0,), (np.inf,)), (ch,))
    for backend in ("python", "compiled"):
        with pytest.raises(SimulationError, match="runaway"):
            simulate(m, 1, (0,), 60.0, seed=0, backend=backend)
