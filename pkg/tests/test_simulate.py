import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import poisson_model
from ddpop.meanfield import integrate
from ddpop.model import drift, drift_field, make_logistic, make_sis
from ddpop.rates import RateFunction
from ddpop.simulate import (JumpPath, make_generator, simulate, simulate_ensemble,
                            simulate_next_reaction, simulate_thinning, sup_deviation)

ENGINES = ["thinning", "next_reaction"]


@pytest.mark.parametrize("engine", ENGINES)
def test_absorbing_state_has_no_events(engine):
    p = simulate(make_sis(2.0, 0.8), 1, (1, 0), 10.0, engine=engine)
    assert p.n_events == 0
    np.testing.assert_array_equal(p.final_state, [1, 0])
    np.testing.assert_array_equal(p.state_at([0.0, 5.0, 10.0]), [[1, 0]] * 3)


@pytest.mark.parametrize("engine", ENGINES)
def test_zero_rate_state_constant(engine):
    p = simulate(make_logistic(1.0, 1.0), 10, (0,), 5.0, engine=engine)
    assert p.n_events == 0 and len(p.times) == 1


@pytest.mark.parametrize("engine", ENGINES)
def test_sis_mean_matches_ode(engine, sis_const):
    n, paths = 1000, 200
    ens = simulate_ensemble(sis_const, n, (900, 100), 10.0, paths, grid=[10.0], seed=11, engine=engine)
    ode = integrate(drift_field(sis_const), [0.9, 0.1], (0.0, 10.0), rtol=1e-10, atol=1e-12)
    y_mc = ens.terminal_states[:, 1] / n
    se = y_mc.std(ddof=1) / math.sqrt(paths)
    assert abs(y_mc.mean() - ode(10.0)[1]) <= 3 * se


@pytest.mark.parametrize("engine", ENGINES)
def test_logistic_zero_drift(engine):
    n, paths = 500, 200
    ens = simulate_ensemble(make_logistic(1.0, 1.0), n, (250,), 2.0, paths, grid=[2.0], seed=4, engine=engine)
    z = ens.terminal_states[:, 0] / n
    assert abs(z.mean() - 0.5) <= 3 * z.std(ddof=1) / math.sqrt(paths)


@pytest.mark.parametrize("engine", ENGINES)
def test_poisson_count_mean(engine):
    # count on [0, 2 pi] is Poisson with mean 4 pi
    m = poisson_model(RateFunction.sinusoid(2.0, 1.0))
    counts = np.array([simulate(m, 1, (0,), 2 * math.pi, seed=8, engine=engine, path_index=i).n_events
                       for i in range(2000)])
    assert abs(counts.mean() - 4 * math.pi) <= 3 * math.sqrt(4 * math.pi / len(counts))
    # Poisson dispersion test: (N - 1) s^2 / mean ~ chi2(N - 1)
    disp = (len(counts) - 1) * counts.var(ddof=1) / counts.mean()
    p = stats.chi2(len(counts) - 1).sf(disp)
    assert 1e-3 < p < 1 - 1e-3


def test_engines_agree_constant_rates(sis_const):
    a = simulate_ensemble(sis_const, 50, (40, 10), 2.0, 500, grid=[2.0], seed=1, engine="thinning")
    b = simulate_ensemble(sis_const, 50, (40, 10), 2.0, 500, grid=[2.0], seed=2, engine="next_reaction")
    assert stats.ks_2samp(a.event_counts, b.event_counts).pvalue > 0.01


@given(st.integers(0, 2 ** 40), st.floats(1.1, 3), st.floats(0.2, 2), st.integers(5, 80),
       st.sampled_from(ENGINES))
@settings(max_examples=40, deadline=None)
def test_path_validity(seed, lam, mu, n, engine):
    m = make_sis(RateFunction.sinusoid(lam, 1.0), mu)
    y0 = max(1, n // 3)
    p = simulate(m, n, (n - y0, y0), 3.0, seed=seed, engine=engine)
    p.validate(m)
    assert p.times[0] == 0.0 and np.all(np.diff(p.times) > 0)
    jumps = np.array([ch.jump for ch in m.channels])
    np.testing.assert_array_equal(np.diff(p.states, axis=0), jumps[p.channel_ids[1:]])
    assert np.all(p.states.sum(axis=1) == n)


@given(st.integers(0, 2 ** 40), st.sampled_from(ENGINES))
@settings(max_examples=15, deadline=None)
def test_determinism(seed, engine):
    m = make_sis(RateFunction.sinusoid(2.0, 1.0), 1.0)
    a = simulate(m, 40, (28, 12), 4.0, seed=seed, engine=engine)
    b = simulate(m, 40, (28, 12), 4.0, seed=seed, engine=engine)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)


def test_streams_differ_by_path_index():
    a = make_generator(3, 0).random(4)
    b = make_generator(3, 1).random(4)
    assert not np.array_equal(a, b)


def test_ensemble_determinism_and_threads(sis_sin):
    ref = integrate(drift_field(sis_sin), [0.7, 0.3], (0.0, 4.0))
    kw = dict(grid=np.linspace(0, 4, 21), reference=ref, seed=9)
    a = simulate_ensemble(sis_sin, 100, (70, 30), 4.0, 12, threads=1, **kw)
    b = simulate_ensemble(sis_sin, 100, (70, 30), 4.0, 12, threads=1, **kw)
    c = simulate_ensemble(sis_sin, 100, (70, 30), 4.0, 12, threads=3, **kw)
    for other in (b, c):
        np.testing.assert_array_equal(a.mean, other.mean)
        np.testing.assert_array_equal(a.var, other.var)
        np.testing.assert_array_equal(a.sup_deviation, other.sup_deviation)
    assert np.all(a.var >= 0)
    np.testing.assert_array_equal(a.time_grid, kw["grid"])


def test_sup_deviation_of_path_against_itself(sis_sin):
    p = simulate(sis_sin, 100, (70, 30), 3.0, seed=2)
    assert sup_deviation(p, lambda t: p.state_at(t) / p.n) == 0.0
    ens = simulate_ensemble(sis_sin, 100, (70, 30), 3.0, 1, seed=2,
                            reference=lambda t: p.state_at(t) / p.n)
    assert ens.sup_deviation[0] == 0.0


def test_left_limits_catch_pre_jump_states(sis_sin):
    p = simulate(sis_sin, 100, (70, 30), 3.0, seed=2)
    dev = sup_deviation(p, lambda t: p.state_at(t) / p.n, left_limits=True)
    assert dev == pytest.approx(math.sqrt(2) / 100)


def test_sup_deviation_sees_event_times():
    # a single jump from 0 to 1 against a zero reference: deviation is 1/n
    m = make_logistic(1.0, 1.0)
    p = simulate(m, 4, (2,), 0.5, seed=0)
    dev = sup_deviation(p, lambda t: np.full((np.size(t), 1), 0.5) if np.ndim(t) else np.array([0.5]),
                        grid=[0.0])
    expected = np.abs(p.states[:, 0] / 4 - 0.5).max()
    assert dev == pytest.approx(expected)


def test_mean_drift_consistency(sis_const):
    n, dt, paths = 100, 0.01, 4000
    x = np.array([0.6, 0.4])
    ens = simulate_ensemble(sis_const, n, (60, 40), dt, paths, grid=[dt], seed=21)
    disp = (ens.terminal_states / n - x) / dt
    f = drift(sis_const, 0.0, x)
    se = disp.std(axis=0, ddof=1) / math.sqrt(paths)
    assert np.all(np.abs(disp.mean(axis=0) - f) <= 3 * se + 0.02)


def test_csv_round_trip(tmp_path, sis_sin):
    p = simulate_thinning(sis_sin, 50, (35, 15), 2.0, seed=3)
    p.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,k_1,k_2,channel" and lines[1].endswith(",-1")
    q = JumpPath.from_csv(tmp_path / "p.csv", 50, 2.0)
    np.testing.assert_array_equal(p.times, q.times)
    np.testing.assert_array_equal(p.states, q.states)


def test_ensemble_outputs(tmp_path, sis_sin):
    ref = integrate(drift_field(sis_sin), [0.7, 0.3], (0.0, 2.0))
    ens = simulate_ensemble(sis_sin, 50, (35, 15), 2.0, 5, reference=ref, seed=1)
    ens.write(tmp_path / "e.csv", tmp_path / "e.json")
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "t,mean_1,mean_2,var_1,var_2"
    side = ens.sidecar()
    assert set(side) >= {"n", "paths", "seed", "sup_deviation_quantiles"}
    assert len(side["sup_deviation_quantiles"]) == 3


def test_record_every_keeps_endpoints(sis_sin):
    full = simulate_next_reaction(sis_sin, 80, (56, 24), 3.0, seed=6)
    thin = simulate_next_reaction(sis_sin, 80, (56, 24), 3.0, seed=6, record_every=5)
    np.testing.assert_array_equal(full.final_state, thin.final_state)
    assert full.n_events == thin.n_events
    np.testing.assert_array_equal(thin.times[1:], full.times[5::5])


def test_input_validation(sis_const):
    with pytest.raises(ValueError):
        simulate(sis_const, 0, (0, 0), 1.0)
    with pytest.raises(ValueError):
        simulate(sis_const, 10, (5, 5), -1.0)
    with pytest.raises(ValueError):
        simulate(sis_const, 10, (5, 5), 1.0, engine="tau")
    with pytest.raises(Exception):
        simulate(sis_const, 10, (8, 8), 1.0)
