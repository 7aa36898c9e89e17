import math

import numpy as np
import pytest

from ddpop.model import Box, Polynomial, PopulationModel, TransitionChannel, make_sis
from ddpop.rates import RateFunction


@pytest.fixture
def sis_sin():
    return make_sis(RateFunction.sinusoid(2.0, 1.0), 1.0)


@pytest.fixture
def sis_const():
    return make_sis(2.0, 0.8)


def poisson_model(rate):
    """One-dimensional counting process whose only channel has rate ``rate(t)``."""
    ch = TransitionChannel((1,), Polynomial.constant(1.0, 1, rate), label="arrival")
    return PopulationModel(1, Box((0.0,), (np.inf,)), (ch,))


def channel_sum(model, t, x):
    """Brute-force drift: sum of jump * beta over channels, first d - 1 classes."""
    out = np.zeros(model.d)
    for ch in model.channels:
        out += np.asarray(ch.jump, dtype=float) * float(ch.beta(t, x))
    return out[:-1]


def _var(i, m):
    return Polynomial.variable(i, m)


def construct_test_fields():
    """(polynomial components, numpy oracle, m, B) for five test fields."""
    sin_rate = RateFunction.sinusoid(0.0, 1.0)
    out = []
    x = _var(0, 1)
    out.append(([-x], lambda t, v: np.array([-v[0]]), 1, 1.0))
    out.append(([x - Polynomial.constant(0.5, 1)], lambda t, v: np.array([v[0] - 0.5]), 1, 1.0))
    x1, x2 = _var(0, 2), _var(1, 2)
    out.append(([x2 - x1 * x1, x1 * x2 - Polynomial.constant(0.1, 2)],
                lambda t, v: np.array([v[1] - v[0] ** 2, v[0] * v[1] - 0.1]), 2, 0.5))
    out.append(([Polynomial.monomial(1.0, (1, 0), sin_rate) - x2, Polynomial.constant(0.3, 2, sin_rate)],
                lambda t, v: np.array([math.sin(t) * v[0] - v[1], 0.3 * math.sin(t)]), 2, 0.5))
    y1, y2, y3 = _var(0, 3), _var(1, 3), _var(2, 3)
    out.append(([y1 - y2 * y3, Polynomial.constant(0.2, 3) - y3, (y1 * y2).scale(4.0)],
                lambda t, v: np.array([v[0] - v[1] * v[2], 0.2 - v[2], 4 * v[0] * v[1]]), 3, 1.0 / 3.0))
    return out


_ACCEPTANCE = []


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
