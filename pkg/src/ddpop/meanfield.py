"""Mean-field ODE limits and auxiliary moment systems.

All systems are integrated with one embedded Dormand-Prince 5(4) pair with
adaptive steps and a quartic dense-output interpolant, so trajectories can be
evaluated anywhere in their span.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction as Fr
from typing import Callable

import numpy as np

from .errors import IntegrationError
from .rates import RateFunction, as_rate

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# fifth-order minus embedded fourth-order weights (seven stages, FSAL)
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# dense output: y(t + th*h) = y + h * K^T P [th, th^2, th^3, th^4]
_P = np.array([[float(Fr(*p)) for p in row] for row in [
    [(1, 1), (-8048581381, 2820520608), (8663915743, 2820520608), (-12715105075, 11282082432)],
    [(0, 1), (0, 1), (0, 1), (0, 1)],
    [(0, 1), (131558114200, 32700410799), (-68118460800, 10900136933), (87487479700, 32700410799)],
    [(0, 1), (-1754552775, 470086768), (14199869525, 1410260304), (-10690763975, 1880347072)],
    [(0, 1), (127303824393, 49829197408), (-318862633887, 49829197408), (701980252875, 199316789632)],
    [(0, 1), (-282668133, 205662961), (2019193451, 616988883), (-1453857185, 822651844)],
    [(0, 1), (40617522, 29380423), (-110615467, 29380423), (69997945, 29380423)],
]])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


@dataclass
class SampledTrajectory:
    """Accepted steps of an integration plus the dense interpolant.

    ``errors[i]`` is the scaled local error estimate of step ``i`` (at most 1
    for adaptive runs); ``Q[i]`` holds ``h * K^T P`` for that step.
    """

    t: np.ndarray
    y: np.ndarray
    errors: np.ndarray
    Q: np.ndarray
    rtol: float = 0.0
    atol: float = 0.0
    labels: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.y.shape[1]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    def __call__(self, t):
        ts = np.asarray(t, dtype=float)
        scalar = ts.ndim == 0
        ts = np.atleast_1d(ts)
        t0, t1 = self.span
        slack = 1e-12 * max(1.0, abs(t0), abs(t1))
        if np.any(ts < t0 - slack) or np.any(ts > t1 + slack):
            raise ValueError(f"evaluation time outside trajectory span [{t0}, {t1}]")
        if len(self.t) == 1:
            out = np.repeat(self.y[:1], len(ts), axis=0)
            return out[0] if scalar else out
        idx = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[idx + 1] - self.t[idx]
        th = np.clip((ts - self.t[idx]) / h, 0.0, 1.0)
        powers = np.stack([th, th ** 2, th ** 3, th ** 4], axis=1)
        out = self.y[idx] + np.einsum("mdk,mk->md", self.Q[idx], powers)
        # land exactly on step nodes
        exact = ts == self.t[idx]
        out[exact] = self.y[idx[exact]]
        last = ts >= t1
        out[last] = self.y[-1]
        return out[0] if scalar else out

    def derivative(self, t):
        """Time derivative of the dense-output interpolant."""
        ts = np.asarray(t, dtype=float)
        scalar = ts.ndim == 0
        ts = np.atleast_1d(ts)
        if len(self.t) == 1:
            out = np.zeros((len(ts), self.d))
            return out[0] if scalar else out
        idx = np.clip(np.searchsorted(self.t, ts, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[idx + 1] - self.t[idx]
        th = np.clip((ts - self.t[idx]) / h, 0.0, 1.0)
        dpow = np.stack([np.ones_like(th), 2 * th, 3 * th ** 2, 4 * th ** 3], axis=1) / h[:, None]
        out = np.einsum("mdk,mk->md", self.Q[idx], dpow)
        return out[0] if scalar else out

    def component(self, j: int) -> Callable:
        return lambda t: self(t)[..., j]

    def to_csv(self, path, grid=None, labels=None) -> None:
        ts = self.t if grid is None else np.asarray(grid, dtype=float)
        ys = self(ts)
        labels = labels or self.labels or tuple(f"x_{j + 1}" for j in range(self.d))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *labels])
            for t, row in zip(ts.tolist(), ys.tolist()):
                w.writerow([repr(t)] + [repr(v) for v in row])


def _error_norm(err, y, y_new, rtol, atol, norm):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    r = err / scale
    if norm == "max":
        return float(np.max(np.abs(r)))
    return float(np.sqrt(np.mean(r * r)))


def _initial_step(f, t0, y0, f0, rtol, atol, direction):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(t0 + direction * h0, y0 + direction * h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def _step(f, t, y, k0, h):
    K = np.empty((7, y.size))
    K[0] = k0
    for s in range(1, 6):
        K[s] = f(t + _C[s] * h, y + h * (_A[s] @ K[:s]))
    y_new = y + h * (_B @ K[:6])
    K[6] = f(t + h, y_new)
    err = h * (_E @ K)
    return y_new, err, K


def integrate(field_fn, x0, t_span, rtol: float = 1e-8, atol: float = 1e-10, *, fixed_step: float | None = None,
              first_step: float | None = None, max_step: float = math.inf, max_steps: int = 1_000_000,
              norm: str = "rms", labels=()) -> SampledTrajectory:
    """Integrate ``x' = field_fn(t, x)`` over ``t_span``.

    Adaptive mode keeps every scaled local error estimate at or below 1;
    ``fixed_step`` switches to constant steps (the last one is shortened to
    land on the end point).  ``norm="max"`` controls the worst component
    instead of the RMS, which suits batched independent systems.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("rtol and atol must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 >= t0:
        raise ValueError("t_span must be increasing")
    y = np.array(x0, dtype=float).ravel()
    d = y.size

    def f(t, x):
        return np.asarray(field_fn(t, x), dtype=float).ravel()

    ts, ys, errs, Qs = [t0], [y.copy()], [], []
    if t1 == t0:
        return SampledTrajectory(np.array(ts), np.array(ys), np.zeros(0), np.zeros((0, d, 4)), rtol, atol,
                                 tuple(labels))
    t = t0
    k0 = f(t, y)
    if not np.all(np.isfinite(k0)):
        raise IntegrationError("non-finite field value at the initial state", t_last=t)
    if fixed_step is not None:
        if not fixed_step > 0:
            raise ValueError("fixed_step must be positive")
        h_nom = float(fixed_step)
    elif first_step is not None:
        h = float(first_step)
    else:
        h = _initial_step(f, t, y, k0, rtol, atol, 1.0)
    if fixed_step is None:
        # keep the heuristic above the underflow threshold; error control takes over from there
        h = max(h, 100 * np.finfo(float).eps * max(1.0, abs(t0)))
    steps = 0
    while t < t1:
        if steps >= max_steps:
            raise IntegrationError(f"maximum number of steps ({max_steps}) exceeded", t_last=t)
        if fixed_step is not None:
            h = min(h_nom, t1 - t)
            y_new, err, K = _step(f, t, y, k0, h)
            if not np.all(np.isfinite(y_new)) or not np.all(np.isfinite(K)):
                raise IntegrationError("non-finite state in fixed-step integration", t_last=t)
            en = _error_norm(err, y, y_new, rtol, atol, norm)
        else:
            h = min(h, max_step, t1 - t)
            if t1 - (t + h) < 1e-12 * max(1.0, abs(t1)):
                h = t1 - t
            while True:
                if h < min(10 * np.finfo(float).eps * max(1.0, abs(t)), t1 - t):
                    raise IntegrationError(f"step size underflow at t={t}", t_last=t)
                y_new, err, K = _step(f, t, y, k0, h)
                if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(K))):
                    h *= 0.25
                    continue
                en = _error_norm(err, y, y_new, rtol, atol, norm)
                if en <= 1.0:
                    break
                h *= max(_MIN_FACTOR, _SAFETY * en ** -0.2)
        t_new = t1 if t + h >= t1 else t + h
        Qs.append(h * (K.T @ _P))
        errs.append(en)
        ts.append(t_new)
        ys.append(y_new)
        t, y, k0 = t_new, y_new, K[6]
        steps += 1
        if fixed_step is None:
            factor = _MAX_FACTOR if en == 0.0 else min(_MAX_FACTOR, _SAFETY * en ** -0.2)
            h = h * max(_MIN_FACTOR, factor)
    return SampledTrajectory(np.array(ts), np.array(ys), np.array(errs), np.array(Qs), rtol, atol, tuple(labels))


# ---------------------------------------------------------------------------
# SIS systems


def sis_pair_field(lam, mu) -> Callable:
    """Susceptible/infected densities ``(X, Y)`` of the viral propagation model."""
    lam, mu = as_rate(lam), as_rate(mu)

    def fn(t, z):
        x, y = z[0], z[1]
        flow = lam(t) * x * y - mu(t) * y
        return np.array([-flow, flow])

    return fn


def sis_scalar_field(lam, mu, c: float = 1.0) -> Callable:
    """Susceptible density ``x' = (lam x - mu)(x - c)``; ``x = c`` is exactly invariant."""
    lam, mu = as_rate(lam), as_rate(mu)

    def fn(t, x):
        return (lam(t) * x - mu(t)) * (x - c)

    return fn


def sis_infected_field(lam, mu, c: float = 1.0) -> Callable:
    """Infected density ``Y' = Y (lam (c - Y) - mu)``; ``Y = 0`` is exactly invariant."""
    lam, mu = as_rate(lam), as_rate(mu)

    def fn(t, y):
        return y * (lam(t) * (c - y) - mu(t))

    return fn


def sis_limit(lam, mu, y0: float, t_span, tol: float = 1e-10, c: float = 1.0) -> SampledTrajectory:
    """Infected density ``Y(t)`` of the SIS limit; ``X = c - Y`` by conservation."""
    if not 0.0 <= y0 <= c:
        raise ValueError(f"y0 must lie in [0, {c}]")
    return integrate(sis_infected_field(lam, mu, c), [y0], t_span, rtol=tol, atol=tol * 1e-2, labels=("Y",))


# ---------------------------------------------------------------------------
# moment bounds


@dataclass
class MomentBoundSet:
    n: float
    trajectory: SampledTrajectory
    diagnostics: list = field(default_factory=list)

    LABELS = ("Y", "z_n", "w_n", "v1", "v2")

    @property
    def t(self) -> np.ndarray:
        return self.trajectory.t

    def _col(self, j, t=None):
        if t is None:
            return self.trajectory.y[:, j]
        return self.trajectory(t)[..., j]

    def Y(self, t=None):
        return self._col(0, t)

    def z_n(self, t=None):
        return self._col(1, t)

    def w_n(self, t=None):
        return self._col(2, t)

    def v1(self, t=None):
        return self._col(3, t)

    def v2(self, t=None):
        return self._col(4, t)

    def to_csv(self, path, grid=None) -> None:
        self.trajectory.to_csv(path, grid, labels=self.LABELS)


def _pow15(w):
    return w * math.sqrt(w)


def moment_bounds(lam, mu, y0: float, n: float, t_span, tol: float = 1e-10) -> MomentBoundSet:
    """Jointly integrate ``Y``, the lower bound pair ``(z_n, w_n)`` and ``v``.

    ``n = inf`` drops the ``1/n`` forcing term.  ``w_n`` and ``v2`` enter
    through ``w * sqrt(w)``; an undershoot below zero smaller than ``atol`` is
    clamped (and recorded in ``diagnostics``), a larger one is an error.
    """
    if not 0.0 <= y0 <= 1.0:
        raise ValueError("y0 must lie in [0, 1]")
    if not n >= 1:
        raise ValueError("n must be >= 1")
    lam, mu = as_rate(lam), as_rate(mu)
    atol = tol * 1e-2
    inv_n = 0.0 if math.isinf(n) else 1.0 / n
    diagnostics = []

    def nonneg(v, name, t):
        if v >= 0.0:
            return v
        if v > -atol:
            diagnostics.append({"t": float(t), "variable": name, "value": float(v)})
            return 0.0
        raise IntegrationError(f"{name} became negative ({v:.3g}) at t={t}", t_last=t)

    def fn(t, s):
        L, M = lam(t), mu(t)
        Y, z, w, v1, v2 = s
        w = nonneg(w, "w_n", t)
        v2 = nonneg(v2, "v2", t)
        return np.array([
            Y * (L * (1.0 - Y) - M),
            L * (z - w) - M * z,
            2.0 * L * (w - _pow15(w)) - 2.0 * M * w + inv_n * (L + M),
            L * (v1 - v2) - M * v1,
            2.0 * L * (v2 - _pow15(v2)) - 2.0 * M * v2,
        ])

    traj = integrate(fn, [y0, y0, y0 * y0, y0, y0 * y0], t_span, rtol=tol, atol=atol,
                     labels=MomentBoundSet.LABELS)
    return MomentBoundSet(float(n), traj, diagnostics)


# ---------------------------------------------------------------------------
# comparison theorem checker


@dataclass
class ComparisonReport:
    max_violation: float
    holds: bool
    t_worst: float
    tol: float


def comparison_check(u, field_fn, tol: float = 1e-8, grid=None) -> ComparisonReport:
    """Integrate ``v' = field_fn(t, v)`` from ``v(t0) = u(t0)`` and test ``u <= v + tol``.

    ``u`` is a scalar ``SampledTrajectory`` or a pair ``(grid, values)``.
    """
    if isinstance(u, SampledTrajectory):
        ts = u.t if grid is None else np.asarray(grid, dtype=float)
        us = u(ts)[:, 0]
    else:
        ts, us = (np.asarray(a, dtype=float) for a in u)
    v = integrate(field_fn, [us[0]], (ts[0], ts[-1]), rtol=tol * 1e-2, atol=tol * 1e-3)
    vs = v(ts)[:, 0]
    diff = us - vs
    j = int(np.argmax(diff))
    worst = max(float(diff[j]), 0.0)
    return ComparisonReport(worst, bool(worst <= tol), float(ts[j]), tol)


def uniform_w_bound(lam_max: float, mu_max: float, y0: float, T: float) -> float:
    """The uniform bound ``y0^2 + (13/9 Lambda + M) T`` on ``w_n`` over ``[0, T]``."""
    return y0 * y0 + (13.0 / 9.0 * lam_max + mu_max) * T


def rate_sup(r: RateFunction, t0: float, t1: float) -> float:
    return r.bounds(t0, t1)[1]
