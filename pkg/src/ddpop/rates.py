"""Time-varying rate functions.

A closed registry of continuous parametric forms.  Every form supports
exact evaluation, exact derivative, exact integral over an interval and
exact range bounds over an interval; the simulators and the stability
analysis rely on all four.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ModelError

FORMS = ("constant", "linear", "sinusoid", "exponential", "piecewise_linear")

# integer codes shared with the simulation kernels
FORM_CODES = {name: i for i, name in enumerate(FORMS)}

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class RateFunction:
    """A scalar function of time drawn from the parametric registry.

    ``params`` holds ``(a,)``, ``(a, b)``, ``(a, b, omega, phi)`` or
    ``(a, b, r)`` depending on ``form``; ``knots`` holds ``(t, value)`` pairs
    for the piecewise-linear form, which is held constant outside the table.
    """

    form: str
    params: tuple[float, ...] = ()
    knots: tuple[tuple[float, float], ...] = ()
    _kt: np.ndarray = field(init=False, repr=False, compare=False)
    _kv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.form not in FORMS:
            raise ModelError(f"unknown rate form {self.form!r}")
        expected = {"constant": 1, "linear": 2, "sinusoid": 4, "exponential": 3,
                    "piecewise_linear": 0}[self.form]
        if len(self.params) != expected:
            raise ModelError(f"{self.form} expects {expected} parameters, got {len(self.params)}")
        if not all(math.isfinite(p) for p in self.params):
            raise ModelError(f"non-finite parameter in {self.form} rate")
        kt = np.array([k[0] for k in self.knots], dtype=float)
        kv = np.array([k[1] for k in self.knots], dtype=float)
        if self.form == "piecewise_linear":
            if len(self.knots) < 1:
                raise ModelError("piecewise_linear needs at least one knot")
            if np.any(np.diff(kt) <= 0):
                raise ModelError("piecewise_linear knot times must be strictly increasing")
            if not (np.all(np.isfinite(kt)) and np.all(np.isfinite(kv))):
                raise ModelError("non-finite knot in piecewise_linear rate")
        object.__setattr__(self, "_kt", kt)
        object.__setattr__(self, "_kv", kv)

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, a: float) -> RateFunction:
        return cls("constant", (float(a),))

    @classmethod
    def linear(cls, a: float, b: float) -> RateFunction:
        return cls("linear", (float(a), float(b)))

    @classmethod
    def sinusoid(cls, a: float, b: float, omega: float = 1.0, phi: float = 0.0) -> RateFunction:
        return cls("sinusoid", (float(a), float(b), float(omega), float(phi)))

    @classmethod
    def exponential(cls, a: float, b: float, r: float) -> RateFunction:
        return cls("exponential", (float(a), float(b), float(r)))

    @classmethod
    def piecewise_linear(cls, knots) -> RateFunction:
        return cls("piecewise_linear", (), tuple((float(t), float(v)) for t, v in knots))

    # -- evaluation ---------------------------------------------------------

    @property
    def is_constant(self) -> bool:
        if self.form == "constant":
            return True
        if self.form == "linear":
            return self.params[1] == 0.0
        if self.form == "sinusoid":
            return self.params[1] == 0.0 or self.params[2] == 0.0
        if self.form == "exponential":
            return self.params[1] == 0.0 or self.params[2] == 0.0
        return len(self.knots) == 1 or bool(np.all(self._kv == self._kv[0]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.form == "constant":
            out = np.full_like(t, p[0])
        elif self.form == "linear":
            out = p[0] + p[1] * t
        elif self.form == "sinusoid":
            out = p[0] + p[1] * np.sin(p[2] * t + p[3])
        elif self.form == "exponential":
            out = p[0] + p[1] * np.exp(p[2] * t)
        else:
            out = np.interp(t, self._kt, self._kv)
        return float(out) if out.ndim == 0 else out

    def derivative(self, t):
        """Exact time derivative; piecewise-linear knots take the right derivative."""
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.form == "constant":
            out = np.zeros_like(t)
        elif self.form == "linear":
            out = np.full_like(t, p[1])
        elif self.form == "sinusoid":
            out = p[1] * p[2] * np.cos(p[2] * t + p[3])
        elif self.form == "exponential":
            out = p[1] * p[2] * np.exp(p[2] * t)
        else:
            kt, kv = self._kt, self._kv
            if len(kt) == 1:
                out = np.zeros_like(t)
            else:
                slopes = np.diff(kv) / np.diff(kt)
                idx = np.searchsorted(kt, t, side="right") - 1
                inside = (idx >= 0) & (idx < len(kt) - 1)
                out = np.where(inside, slopes[np.clip(idx, 0, len(slopes) - 1)], 0.0)
        return float(out) if out.ndim == 0 else out

    def integral(self, t0: float, t1: float) -> float:
        """Exact value of the integral of the rate over ``[t0, t1]``."""
        h = t1 - t0
        p = self.params
        if self.form == "constant":
            return p[0] * h
        if self.form == "linear":
            return h * (p[0] + 0.5 * p[1] * (t0 + t1))
        if self.form == "sinusoid":
            a, b, w, phi = p
            if w == 0.0:
                return h * (a + b * math.sin(phi))
            return a * h + b * h * math.sin(0.5 * w * (t0 + t1) + phi) * _sinc(0.5 * w * h)
        if self.form == "exponential":
            a, b, r = p
            if r == 0.0:
                return h * (a + b)
            return a * h + b * h * math.exp(r * t0) * _expm1_ratio(r * h)
        return _pwl_integral(self._kt, self._kv, t0, t1)

    def bounds(self, t0: float = 0.0, t1: float | None = None) -> tuple[float, float]:
        """Exact (min, max) of the rate on ``[t0, t1]``; ``t1=None`` means no upper end."""
        if t1 is not None and t1 < t0:
            raise ValueError("t1 < t0")
        p = self.params
        inf = math.inf
        if self.form == "constant":
            return p[0], p[0]
        if self.form == "linear":
            a, b = p
            v0 = a + b * t0
            if t1 is None:
                if b == 0.0:
                    return v0, v0
                return (v0, inf) if b > 0 else (-inf, v0)
            v1 = a + b * t1
            return min(v0, v1), max(v0, v1)
        if self.form == "sinusoid":
            a, b, w, phi = p
            smin, smax = _sin_range(w, phi, t0, t1)
            lo, hi = a + b * smin, a + b * smax
            return (lo, hi) if b >= 0 else (hi, lo)
        if self.form == "exponential":
            a, b, r = p
            v0 = a + b * math.exp(r * t0)
            if t1 is None:
                if r == 0.0 or b == 0.0:
                    return v0, v0
                vinf = (inf if b > 0 else -inf) if r > 0 else a
            else:
                vinf = a + b * math.exp(r * t1)
            return min(v0, vinf), max(v0, vinf)
        kt, kv = self._kt, self._kv
        v0 = float(np.interp(t0, kt, kv))
        if t1 is None:
            inner = kv[kt > t0]
            v1 = float(kv[-1])
        else:
            inner = kv[(kt > t0) & (kt < t1)]
            v1 = float(np.interp(t1, kt, kv))
        vals = np.concatenate([[v0, v1], inner])
        return float(vals.min()), float(vals.max())

    def sup_abs(self, t0: float, t1: float) -> float:
        lo, hi = self.bounds(t0, t1)
        return max(abs(lo), abs(hi))

    def is_strictly_positive(self, horizon: float | None = None, samples: int = 1001) -> bool:
        """Interval bound on ``[0, horizon]`` confirmed by dense sampling."""
        lo, _ = self.bounds(0.0, horizon)
        if not lo > 0.0:
            return False
        span = horizon if horizon is not None else 1e3
        return bool(np.all(self(np.linspace(0.0, span, samples)) > 0.0))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        p = self.params
        if self.form == "constant":
            return {"form": "constant", "a": p[0]}
        if self.form == "linear":
            return {"form": "linear", "a": p[0], "b": p[1]}
        if self.form == "sinusoid":
            return {"form": "sinusoid", "a": p[0], "b": p[1], "omega": p[2], "phi": p[3]}
        if self.form == "exponential":
            return {"form": "exponential", "a": p[0], "b": p[1], "r": p[2]}
        return {"form": "piecewise_linear", "knots": [list(k) for k in self.knots]}

    @classmethod
    def from_dict(cls, spec) -> RateFunction:
        if isinstance(spec, (int, float)):
            return cls.constant(spec)
        form = spec.get("form")
        try:
            if form == "constant":
                return cls.constant(spec["a"])
            if form == "linear":
                return cls.linear(spec["a"], spec["b"])
            if form == "sinusoid":
                return cls.sinusoid(spec["a"], spec["b"], spec.get("omega", 1.0), spec.get("phi", 0.0))
            if form == "exponential":
                return cls.exponential(spec["a"], spec["b"], spec["r"])
            if form == "piecewise_linear":
                return cls.piecewise_linear(spec["knots"])
        except KeyError as exc:
            raise ModelError(f"rate spec {form!r} is missing field {exc}") from None
        raise ModelError(f"unknown rate form {form!r}")


def _sinc(u: float) -> float:
    # sin(u)/u, with a series near 0 so tiny frequencies do not overflow
    if abs(u) < 1e-4:
        return 1.0 - u * u / 6.0
    return math.sin(u) / u


def _expm1_ratio(x: float) -> float:
    # expm1(x)/x, with a series near 0
    if abs(x) < 1e-5:
        return 1.0 + x * (0.5 + x / 6.0)
    return math.expm1(x) / x


def as_rate(value) -> RateFunction:
    if isinstance(value, RateFunction):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return RateFunction.constant(float(value))
    if isinstance(value, dict):
        return RateFunction.from_dict(value)
    raise TypeError(f"cannot interpret {value!r} as a rate function")


def _sin_range(w: float, phi: float, t0: float, t1: float | None) -> tuple[float, float]:
    if w == 0.0:
        s = math.sin(phi)
        return s, s
    if t1 is None:
        return -1.0, 1.0
    u0, u1 = w * t0 + phi, w * t1 + phi
    if u0 > u1:
        u0, u1 = u1, u0
    if u1 - u0 >= _TWO_PI:
        return -1.0, 1.0
    s0, s1 = math.sin(u0), math.sin(u1)
    smin, smax = min(s0, s1), max(s0, s1)
    k = math.ceil((u0 - 0.5 * math.pi) / _TWO_PI)
    if 0.5 * math.pi + _TWO_PI * k <= u1:
        smax = 1.0
    k = math.ceil((u0 + 0.5 * math.pi) / _TWO_PI)
    if -0.5 * math.pi + _TWO_PI * k <= u1:
        smin = -1.0
    return smin, smax


def _pwl_integral(kt: np.ndarray, kv: np.ndarray, t0: float, t1: float) -> float:
    sign = 1.0
    if t1 < t0:
        t0, t1, sign = t1, t0, -1.0
    pts = np.concatenate([[t0], kt[(kt > t0) & (kt < t1)], [t1]])
    vals = np.interp(pts, kt, kv)
    return sign * float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)))
