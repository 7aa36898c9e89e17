"""Density-dependent population models.

A model is a finite set of transition channels.  Channel ``l`` moves the
count vector ``k`` to ``k + jump`` with intensity ``n * beta_l(t, k/n)``.
``beta`` is a polynomial in the state whose coefficients are time-varying
rate functions, optionally replaced by its positive part (``clip``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DomainError, ModelError
from .rates import FORM_CODES, RateFunction, as_rate

_VALIDATION_POINTS = 10_000
_VALIDATION_HORIZON = 50.0
_TOL = 1e-12


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    kind = "box"

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ModelError("box bounds have different lengths")
        if any(not a < b for a, b in zip(self.lo, self.hi)):
            raise ModelError("box needs lo < hi on every axis")

    @property
    def d(self) -> int:
        return len(self.lo)

    def contains(self, x, tol: float = _TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= np.asarray(self.lo) - tol) and np.all(x <= np.asarray(self.hi) + tol))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        hi_eff = np.where(np.isfinite(hi), hi, np.where(np.isfinite(lo), lo, 0.0) + 10.0)
        lo_eff = np.where(np.isfinite(lo), lo, hi_eff - 10.0)
        return lo_eff + rng.random((m, self.d)) * (hi_eff - lo_eff)

    def vertices(self) -> np.ndarray:
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        grids = [[a for a in (l, h) if math.isfinite(a)] or [0.0] for l, h in zip(lo, hi)]
        return np.array(np.meshgrid(*grids, indexing="ij")).reshape(self.d, -1).T

    def exit_faces(self, rng, jump, m):
        """Sample points on faces that ``jump`` would cross."""
        pts = []
        for i, step in enumerate(jump):
            bound = self.lo[i] if step < 0 else self.hi[i] if step > 0 else None
            if bound is None or not math.isfinite(bound):
                continue
            p = self.sample(rng, m)
            p[:, i] = bound
            pts.append(p)
        return np.concatenate(pts) if pts else np.empty((0, self.d))

    def to_dict(self):
        return {"type": "box", "lo": [_jsonable(v) for v in self.lo], "hi": [_jsonable(v) for v in self.hi]}


@dataclass(frozen=True)
class Simplex:
    """``{x >= 0, sum(x) <= total}`` in ``d`` dimensions."""

    d: int
    total: float = 1.0

    kind = "simplex"

    def __post_init__(self):
        if self.d < 1 or not self.total > 0:
            raise ModelError("simplex needs d >= 1 and total > 0")

    def contains(self, x, tol: float = _TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= -tol) and x.sum() <= self.total + tol * max(1.0, self.total))

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        e = rng.exponential(size=(m, self.d + 1))
        return self.total * e[:, : self.d] / e.sum(axis=1, keepdims=True)

    def vertices(self) -> np.ndarray:
        return np.vstack([np.zeros(self.d), self.total * np.eye(self.d)])

    def exit_faces(self, rng, jump, m):
        pts = []
        for i, step in enumerate(jump):
            if step < 0:
                p = self.sample(rng, m)
                p[:, i] = 0.0
                pts.append(p)
        if sum(jump) > 0:
            p = self.sample(rng, m)
            p *= self.total / p.sum(axis=1, keepdims=True)
            pts.append(p)
        return np.concatenate(pts) if pts else np.empty((0, self.d))

    def to_dict(self):
        return {"type": "simplex", "d": self.d, "total": self.total}


def domain_from_dict(spec: dict, d: int):
    kind = spec.get("type")
    if kind == "box":
        return Box(tuple(_unjson(v) for v in spec["lo"]), tuple(_unjson(v) for v in spec["hi"]))
    if kind == "simplex":
        return Simplex(int(spec.get("d", d)), float(spec.get("total", 1.0)))
    raise ModelError(f"unknown domain type {kind!r}")


def _jsonable(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _unjson(v) -> float:
    return float(v)


# ---------------------------------------------------------------------------
# polynomial rates


@dataclass(frozen=True)
class Term:
    """``coef * rate(t) * prod(x_j ** powers_j)``; ``rate=None`` means 1."""

    coef: float
    powers: tuple[int, ...]
    rate: RateFunction | None = None

    def time_factor(self, t):
        return 1.0 if self.rate is None else self.rate(t)


@dataclass(frozen=True)
class Polynomial:
    terms: tuple[Term, ...]
    d: int

    def __post_init__(self):
        for term in self.terms:
            if len(term.powers) != self.d:
                raise ModelError(f"term powers {term.powers} do not match dimension {self.d}")
            if any(p < 0 for p in term.powers):
                raise ModelError("negative power in polynomial term")

    @classmethod
    def zero(cls, d: int) -> Polynomial:
        return cls((), d)

    @classmethod
    def constant(cls, value: float, d: int, rate: RateFunction | None = None) -> Polynomial:
        return cls((Term(float(value), (0,) * d, rate),), d).simplify()

    @classmethod
    def monomial(cls, coef: float, powers: Sequence[int], rate: RateFunction | None = None) -> Polynomial:
        return cls((Term(float(coef), tuple(int(p) for p in powers), rate),), len(powers)).simplify()

    @classmethod
    def variable(cls, i: int, d: int) -> Polynomial:
        powers = [0] * d
        powers[i] = 1
        return cls.monomial(1.0, powers)

    @property
    def time_invariant(self) -> bool:
        return all(t.rate is None or t.rate.is_constant for t in self.terms)

    @property
    def rates(self) -> list[RateFunction]:
        out = []
        for t in self.terms:
            if t.rate is not None and t.rate not in out:
                out.append(t.rate)
        return out

    def __call__(self, t, x):
        """Evaluate at ``x`` of shape ``(d,)`` or ``(m, d)``; ``t`` scalar or ``(m,)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        out = np.zeros(X.shape[0])
        for term in self.terms:
            mono = np.ones(X.shape[0])
            for j, p in enumerate(term.powers):
                if p:
                    mono = mono * X[:, j] ** p
            out = out + term.coef * term.time_factor(t) * mono
        return float(out[0]) if single else out

    def simplify(self) -> Polynomial:
        merged: dict[tuple, float] = {}
        order = []
        for term in self.terms:
            key = (term.powers, term.rate)
            if key not in merged:
                order.append(key)
                merged[key] = 0.0
            merged[key] += term.coef
        terms = tuple(Term(merged[k], k[0], k[1]) for k in order if merged[k] != 0.0)
        return Polynomial(terms, self.d)

    def __add__(self, other: Polynomial) -> Polynomial:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other, self.d)
        _check_dims(self, other)
        return Polynomial(self.terms + other.terms, self.d).simplify()

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return self.scale(-1.0)

    def __sub__(self, other: Polynomial) -> Polynomial:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other, self.d)
        return self + (-other)

    def __rsub__(self, other) -> Polynomial:
        return (-self) + other

    def scale(self, c: float) -> Polynomial:
        return Polynomial(tuple(Term(term.coef * c, term.powers, term.rate) for term in self.terms), self.d).simplify()

    def __mul__(self, other) -> Polynomial:
        if isinstance(other, (int, float, np.floating)):
            return self.scale(float(other))
        _check_dims(self, other)
        terms = []
        for a in self.terms:
            for b in other.terms:
                if a.rate is not None and b.rate is not None:
                    raise ModelError("product of two time-varying coefficients is not representable")
                terms.append(Term(a.coef * b.coef, tuple(p + q for p, q in zip(a.powers, b.powers)),
                                  a.rate if a.rate is not None else b.rate))
        return Polynomial(tuple(terms), self.d).simplify()

    __rmul__ = __mul__

    def __pow__(self, k: int) -> Polynomial:
        out = Polynomial.constant(1.0, self.d)
        for _ in range(k):
            out = out * self
        return out

    def affine_substitute(self, scale: Sequence[float], offset: Sequence[float]) -> Polynomial:
        """Polynomial in ``y`` equal to ``self(x)`` with ``x_j = scale_j * y_j + offset_j``."""
        subs = [Polynomial.variable(j, self.d) * float(scale[j]) + float(offset[j]) for j in range(self.d)]
        out = Polynomial.zero(self.d)
        for term in self.terms:
            piece = Polynomial.constant(term.coef, self.d, term.rate)
            for j, p in enumerate(term.powers):
                if p:
                    piece = piece * subs[j] ** p
            out = out + piece
        return out

    def embed(self, d_new: int) -> Polynomial:
        """Same polynomial viewed in ``d_new >= d`` variables (extra powers zero)."""
        pad = (0,) * (d_new - self.d)
        return Polynomial(tuple(Term(t.coef, t.powers + pad, t.rate) for t in self.terms), d_new)

    def split_by_sign(self) -> tuple[Polynomial, Polynomial]:
        """``(P, N)`` with ``self = P - N``, each built from same-signed terms."""
        pos, neg = [], []
        for term in self.terms:
            if term.coef >= 0:
                pos.append(term)
            else:
                neg.append(Term(-term.coef, term.powers, term.rate))
        return Polynomial(tuple(pos), self.d), Polynomial(tuple(neg), self.d)

    def to_dict(self) -> dict[str, Any]:
        terms = []
        for term in self.terms:
            entry = {"coef": term.coef, "powers": list(term.powers)}
            if term.rate is not None:
                entry["rate"] = term.rate.to_dict()
            terms.append(entry)
        return {"terms": terms}

    @classmethod
    def from_dict(cls, spec: dict, d: int) -> Polynomial:
        terms = []
        for entry in spec.get("terms", []):
            powers = tuple(int(p) for p in entry.get("powers", [0] * d))
            rate = as_rate(entry["rate"]) if "rate" in entry else None
            terms.append(Term(float(entry.get("coef", 1.0)), powers, rate))
        return cls(tuple(terms), d)


def _check_dims(a: Polynomial, b: Polynomial):
    if not isinstance(b, Polynomial):
        raise TypeError(f"cannot combine Polynomial with {type(b).__name__}")
    if a.d != b.d:
        raise ModelError(f"polynomial dimensions differ: {a.d} vs {b.d}")


# ---------------------------------------------------------------------------
# channels and models


@dataclass(frozen=True)
class TransitionChannel:
    """Jump vector plus density rate ``beta(t, x)``.

    With ``clip`` the rate is ``max(poly, 0)``, which keeps sign-split
    constructions representable as polynomials.
    """

    jump: tuple[int, ...]
    rate: Polynomial
    clip: bool = False
    label: str = ""

    @property
    def time_invariant(self) -> bool:
        return self.rate.time_invariant

    def beta(self, t, x):
        v = self.rate(t, x)
        return np.maximum(v, 0.0) if self.clip else v


@dataclass(frozen=True)
class FunctionChannel:
    """Channel whose rate is an arbitrary Python callable ``fn(t, x) -> float``.

    Only the pure-Python engines can simulate it; thinning additionally needs
    ``bound(t0, t1, x)`` returning an upper bound of the rate on the window.
    """

    jump: tuple[int, ...]
    fn: Callable
    bound: Callable | None = None
    time_invariant: bool = False
    label: str = ""
    clip: bool = True

    def beta(self, t, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return max(float(self.fn(t, x)), 0.0)
        ts = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return np.array([max(float(self.fn(tt, xx)), 0.0) for tt, xx in zip(ts, x)])


@dataclass(frozen=True)
class PopulationModel:
    d: int
    domain: Box | Simplex
    channels: tuple
    conserved: tuple[int, ...] | None = None
    check_boundary: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.d < 1:
            raise ModelError("dimension must be positive")
        if self.domain.d != self.d:
            raise ModelError(f"domain dimension {self.domain.d} != model dimension {self.d}")
        if not self.channels:
            raise ModelError("model needs at least one channel")
        for i, ch in enumerate(self.channels):
            if len(ch.jump) != self.d:
                raise ModelError(f"channel {i} jump {ch.jump} has wrong length")
            if all(j == 0 for j in ch.jump):
                raise ModelError(f"channel {i} has a zero jump")
            if isinstance(ch, TransitionChannel) and ch.rate.d != self.d:
                raise ModelError(f"channel {i} rate polynomial has dimension {ch.rate.d}")
        if self.conserved is not None:
            w = np.asarray(self.conserved)
            if len(w) != self.d:
                raise ModelError("conserved vector has wrong length")
            for i, ch in enumerate(self.channels):
                if int(np.dot(w, ch.jump)) != 0:
                    raise ModelError(f"channel {i} violates conservation w.l = 0")
        self._validate_rates()

    @property
    def compilable(self) -> bool:
        return all(isinstance(ch, TransitionChannel) for ch in self.channels)

    @property
    def time_invariant(self) -> bool:
        return all(ch.time_invariant for ch in self.channels)

    def channel_name(self, i: int) -> str:
        ch = self.channels[i]
        return ch.label or f"channel {i} (jump {tuple(ch.jump)})"

    def _validate_rates(self):
        rng = np.random.default_rng(0)
        pts = np.vstack([self.domain.sample(rng, _VALIDATION_POINTS), self.domain.vertices()])
        ts = rng.random(len(pts)) * _VALIDATION_HORIZON
        for i, ch in enumerate(self.channels):
            if isinstance(ch, FunctionChannel):
                continue
            vals = ch.beta(ts, pts)
            if not np.all(np.isfinite(vals)):
                raise ModelError(f"{self.channel_name(i)}: non-finite rate on the domain")
            if np.any(vals < -_TOL):
                j = int(np.argmin(vals))
                raise ModelError(
                    f"{self.channel_name(i)}: negative rate {vals[j]:.3g} at t={ts[j]:.3g}, x={pts[j].tolist()}"
                )
            if self.check_boundary:
                face = self.domain.exit_faces(rng, ch.jump, 200)
                if len(face):
                    fv = ch.beta(rng.random(len(face)) * _VALIDATION_HORIZON, face)
                    if np.any(fv > _TOL):
                        j = int(np.argmax(fv))
                        raise ModelError(
                            f"{self.channel_name(i)}: positive rate at boundary state {face[j].tolist()} "
                            "whose jump leaves the domain"
                        )

    def check_state(self, x):
        if not self.domain.contains(x):
            raise DomainError(f"state {np.asarray(x).tolist()} lies outside the model domain")

    def channel_rates(self, t: float, x) -> np.ndarray:
        self.check_state(x)
        return np.array([float(ch.beta(t, np.asarray(x, dtype=float))) for ch in self.channels])

    def compile(self) -> CompiledModel:
        return CompiledModel.from_model(self)

    def to_dict(self) -> dict[str, Any]:
        channels = []
        for ch in self.channels:
            if not isinstance(ch, TransitionChannel):
                raise ModelError("models with Python-callable channels cannot be serialized")
            entry = {"jump": list(ch.jump), "rate": ch.rate.to_dict()}
            if ch.clip:
                entry["clip"] = True
            if ch.label:
                entry["label"] = ch.label
            channels.append(entry)
        out = {"d": self.d, "domain": self.domain.to_dict(), "channels": channels}
        if self.conserved is not None:
            out["conserved"] = list(self.conserved)
        if not self.check_boundary:
            out["check_boundary"] = False
        return out


def model_from_dict(spec: dict) -> PopulationModel:
    """Build a model from its JSON form or from a preset ``{"preset": "sis"|"logistic", ...}``."""
    preset = spec.get("preset")
    if preset is not None:
        unknown = set(spec) - {"preset", "lambda", "mu"}
        if unknown:
            raise ModelError(f"preset {preset!r} accepts only 'lambda' and 'mu', got {sorted(unknown)}")
        if "lambda" not in spec or "mu" not in spec:
            raise ModelError(f"preset {preset!r} needs 'lambda' and 'mu'")
        lam, mu = as_rate(spec["lambda"]), as_rate(spec["mu"])
        if preset == "sis":
            return make_sis(lam, mu)
        if preset == "logistic":
            return make_logistic(lam, mu)
        raise ModelError(f"unknown preset {preset!r}")
    try:
        d = int(spec["d"])
        domain = domain_from_dict(spec["domain"], d)
        channels = [
            TransitionChannel(tuple(int(j) for j in c["jump"]), Polynomial.from_dict(c["rate"], d),
                              bool(c.get("clip", False)), c.get("label", ""))
            for c in spec["channels"]
        ]
    except KeyError as exc:
        raise ModelError(f"model spec is missing field {exc}") from None
    conserved = tuple(spec["conserved"]) if spec.get("conserved") is not None else None
    return PopulationModel(d, domain, tuple(channels), conserved, bool(spec.get("check_boundary", True)))


# ---------------------------------------------------------------------------
# presets and evaluation


def make_sis(lam, mu, horizon: float | None = None) -> PopulationModel:
    """Viral propagation on the complete graph: state ``(susceptible, infected)``."""
    lam, mu = as_rate(lam), as_rate(mu)
    for name, r in (("infection rate", lam), ("cure rate", mu)):
        if not r.is_strictly_positive(horizon):
            raise ModelError(f"{name} must be strictly positive on the horizon")
    infect = TransitionChannel((-1, 1), Polynomial.monomial(1.0, (1, 1), lam), label="infection")
    cure = TransitionChannel((1, -1), Polynomial.monomial(1.0, (0, 1), mu), label="cure")
    return PopulationModel(2, Simplex(2, 1.0), (infect, cure), conserved=(1, 1),
                           meta={"preset": "sis", "lambda": lam, "mu": mu})


def make_logistic(lam, mu, horizon: float | None = None) -> PopulationModel:
    lam, mu = as_rate(lam), as_rate(mu)
    for name, r in (("birth rate", lam), ("death rate", mu)):
        if not r.is_strictly_positive(horizon):
            raise ModelError(f"{name} must be strictly positive on the horizon")
    birth = TransitionChannel((1,), Polynomial.monomial(1.0, (2,), lam), label="birth")
    death = TransitionChannel((-1,), Polynomial.monomial(1.0, (2,), mu), label="death")
    return PopulationModel(1, Box((0.0,), (math.inf,)), (birth, death),
                           meta={"preset": "logistic", "lambda": lam, "mu": mu})


def drift(model: PopulationModel, t: float, x) -> np.ndarray:
    """Mean-field vector field: sum over channels of ``jump * beta(t, x)``."""
    rates = model.channel_rates(t, x)
    jumps = np.array([ch.jump for ch in model.channels], dtype=float)
    return rates @ jumps


def total_rate(model: PopulationModel, n: int, t: float, x) -> float:
    if n < 1:
        raise ValueError("scale n must be >= 1")
    return float(n * model.channel_rates(t, x).sum())


def rate_derivative(r: RateFunction, t):
    return r.derivative(t)


def drift_field(model: PopulationModel) -> Callable:
    """Vectorised ``(t, x) -> drift`` without domain checks, for ODE integration."""
    jumps = np.array([ch.jump for ch in model.channels], dtype=float)
    channels = model.channels

    def field_fn(t, x):
        x = np.asarray(x, dtype=float)
        rates = np.array([float(ch.beta(t, x)) for ch in channels])
        return rates @ jumps

    return field_fn


# ---------------------------------------------------------------------------
# flat representation for the simulation kernels


@dataclass(frozen=True)
class CompiledModel:
    d: int
    rf_kind: np.ndarray  # int32[R]
    rf_par: np.ndarray  # float64[R, 4]
    rf_knot_off: np.ndarray  # int32[R + 1]
    knot_t: np.ndarray
    knot_v: np.ndarray
    term_coef: np.ndarray  # float64[M]
    term_rf: np.ndarray  # int32[M], -1 for a constant factor
    term_pow: np.ndarray  # int32[M, d]
    ch_off: np.ndarray  # int32[K + 1]
    ch_clip: np.ndarray  # int32[K]
    ch_tinv: np.ndarray  # int32[K]
    ch_jump: np.ndarray  # int64[K, d]
    dom_kind: int  # 0 box, 1 simplex
    dom_lo: np.ndarray
    dom_hi: np.ndarray
    dom_total: float
    ch_names: tuple[str, ...] = ()

    @classmethod
    def from_model(cls, model: PopulationModel) -> CompiledModel:
        if not model.compilable:
            raise ModelError("model has Python-callable channels and cannot be compiled")
        rfs: list[RateFunction] = []
        for ch in model.channels:
            for r in ch.rate.rates:
                if r not in rfs:
                    rfs.append(r)
        rf_kind = np.array([FORM_CODES[r.form] for r in rfs], dtype=np.int32)
        rf_par = np.zeros((len(rfs), 4))
        offs = [0]
        kt, kv = [], []
        for i, r in enumerate(rfs):
            rf_par[i, : len(r.params)] = r.params
            kt.extend(k[0] for k in r.knots)
            kv.extend(k[1] for k in r.knots)
            offs.append(len(kt))
        coefs, rf_idx, pows, ch_off = [], [], [], [0]
        for ch in model.channels:
            for term in ch.rate.terms:
                coefs.append(term.coef)
                rf_idx.append(-1 if term.rate is None else rfs.index(term.rate))
                pows.append(term.powers)
            ch_off.append(len(coefs))
        d = model.d
        if isinstance(model.domain, Box):
            kind, lo, hi, total = 0, np.array(model.domain.lo, float), np.array(model.domain.hi, float), 0.0
        else:
            kind, lo, hi, total = 1, np.zeros(d), np.full(d, np.inf), float(model.domain.total)
        return cls(
            d=d,
            rf_kind=rf_kind,
            rf_par=rf_par,
            rf_knot_off=np.array(offs, dtype=np.int32),
            knot_t=np.array(kt, dtype=float),
            knot_v=np.array(kv, dtype=float),
            term_coef=np.array(coefs, dtype=float),
            term_rf=np.array(rf_idx, dtype=np.int32),
            term_pow=np.array(pows, dtype=np.int32).reshape(len(coefs), d),
            ch_off=np.array(ch_off, dtype=np.int32),
            ch_clip=np.array([int(ch.clip) for ch in model.channels], dtype=np.int32),
            ch_tinv=np.array([int(ch.time_invariant) for ch in model.channels], dtype=np.int32),
            ch_jump=np.array([ch.jump for ch in model.channels], dtype=np.int64),
            ch_names=tuple(model.channel_name(i) for i in range(len(model.channels))),
            dom_kind=kind,
            dom_lo=lo,
            dom_hi=hi,
            dom_total=total,
        )
