"""Population processes that realize a given vector field.

A field ``F`` on ``[0, B]^(d-1)`` is split as ``F = P - N`` with ``P, N >= 0``.
Class ``i`` gains an agent from the reservoir class ``d`` at density rate
``alpha P_i`` and returns one at rate ``alpha N_i``, so the mean-field drift
of the first ``d - 1`` classes is ``alpha F``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ModelError
from .model import FunctionChannel, Polynomial, PopulationModel, Simplex, TransitionChannel

_GRID_POINTS = 1000


@dataclass(frozen=True)
class AffineRescale:
    """Per-axis map ``x = (X + shift) * scale`` from original to rescaled coordinates."""

    shift: tuple[float, ...]
    scale: tuple[float, ...]

    def forward(self, X):
        return (np.asarray(X, dtype=float) + np.asarray(self.shift)) * np.asarray(self.scale)

    def inverse(self, x):
        return np.asarray(x, dtype=float) / np.asarray(self.scale) - np.asarray(self.shift)

    def to_dict(self) -> dict:
        return {"shift": list(self.shift), "scale": list(self.scale)}


def affine_rescale(box, B: float = 1.0) -> AffineRescale:
    """Map the box ``[(lo_1, hi_1), ...]`` onto ``[0, B]`` per axis."""
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or len(box) == 0:
        raise ValueError("box must be a nonempty list of (lo, hi) pairs")
    width = box[:, 1] - box[:, 0]
    if np.any(width <= 0) or not np.all(np.isfinite(width)):
        raise ValueError("every box axis needs a positive finite width")
    if not B > 0:
        raise ValueError("B must be positive")
    return AffineRescale(tuple((-box[:, 0]).tolist()), tuple((B / width).tolist()))


def _poly_list(F, m):
    if callable(F) and not isinstance(F, (list, tuple)):
        return None
    polys = list(F)
    if len(polys) != m:
        raise ModelError(f"expected {m} field components, got {len(polys)}")
    return polys


@dataclass
class FieldDecomposition:
    """``P`` and ``N`` component lists on ``[0, B]^m`` (``m = d - 1``).

    Components are ``Polynomial`` objects in ``m`` variables; with ``clip`` the
    effective components are ``max(P_i, 0)`` and ``max(N_i, 0)``.  A callable
    field (``fn(t, x) -> array``) is kept in ``field_fn`` instead.
    """

    m: int
    B: float
    P: list | None
    N: list | None
    clip: bool
    mode: str
    rescale: AffineRescale | None = None
    field_fn: Callable | None = None

    def F(self, t, x):
        """Field value(s) at ``x`` of shape ``(m,)`` or ``(k, m)``."""
        x = np.asarray(x, dtype=float)
        if self.field_fn is not None:
            if x.ndim == 1:
                return np.asarray(self.field_fn(t, x), dtype=float)
            ts = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
            return np.array([self.field_fn(tt, xx) for tt, xx in zip(ts, x)])
        p, nn = self.parts(t, x)
        return p - nn

    def parts(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.field_fn is not None:
            f = self.F(t, x)
            return np.maximum(f, 0.0), np.maximum(-f, 0.0)
        p = np.stack([q(t, x) for q in self.P], axis=-1)
        nn = np.stack([q(t, x) for q in self.N], axis=-1)
        if self.clip:
            p, nn = np.maximum(p, 0.0), np.maximum(nn, 0.0)
        return p, nn


def _validation_points(m, B, seed=0, k=_GRID_POINTS):
    rng = np.random.default_rng(seed)
    corners = np.array(np.meshgrid(*[[0.0, B]] * m)).reshape(m, -1).T
    return np.vstack([rng.random((k, m)) * B, corners]), rng.random(k + len(corners)) * 50.0


def decompose_field(F, m: int | None = None, B: float = 1.0, mode: str = "auto", P=None, N=None,
                    tol: float = 1e-12) -> FieldDecomposition:
    """Split ``F`` into nonnegative parts.

    ``mode="auto"`` takes positive and negative parts; ``mode="user"``
    validates the supplied ``(P, N)`` for nonnegativity and ``P - N = F`` on a
    random grid of ``[0, B]^m``.  ``F`` is a list of polynomials or a callable
    (auto mode only).
    """
    if mode not in ("auto", "user"):
        raise ValueError("mode must be 'auto' or 'user'")
    if callable(F) and not isinstance(F, (list, tuple)):
        if mode == "user":
            raise ModelError("user decompositions need polynomial components")
        if m is None:
            raise ValueError("m is required for a callable field")
        return FieldDecomposition(m, B, None, None, True, "auto", field_fn=F)
    polys = list(F)
    m = len(polys) if m is None else m
    _poly_list(polys, m)
    if mode == "auto":
        return FieldDecomposition(m, B, polys, [-p for p in polys], True, "auto")
    P, N = _poly_list(P, m), _poly_list(N, m)
    pts, ts = _validation_points(m, B)
    for i in range(m):
        pv, nv, fv = P[i](ts, pts), N[i](ts, pts), polys[i](ts, pts)
        if np.any(pv < -tol) or np.any(nv < -tol):
            raise ModelError(f"component {i + 1}: user pair takes negative values on [0, {B}]^{m}")
        err = np.abs(pv - nv - fv)
        if np.any(err > tol * np.maximum(1.0, np.abs(fv))):
            raise ModelError(f"component {i + 1}: P - N differs from F by up to {err.max():.3g}")
    return FieldDecomposition(m, B, P, N, False, "user")


def _unit_jump(i, d, sign):
    jump = [0] * d
    jump[i] = sign
    jump[d - 1] = -sign
    return tuple(jump)


def _scaled(poly: Polynomial, factor: float, d: int) -> Polynomial:
    return poly.scale(factor).embed(d)


def _check_build(alpha, n, m):
    if not alpha > 0:
        raise ModelError("alpha must be positive")
    if m + 1 < 2:
        raise ModelError("a constructed model needs at least two classes")
    if n is not None and n < m + 1:
        raise ModelError("n must be at least the number of classes")


def _domain_ok(dec: FieldDecomposition):
    if dec.m * dec.B > 1.0 + 1e-12:
        raise ModelError(f"[0, {dec.B}]^{dec.m} does not fit the unit simplex; use B <= 1/{dec.m}")


def build_population_model(dec: FieldDecomposition, alpha: float, n: int | None = None,
                           with_n_scaling: bool = True, provenance: str = "procedure 1") -> PopulationModel:
    """Two channels per class: ``+e_i - e_d`` at ``alpha P_i`` and the mirror at ``alpha N_i``.

    Without n-scaling the density rates are divided by ``n`` so the lattice
    intensities equal ``alpha P_i`` literally.
    """
    m = dec.m
    d = m + 1
    _check_build(alpha, n, m)
    _domain_ok(dec)
    if not with_n_scaling and n is None:
        raise ModelError("n is required when n-scaling is disabled")
    factor = alpha if with_n_scaling else alpha / n
    channels = []
    if dec.field_fn is not None:
        for i in range(m):
            for sign in (1, -1):
                channels.append(FunctionChannel(
                    _unit_jump(i, d, sign),
                    lambda t, x, i=i, s=sign: factor * max(s * dec.field_fn(t, x[:m])[i], 0.0),
                    label=f"class {i + 1} {'+' if sign > 0 else '-'}"))
    else:
        for i in range(m):
            channels.append(TransitionChannel(_unit_jump(i, d, 1), _scaled(dec.P[i], factor, d), dec.clip,
                                              f"class {i + 1} +"))
            channels.append(TransitionChannel(_unit_jump(i, d, -1), _scaled(dec.N[i], factor, d), dec.clip,
                                              f"class {i + 1} -"))
    meta = {"provenance": provenance, "alpha": alpha, "n": n, "with_n_scaling": with_n_scaling,
            "B": dec.B, "mode": dec.mode}
    if dec.rescale is not None:
        meta["rescale"] = dec.rescale.to_dict()
    return PopulationModel(d, Simplex(d, 1.0), tuple(channels), conserved=(1,) * d, check_boundary=False,
                           meta=meta)


def build_sign_model(F, alpha: float, n: int | None = None, m: int | None = None, B: float = 1.0,
                     with_n_scaling: bool = True) -> PopulationModel:
    """One signed channel per class: jump ``sgn(a) (e_i - e_d)`` at rate ``|a|``, ``a = alpha F_i``.

    Each signed channel is stored as its two directed halves; a direction is
    omitted when ``F_i`` never takes that sign on the validation grid.
    """
    dec = decompose_field(F, m=m, B=B, mode="auto")
    model = build_population_model(dec, alpha, n, with_n_scaling, provenance="procedure 2")
    pts, ts = _validation_points(dec.m, B, seed=1)
    fv = dec.F(ts, pts)
    keep = []
    for k, ch in enumerate(model.channels):
        i, sign = k // 2, (1 if k % 2 == 0 else -1)
        if np.any(sign * fv[:, i] > 0.0):
            keep.append(ch)
    if not keep:
        keep = list(model.channels[:1])
    return PopulationModel(model.d, model.domain, tuple(keep), model.conserved, False, dict(model.meta))


def restricted_drift(model: PopulationModel, t, x) -> np.ndarray:
    """Channel-sum drift ``sum_l l * beta_l(t, x)`` restricted to the non-reservoir classes."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(model.d)
    for ch in model.channels:
        out += np.asarray(ch.jump, dtype=float) * float(ch.beta(t, x))
    return out[: model.d - 1]


def full_state(x) -> np.ndarray:
    """Append the reservoir density ``1 - sum(x)``."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, [1.0 - x.sum()]])


# ---------------------------------------------------------------------------
# Lorenz


LORENZ_BOX = ((-20.0, 20.0), (-27.0, 27.0), (0.0, 50.0))


def lorenz_field(a: float = 10.0, b: float = 28.0, c: float = 8.0 / 3.0) -> Callable:
    def fn(t, X):
        X = np.asarray(X, dtype=float)
        return np.array([a * (X[1] - X[0]), X[0] * (b - X[2]) - X[1], X[0] * X[1] - c * X[2]])

    return fn


def lorenz_polynomials(a, b, c, rescale: AffineRescale) -> list[Polynomial]:
    """The Lorenz field in rescaled coordinates as polynomials in ``x``."""
    m = 3
    X = [Polynomial.variable(j, m).scale(1.0 / rescale.scale[j]) + Polynomial.constant(-rescale.shift[j], m)
         for j in range(m)]
    one = Polynomial.constant(1.0, m)
    F = [
        (X[1] - X[0]).scale(a),
        X[0] * (one.scale(b) - X[2]) - X[1],
        X[0] * X[1] - X[2].scale(c),
    ]
    return [F[i].scale(rescale.scale[i]).simplify() for i in range(m)]


def displayed_lorenz_pair(a, b, c):
    """The six literal Lorenz intensities, as ``(P, N)`` without the factor ``alpha``."""
    m = 3
    x1, x2, x3 = (Polynomial.variable(j, m) for j in range(m))
    one = Polynomial.constant(1.0, m)
    P = [
        (x1 + one.scale(0.25)).scale(a),
        x3.scale(c) + (x1 + x2).scale(24.0),
        x1.scale(2.0 * b / 3.0) + x3.scale(50.0 / 3.0) + one.scale(0.5),
    ]
    N = [
        (x1 * x3).scale(100.0 / 3.0) + x2 + one.scale(b / 3.0),
        x2.scale(1.5 * a),
        (x1 * x2).scale(48.0) + one.scale(12.0),
    ]
    return [p.simplify() for p in P], [q.simplify() for q in N]


def lorenz_model(a: float = 10.0, b: float = 28.0, c_param: float = 8.0 / 3.0, alpha: float = 0.015,
                 n: int | None = 6000, *, variant: str = "rescaled", box=LORENZ_BOX, B: float = 1.0 / 3.0,
                 decomposition: str = "auto", with_n_scaling: bool = True) -> PopulationModel:
    """Four-class process whose first three densities follow a Lorenz system.

    ``variant="rescaled"`` (default) maps ``box`` onto ``[0, B]^3`` and
    realizes the exact rescaled Lorenz field, split into positive and
    negative parts (``decomposition="auto"``) or by monomial sign
    (``"monomial"``).  ``variant="displayed"`` uses the six literal rate
    formulas, which are not an affine image of the Lorenz field.
    """
    if min(a, b, c_param) <= 0:
        raise ModelError("Lorenz parameters must be positive")
    if variant == "displayed":
        P, N = displayed_lorenz_pair(a, b, c_param)
        F = [(p - q).simplify() for p, q in zip(P, N)]
        dec = decompose_field(F, B=B, mode="user", P=P, N=N)
        model = build_population_model(dec, alpha, n, with_n_scaling, provenance="lorenz preset (displayed)")
    elif variant == "rescaled":
        rescale = affine_rescale(box, B)
        F = lorenz_polynomials(a, b, c_param, rescale)
        if decomposition == "auto":
            dec = decompose_field(F, B=B, mode="auto")
        elif decomposition == "monomial":
            parts = [f.split_by_sign() for f in F]
            dec = decompose_field(F, B=B, mode="user", P=[p for p, _ in parts], N=[q for _, q in parts])
        else:
            raise ValueError("decomposition must be 'auto' or 'monomial'")
        dec.rescale = rescale
        model = build_population_model(dec, alpha, n, with_n_scaling, provenance="lorenz preset")
    else:
        raise ValueError("variant must be 'rescaled' or 'displayed'")
    model.meta.update({"a": a, "b": b, "c": c_param, "variant": variant, "box": [list(r) for r in box]})
    return model


def lorenz_start(rescale: AffineRescale, n: int, X0=(1.0, 1.0, 20.0)) -> np.ndarray:
    """Lattice state for the original-coordinate start ``X0`` (reservoir last)."""
    from .analysis import lattice_state

    return lattice_state(full_state(rescale.forward(X0)), n)


def count_sign_changes(values: Sequence[float], threshold: float = 1.0) -> int:
    """Sign changes of a series, counted with hysteresis: a new sign registers only once ``|v| >= threshold``."""
    count = 0
    current = 0
    for v in values:
        if v >= threshold:
            s = 1
        elif v <= -threshold:
            s = -1
        else:
            continue
        if current and s != current:
            count += 1
        current = s
    return count


def inflate_box(box, fraction: float = 0.1) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    w = box[:, 1] - box[:, 0]
    return np.stack([box[:, 0] - fraction * w, box[:, 1] + fraction * w], axis=1)


def inside_fraction(X: np.ndarray, box) -> float:
    box = np.asarray(box, dtype=float)
    inside = np.all((X >= box[:, 0]) & (X <= box[:, 1]), axis=1)
    return float(inside.mean())


def model_drift_field(model: PopulationModel) -> Callable:
    """Mean-field field on the first ``d - 1`` densities (reservoir implied)."""
    m = model.d - 1

    def fn(t, x):
        return restricted_drift(model, t, full_state(x[:m]))

    return fn


@dataclass
class LorenzRun:
    times: np.ndarray
    X: np.ndarray  # original coordinates, shape (k, 3)
    sign_changes: int
    inside_fraction: float
    n_events: int
    meta: dict = field(default_factory=dict)


def lorenz_experiment(n: int = 6000, alpha: float = 0.015, events: int = 1_000_000, seed: int = 0,
                      a: float = 10.0, b: float = 28.0, c_param: float = 8.0 / 3.0, record_every: int = 1,
                      X0=(1.0, 1.0, 20.0), engine: str = "thinning", backend=None) -> LorenzRun:
    """Simulate the Lorenz preset for a fixed number of events and summarize the two-lobe structure."""
    from .simulate import simulate

    model = lorenz_model(a, b, c_param, alpha, n)
    rescale = affine_rescale(LORENZ_BOX, model.meta["B"])
    x0 = lorenz_start(rescale, n, X0)
    path = simulate(model, n, x0, math.inf, seed, engine=engine, max_events=events, record_every=record_every,
                    backend=backend)
    X = rescale.inverse(path.density[:, :3])
    return LorenzRun(path.times, X, count_sign_changes(X[:, 0]), inside_fraction(X, inflate_box(LORENZ_BOX)),
                     path.n_events, {"alpha": alpha, "n": n, "seed": seed})
