"""Optimal control of the SIS limit through the rates ``lam(t)`` and ``mu(t)``.

The state is the susceptible density ``x`` with ``y = c - x`` infected.  The
running reward is ``R(x) - C(y) - Cl(lam - lam_hat) - Cm(mu - mu_hat)`` and
objectives are maximized (the aggregating operator on the integral is the
identity).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import lattice_state
from .errors import ControlError, IntegrationError
from .meanfield import integrate
from .model import drift_field, make_sis
from .rates import RateFunction, as_rate
from .simulate import simulate_ensemble

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
REWARD_FORMS = ("linear", "quadratic", "piecewise_linear")


@dataclass(frozen=True)
class RewardFunction:
    """Scalar reward or cost from the registry.

    ``linear(rate)`` is ``rate * v``, ``quadratic(coef)`` is ``coef * v^2`` and
    ``piecewise_linear`` interpolates its knots, held constant outside them.
    """

    form: str
    params: tuple[float, ...] = ()
    knots: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.form not in REWARD_FORMS:
            raise ControlError(f"unknown reward form {self.form!r}")
        if self.form in ("linear", "quadratic") and len(self.params) != 1:
            raise ControlError(f"{self.form} takes exactly one parameter")
        if self.form == "piecewise_linear":
            kt = [k[0] for k in self.knots]
            if not kt or any(b <= a for a, b in zip(kt, kt[1:])):
                raise ControlError("piecewise_linear knots must be non-empty with increasing abscissae")

    @classmethod
    def linear(cls, rate: float) -> RewardFunction:
        return cls("linear", (float(rate),))

    @classmethod
    def quadratic(cls, coef: float) -> RewardFunction:
        return cls("quadratic", (float(coef),))

    @classmethod
    def piecewise_linear(cls, knots) -> RewardFunction:
        return cls("piecewise_linear", (), tuple((float(a), float(b)) for a, b in knots))

    @classmethod
    def zero(cls) -> RewardFunction:
        return cls.linear(0.0)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.form == "linear":
            out = self.params[0] * v
        elif self.form == "quadratic":
            out = self.params[0] * v * v
        else:
            out = np.interp(v, [k[0] for k in self.knots], [k[1] for k in self.knots])
        return float(out) if out.ndim == 0 else out

    def breakpoints(self) -> list[float]:
        return [k[0] for k in self.knots] if self.form == "piecewise_linear" else []

    def to_dict(self) -> dict:
        if self.form == "linear":
            return {"form": "linear", "rate": self.params[0]}
        if self.form == "quadratic":
            return {"form": "quadratic", "coef": self.params[0]}
        return {"form": "piecewise_linear", "knots": [list(k) for k in self.knots]}

    @classmethod
    def from_dict(cls, spec) -> RewardFunction:
        if isinstance(spec, RewardFunction):
            return spec
        form = spec.get("form")
        try:
            if form == "linear":
                return cls.linear(spec["rate"])
            if form == "quadratic":
                return cls.quadratic(spec["coef"])
            if form == "piecewise_linear":
                return cls.piecewise_linear(spec["knots"])
        except KeyError as exc:
            raise ControlError(f"reward spec {form!r} is missing field {exc}") from None
        raise ControlError(f"unknown reward form {form!r}")


def _as_reward(v) -> RewardFunction:
    if v is None:
        return RewardFunction.zero()
    if isinstance(v, RewardFunction):
        return v
    return RewardFunction.from_dict(v)


@dataclass(frozen=True)
class RewardSpec:
    R: RewardFunction
    C: RewardFunction
    C_lam: RewardFunction = field(default_factory=RewardFunction.zero)
    C_mu: RewardFunction = field(default_factory=RewardFunction.zero)
    lam_hat: RateFunction = field(default_factory=lambda: RateFunction.constant(0.0))
    mu_hat: RateFunction = field(default_factory=lambda: RateFunction.constant(0.0))
    c: float = 1.0
    terminal: RewardFunction = field(default_factory=RewardFunction.zero)

    def __post_init__(self):
        for name in ("R", "C", "C_lam", "C_mu", "terminal"):
            object.__setattr__(self, name, _as_reward(getattr(self, name)))
        object.__setattr__(self, "lam_hat", as_rate(self.lam_hat))
        object.__setattr__(self, "mu_hat", as_rate(self.mu_hat))
        if not self.c > 0:
            raise ControlError("total density c must be positive")
        for name in ("C_lam", "C_mu"):
            if getattr(self, name)(0.0) != 0.0:
                raise ControlError(f"{name} must vanish at zero deviation")

    def state_reward(self, x):
        x = np.asarray(x, dtype=float)
        return self.R(x) - self.C(self.c - x)

    def running(self, t, x, lam, mu):
        return (self.state_reward(x) - self.C_lam(lam - self.lam_hat(t)) - self.C_mu(mu - self.mu_hat(t)))

    def check_costs(self, lam_range, mu_range, t_span=(0.0, 1.0)) -> None:
        """Control costs must be nonnegative over the reachable deviation ranges."""
        ts = np.linspace(t_span[0], t_span[1], 51)
        for name, fn, rng_, hat in (("C_lam", self.C_lam, lam_range, self.lam_hat),
                                    ("C_mu", self.C_mu, mu_range, self.mu_hat)):
            vals = np.linspace(rng_[0], rng_[1], 201)[:, None] - np.atleast_1d(hat(ts))[None, :]
            if np.any(fn(vals) < -1e-12):
                raise ControlError(f"{name} is negative on the admissible deviation range")

    def to_dict(self) -> dict:
        return {"R": self.R.to_dict(), "C": self.C.to_dict(), "C_lam": self.C_lam.to_dict(),
                "C_mu": self.C_mu.to_dict(), "lam_hat": self.lam_hat.to_dict(), "mu_hat": self.mu_hat.to_dict(),
                "c": self.c, "terminal": self.terminal.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> RewardSpec:
        kw = {k: d[k] for k in ("R", "C", "C_lam", "C_mu", "terminal") if k in d}
        for k in ("lam_hat", "mu_hat"):
            if k in d:
                kw[k] = as_rate(d[k])
        if "c" in d:
            kw["c"] = float(d["c"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# policies


@dataclass
class ControlPolicy:
    """Rates ``(lam, mu)`` as functions of time.

    ``kind`` is ``stationary`` (one value each), ``piecewise_constant``
    (``grid`` holds K+1 interval edges, values one per interval) or
    ``piecewise_linear`` (values at the ``grid`` knots).  ``bounds`` may hold
    rate-of-change limits ``theta_lam = (lo, hi)`` and ``theta_mu``.
    """

    grid: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    kind: str = "piecewise_constant"
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.atleast_1d(np.asarray(self.grid, dtype=float))
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if self.kind not in ("stationary", "piecewise_constant", "piecewise_linear"):
            raise ControlError(f"unknown policy kind {self.kind!r}")
        expected = {"stationary": 1, "piecewise_constant": len(self.grid) - 1,
                    "piecewise_linear": len(self.grid)}[self.kind]
        if len(self.lam) != expected or len(self.mu) != expected:
            raise ControlError(f"{self.kind} policy needs {expected} values per rate")
        if self.kind != "stationary" and np.any(np.diff(self.grid) <= 0):
            raise ControlError("policy grid must be strictly increasing")
        if np.any(self.lam < 0) or np.any(self.mu < 0):
            raise ControlError("policy rates must be nonnegative")

    @classmethod
    def stationary(cls, lam: float, mu: float) -> ControlPolicy:
        return cls(np.array([0.0]), np.array([lam]), np.array([mu]), "stationary")

    def _eval(self, vals, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "stationary":
            out = np.full(t.shape, vals[0])
        elif self.kind == "piecewise_linear":
            out = np.interp(t, self.grid, vals)
        else:
            idx = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, len(vals) - 1)
            out = vals[idx]
        return float(out) if out.ndim == 0 else out

    def lambda_at(self, t):
        return self._eval(self.lam, t)

    def mu_at(self, t):
        return self._eval(self.mu, t)

    def rate_functions(self, ramp: float = 1e-9) -> tuple[RateFunction, RateFunction]:
        """Continuous rate functions realizing the policy.

        Piecewise-constant policies switch over a linear ramp of width
        ``ramp`` starting at each interior edge, since rate functions are
        continuous by construction.
        """
        if self.kind == "stationary":
            return RateFunction.constant(self.lam[0]), RateFunction.constant(self.mu[0])
        if self.kind == "piecewise_linear":
            return (RateFunction.piecewise_linear(zip(self.grid, self.lam)),
                    RateFunction.piecewise_linear(zip(self.grid, self.mu)))
        knots_t = [self.grid[0]]
        for e in self.grid[1:-1]:
            knots_t += [e, e + ramp]
        knots_t.append(self.grid[-1])

        def build(vals):
            kv = [vals[0]]
            for k in range(1, len(vals)):
                kv += [vals[k - 1], vals[k]]
            kv.append(vals[-1])
            return RateFunction.piecewise_linear(zip(knots_t, kv))

        return build(self.lam), build(self.mu)

    def slopes(self):
        if self.kind == "stationary":
            return np.zeros(0), np.zeros(0)
        if self.kind == "piecewise_linear":
            dt = np.diff(self.grid)
            return np.diff(self.lam) / dt, np.diff(self.mu) / dt
        mids = 0.5 * (self.grid[1:] + self.grid[:-1])
        dt = np.diff(mids)
        return np.diff(self.lam) / dt, np.diff(self.mu) / dt

    def satisfies_bounds(self, tol: float = 1e-9) -> bool:
        if np.any(self.lam < 0) or np.any(self.mu < 0):
            return False
        sl, sm = self.slopes()
        for key, s in (("theta_lam", sl), ("theta_mu", sm)):
            if key in self.bounds and len(s):
                lo, hi = self.bounds[key]
                if np.any(s < lo - tol) or np.any(s > hi + tol):
                    return False
        return True

    def to_dict(self) -> dict:
        return {"kind": self.kind, "grid": self.grid.tolist(), "lambda": self.lam.tolist(),
                "mu": self.mu.tolist(), "bounds": {k: list(v) for k, v in self.bounds.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> ControlPolicy:
        return cls(np.array(d["grid"]), np.array(d["lambda"]), np.array(d["mu"]),
                   d.get("kind", "piecewise_constant"), {k: tuple(v) for k, v in d.get("bounds", {}).items()})

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> ControlPolicy:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# 1-D maximization


def _golden_argmax(f, a, b, tol=1e-13, max_iter=300):
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a), abs(b)):
            break
        if f1 >= f2:  # ties move left
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def grid_golden_max(f, lo: float, hi: float, points: int = 10001, edge_error: bool = False):
    """Global maximum of a vectorized ``f`` on ``[lo, hi]``: dense grid, then golden refinement.

    Ties (within 1e-12 relative) resolve to the smallest argument.
    """
    xs = np.linspace(lo, hi, points)
    vals = np.asarray(f(xs), dtype=float)
    top = float(vals.max())
    tie = 1e-12 * max(1.0, abs(top))
    j = int(np.argmax(vals >= top - tie))
    if edge_error and j == points - 1 and vals[-1] > vals[-2] + tie:
        raise ControlError("objective still increasing at the upper search limit; enlarge the search range")
    x_best, v_best = float(xs[j]), float(vals[j])
    a, b = xs[max(j - 1, 0)], xs[min(j + 1, points - 1)]
    if b > a:
        xr, vr = _golden_argmax(lambda s: float(f(np.array([s]))[0]), float(a), float(b))
        if vr > v_best + tie:
            x_best, v_best = float(xr), float(vr)
    return x_best, v_best


def stationary_objective(spec: RewardSpec, lam: float) -> Callable:
    c = spec.c
    mu_hat = spec.mu_hat(0.0)

    def g(mu):
        mu = np.asarray(mu, dtype=float)
        x = np.minimum(c, mu / lam)
        y = np.maximum(c - mu / lam, 0.0)
        return spec.R(x) - spec.C(y) - spec.C_mu(mu - mu_hat)

    return g


def stationary_cure_rate(spec: RewardSpec, lam: float, mu_max: float | None = None, points: int = 10001):
    """Equilibrium-optimal constant cure rate for a fixed infection rate."""
    if not lam > 0:
        raise ControlError("lambda must be positive")
    if not spec.mu_hat.is_constant:
        raise ControlError("stationary control needs a constant base cure rate")
    mu_max = 10.0 * lam * spec.c if mu_max is None else float(mu_max)
    spec.check_costs((0.0, 0.0), (0.0, mu_max))
    try:
        return grid_golden_max(stationary_objective(spec, lam), 0.0, mu_max, points, edge_error=True)
    except ControlError as exc:
        raise ControlError(f"{exc}; pass a larger mu_max (currently {mu_max})") from None


def ideal_trajectory_policy(x_star: float, lam_cap: float, spec: RewardSpec | None = None) -> ControlPolicy:
    """Rates as large as the cap allows with ``mu / lam = x_star``."""
    if not lam_cap > 0:
        raise ControlError("lam_cap must be positive")
    if spec is not None and not 0.0 <= x_star <= spec.c:
        raise ControlError("x_star must lie in [0, c]")
    return ControlPolicy.stationary(lam_cap, lam_cap * x_star)


def best_state(spec: RewardSpec, lo: float, hi: float, points: int = 10001) -> float:
    """``argmax_x R(x) - C(c - x)`` over ``[lo, hi]``."""
    if hi - lo <= 0.0:
        return float(lo)
    return grid_golden_max(spec.state_reward, lo, hi, points)[0]


def _ramp(start, targets, dts, lo, hi):
    vals = [float(start)]
    for tgt, dt in zip(targets[1:], dts):
        prev = vals[-1]
        vals.append(max(0.0, min(max(tgt, prev + lo * dt), prev + hi * dt)))
    return np.array(vals)


def constrained_ideal_policy(spec: RewardSpec, x_star: float, delta: float, theta_lam=(-math.inf, math.inf),
                             theta_mu=(-math.inf, math.inf), grid=None, lam_cap: float = 50.0,
                             lam0: float | None = None, mu0: float | None = None) -> ControlPolicy:
    """Track ``x_hat(t)``, the best state within ``delta`` of ``x_star``, under slope limits.

    Targets are ``lam = lam_cap`` and ``mu = lam_cap * x_hat``; from the
    initial rates (default: the base rates at the first knot) each rate moves
    toward its target as fast as the ``theta`` limits allow.
    """
    for name, th in (("theta_lam", theta_lam), ("theta_mu", theta_mu)):
        if not th[0] < th[1]:
            raise ControlError(f"infeasible {name} bounds {th}")
    if delta < 0:
        raise ControlError("delta must be nonnegative")
    grid = np.linspace(0.0, 10.0, 33) if grid is None else np.asarray(grid, dtype=float)
    lo, hi = max(0.0, x_star - delta), min(spec.c, x_star + delta)
    x_hat = np.array([best_state(spec, lo, hi) if delta > 0 else x_star for _ in grid])
    lam_t = np.full(len(grid), float(lam_cap))
    mu_t = lam_cap * x_hat
    dts = np.diff(grid)
    lam0 = spec.lam_hat(grid[0]) if lam0 is None else lam0
    mu0 = spec.mu_hat(grid[0]) if mu0 is None else mu0
    if not (math.isinf(theta_lam[0]) and math.isinf(theta_lam[1])):
        lam_v = _ramp(lam0, lam_t, dts, *theta_lam)
    else:
        lam_v = lam_t
    if not (math.isinf(theta_mu[0]) and math.isinf(theta_mu[1])):
        mu_v = _ramp(mu0, mu_t, dts, *theta_mu)
    else:
        mu_v = mu_t
    return ControlPolicy(grid, lam_v, mu_v, "piecewise_linear",
                         {"theta_lam": tuple(theta_lam), "theta_mu": tuple(theta_mu)})


# ---------------------------------------------------------------------------
# finite-horizon direct shooting


_PENALTY = -1e12


def riccati_flow(x0, lam, mu, c: float, t):
    """Exact solution of ``x' = (lam x - mu)(x - c)`` with constant rates.

    With ``u = x - c`` the equation is Bernoulli, ``u' = lam u^2 + k u`` with
    ``k = lam c - mu``; the two algebraic forms below avoid overflow of
    ``exp(k t)`` for either sign of ``k``.  Arguments broadcast.
    """
    x0, lam, mu, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x0, lam, mu, t)))
    u0 = x0 - c
    k = lam * c - mu
    kt = k * t
    small = np.abs(k) < 1e-300
    ksafe = np.where(small, 1.0, k)
    with np.errstate(over="ignore", invalid="ignore"):
        pos = k > 0
        e_neg = np.exp(-np.where(pos, kt, 0.0))
        g_pos = -np.expm1(-np.where(pos, kt, 0.0)) / ksafe
        u_pos = u0 / (e_neg - lam * u0 * g_pos)
        g_neg = np.where(small, t, np.expm1(np.where(pos, 0.0, kt)) / ksafe)
        u_neg = u0 * np.exp(np.where(pos, 0.0, kt)) / (1.0 - lam * u0 * g_neg)
    return c + np.where(pos, u_pos, u_neg)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


def _state_kinks(spec: RewardSpec) -> np.ndarray:
    """States in ``(0, c)`` where the state reward has a kink."""
    c = spec.c
    pts = list(spec.R.breakpoints()) + [c - b for b in spec.C.breakpoints()]
    pts = np.unique(np.asarray(pts, dtype=float))
    return pts[(pts > 0.0) & (pts < c)]


def _crossing_times(x0, lam, mu, c: float, level: float, span: float, iters: int = 60):
    """Time at which the monotone constant-rate flow from ``x0`` reaches ``level``, by bisection."""
    lo = np.zeros_like(x0)
    hi = np.full_like(x0, span)
    side = np.sign(x0 - level)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        same = np.sign(riccati_flow(x0, lam, mu, c, mid) - level) == side
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def evaluate_policies(spec: RewardSpec, x0: float, edges, lam_vals, mu_vals, panels: int = 8):
    """Objective of many piecewise-constant policies at once.

    ``lam_vals`` and ``mu_vals`` have shape ``(m, K)``.  On each control
    interval the state follows the exact constant-rate solution, which is
    monotone, so each kink of the state reward is crossed at most once.  The
    interval is split at those crossing times and the running reward is
    integrated by 4-point Gauss-Legendre on ``panels`` sub-panels per piece.
    """
    lam_vals = np.atleast_2d(np.asarray(lam_vals, dtype=float))
    mu_vals = np.atleast_2d(np.asarray(mu_vals, dtype=float))
    m, K = lam_vals.shape
    c = spec.c
    kinks = _state_kinks(spec)
    # normalised panel nodes and weights on [0, 1]
    pe = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(pe)
    un = ((pe[:-1] + half)[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    wn = (half[:, None] * _GL_W[None, :]).ravel()
    x = np.full(m, float(x0))
    total = np.zeros(m)
    for k in range(K):
        a, b = float(edges[k]), float(edges[k + 1])
        if b <= a:
            continue
        span = b - a
        lk, mk = lam_vals[:, k], mu_vals[:, k]
        x_end = riccati_flow(x, lk, mk, c, span)
        cuts = np.full((m, kinks.size), span)
        for j, level in enumerate(kinks):
            hit = (x - level) * (x_end - level) < 0
            if np.any(hit):
                cuts[hit, j] = _crossing_times(x[hit], lk[hit], mk[hit], c, level, span)
        bounds = np.sort(np.concatenate([np.zeros((m, 1)), cuts, np.full((m, 1), span)], axis=1), axis=1)
        seg = np.diff(bounds, axis=1)
        s = (bounds[:, :-1, None] + seg[:, :, None] * un[None, None, :]).reshape(m, -1)
        w = (seg[:, :, None] * wn[None, None, :]).reshape(m, -1)
        xs = riccati_flow(x[:, None], lk[:, None], mk[:, None], c, s)
        r = spec.running(a + s, xs, lk[:, None], mk[:, None])
        total += np.sum(r * w, axis=1)
        x = x_end
    return total + spec.terminal(x)


def evaluate_policies_ode(spec: RewardSpec, x0: float, edges, lam_vals, mu_vals, rtol=1e-9, atol=1e-11):
    """Same objective as ``evaluate_policies`` by adaptive Runge-Kutta; used as a cross-check."""
    lam_vals = np.atleast_2d(np.asarray(lam_vals, dtype=float))
    mu_vals = np.atleast_2d(np.asarray(mu_vals, dtype=float))
    m, K = lam_vals.shape
    c = spec.c
    state = np.concatenate([np.full(m, float(x0)), np.zeros(m)])
    for k in range(K):
        lk, mk = lam_vals[:, k], mu_vals[:, k]

        def fn(t, s, lk=lk, mk=mk):
            x = s[:m]
            return np.concatenate([(lk * x - mk) * (x - c), spec.running(t, x, lk, mk)])

        if edges[k + 1] > edges[k]:
            traj = integrate(fn, state, (edges[k], edges[k + 1]), rtol=rtol, atol=atol, norm="max")
            state = traj.y[-1]
    return state[m:] + spec.terminal(state[:m])


@dataclass
class ControlResult:
    policy: ControlPolicy
    value: float
    log: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def log_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "start", "phase", "best_value"])
            for row in self.log:
                w.writerow([row["iteration"], row["start"], row["phase"], repr(row["best_value"])])


def finite_horizon_control(spec: RewardSpec, x0: float, T: float, K: int = 32, lam_box=(0.0, 50.0),
                           mu_box=(0.0, 50.0), seed: int = 0, starts: int = 5, max_iter: int = 100,
                           step_tol: float = 1e-3, ftol: float = 1e-9, polish_iter: int = 20,
                           panels: int = 8) -> ControlResult:
    """Direct single shooting with piecewise-constant rates on ``K`` equal intervals.

    Rollouts use the exact per-interval state solution with Gauss-Legendre
    quadrature of the running reward (see ``evaluate_policies``).

    Each start runs a compass search polling all ``+-step`` coordinate moves
    in one batched rollout, also trying the sum of all improving moves, and
    halving the step when no poll improves; the best
    point is then polished by projected ascent on central-difference
    gradients.  Candidates whose rollout fails get a large penalty and are
    recorded in ``rejected``.
    """
    if K < 1:
        raise ControlError("K must be >= 1")
    if T < 0:
        raise ControlError("T must be nonnegative")
    lo = np.array([lam_box[0]] * K + [mu_box[0]] * K, dtype=float)
    hi = np.array([lam_box[1]] * K + [mu_box[1]] * K, dtype=float)
    if np.any(hi < lo) or np.any(lo < 0):
        raise ControlError("control boxes must satisfy 0 <= lower <= upper")
    spec.check_costs(lam_box, mu_box, (0.0, max(T, 1e-12)))
    width = hi - lo
    free = np.flatnonzero(width > 0)
    edges = np.linspace(0.0, T, K + 1)
    rng = np.random.default_rng(seed)
    result = ControlResult(None, -math.inf)

    def evaluate(U):
        U = np.atleast_2d(U)
        try:
            vals = evaluate_policies(spec, x0, edges, U[:, :K], U[:, K:], panels)
        except (IntegrationError, FloatingPointError) as exc:
            if len(U) == 1:
                result.rejected.append({"policy": U[0].tolist(), "reason": str(exc)})
                return np.array([_PENALTY])
            return np.concatenate([evaluate(u) for u in U])
        bad = ~np.isfinite(vals)
        for j in np.flatnonzero(bad):
            result.rejected.append({"policy": U[j].tolist(), "reason": "non-finite objective"})
        return np.where(bad, _PENALTY, vals)

    best_u, best_v = None, -math.inf
    it = 0
    for s in range(starts):
        u = lo + 0.5 * width if s == 0 else lo + rng.random(2 * K) * width
        v = float(evaluate(u)[0])
        step = 0.25
        for _ in range(max_iter):
            if step < step_tol or len(free) == 0:
                break
            polls = []
            for i in free:
                for sgn in (1.0, -1.0):
                    p = u.copy()
                    p[i] = np.clip(p[i] + sgn * step * width[i], lo[i], hi[i])
                    polls.append(p)
            polls = np.array(polls)
            vals = evaluate(polls)
            gain = vals > v + ftol * max(1.0, abs(v))
            j = int(np.argmax(vals))
            if gain[j]:
                cand_u, cand_v = polls[j], float(vals[j])
                if gain.sum() > 1:
                    # speculative step combining every improving coordinate move
                    comb = np.clip(u + (polls[gain] - u).sum(axis=0), lo, hi)
                    vc = float(evaluate(comb)[0])
                    if vc > cand_v:
                        cand_u, cand_v = comb, vc
                u, v = cand_u, cand_v
            else:
                step *= 0.5
            if v > best_v:
                best_u, best_v = u.copy(), v
            it += 1
            result.log.append({"iteration": it, "start": s, "phase": "pattern", "best_value": best_v})
        if v > best_v:
            best_u, best_v = u.copy(), v
    # gradient polish
    u, v = best_u.copy(), best_v
    h = 1e-6 * np.maximum(width, 1e-12)
    for _ in range(polish_iter if len(free) else 0):
        P = np.repeat(u[None, :], 2 * len(free), axis=0)
        for r, i in enumerate(free):
            P[2 * r, i] = min(u[i] + h[i], hi[i])
            P[2 * r + 1, i] = max(u[i] - h[i], lo[i])
        vals = evaluate(P)
        g = np.zeros_like(u)
        for r, i in enumerate(free):
            g[i] = (vals[2 * r] - vals[2 * r + 1]) / (P[2 * r, i] - P[2 * r + 1, i])
        if not np.any(g):
            break
        scales = 0.1 * 0.5 ** np.arange(12)
        d = g * width / max(np.abs(g * width).max(), 1e-300)
        cands = np.clip(u[None, :] + scales[:, None] * (d * width)[None, :], lo, hi)
        cv = evaluate(cands)
        j = int(np.argmax(cv))
        improved = cv[j] > v + 1e-14 * max(1.0, abs(v))
        if improved:
            u, v = cands[j], float(cv[j])
        it += 1
        result.log.append({"iteration": it, "start": -1, "phase": "polish", "best_value": max(v, best_v)})
        if not improved:
            break
    if v > best_v:
        best_u, best_v = u, v
    result.policy = ControlPolicy(edges, best_u[:K], best_u[K:], "piecewise_constant")
    result.value = float(best_v)
    return result


def rollout_value(spec: RewardSpec, x0: float, policy: ControlPolicy, T: float) -> float:
    """Objective of a fixed policy under the mean-field dynamics."""
    if policy.kind == "stationary":
        edges = np.array([0.0, T])
        return float(evaluate_policies(spec, x0, edges, policy.lam[None, :], policy.mu[None, :])[0])
    if policy.kind == "piecewise_constant":
        return float(evaluate_policies(spec, x0, policy.grid, policy.lam[None, :], policy.mu[None, :])[0])
    lam_r, mu_r = policy.rate_functions()
    c = spec.c

    def fn(t, s):
        x = s[0]
        lv, mv = lam_r(t), mu_r(t)
        return np.array([(lv * x - mv) * (x - c), spec.running(t, x, lv, mv)])

    traj = integrate(fn, [x0, 0.0], (0.0, T), rtol=1e-9, atol=1e-11)
    return float(traj.y[-1, 1] + spec.terminal(traj.y[-1, 0]))


# ---------------------------------------------------------------------------
# mean-field control gap


@dataclass
class GapReport:
    n: list[int]
    J_hat: list[float]
    se: list[float]
    J_ode: float
    gap: list[float]
    paths: int
    seed: int

    @property
    def decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.gap, self.gap[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "J_hat", "se", "J_ode", "gap"])
            for n, j, s, g in zip(self.n, self.J_hat, self.se, self.gap):
                w.writerow([n, repr(float(j)), repr(float(s)), repr(float(self.J_ode)), repr(float(g))])


class PathCost:
    """Running cost integrated exactly along a piecewise-constant path plus a terminal cost."""

    def __init__(self, c1, c2):
        self.c1, self.c2 = c1, c2

    def __call__(self, path):
        z = path.density
        total = 0.0
        if self.c1 is not None:
            dt = np.diff(np.append(path.times, path.horizon))
            total = float(np.sum(np.asarray([self.c1(zi) for zi in z]) * dt))
        if self.c2 is not None:
            total += float(self.c2(path.final_state / path.n))
        return total


class L1Terminal:
    """``|z - target|_1``; picklable so ensembles can run in worker processes."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def __call__(self, z):
        return float(np.abs(np.asarray(z, dtype=float) - self.target).sum())


def mean_field_control_gap(policy: ControlPolicy, z0, T: float, n_list, paths: int, seed: int = 0,
                           c1=None, c2="l1_terminal", model_family=None, engine: str = "thinning",
                           threads: int = 1) -> GapReport:
    """Monte-Carlo ``J_n`` under a fixed policy versus the ODE value ``J``.

    Costs are minimized quantities: ``c1(z)`` runs along the path and
    ``c2(z)`` is charged at ``T``.  ``c2="l1_terminal"`` means
    ``|z - Z(T)|_1`` with ``Z`` the mean-field solution.
    """
    model_family = model_family or (lambda pol: make_sis(*pol.rate_functions()))
    model = model_family(policy)
    z0 = np.asarray(z0, dtype=float)
    ref = integrate(drift_field(model), z0, (0.0, T), rtol=1e-11, atol=1e-13)
    if isinstance(c2, str):
        if c2 != "l1_terminal":
            raise ControlError(f"unknown terminal cost {c2!r}")
        c2 = L1Terminal(ref.y[-1])
    J = 0.0
    if c1 is not None:
        run = integrate(lambda t, s: np.array([c1(ref(t))]), [0.0], (0.0, T), rtol=1e-10, atol=1e-12)
        J += float(run.y[-1, 0])
    if c2 is not None:
        J += float(c2(ref.y[-1]))
    stat = PathCost(c1, c2)
    Jh, ses, gaps = [], [], []
    for i, n in enumerate(n_list):
        if c1 is None and c2 is None:
            Jh.append(0.0)
            ses.append(0.0)
            gaps.append(abs(J))
            continue
        ens = simulate_ensemble(model, n, lattice_state(z0, n), T, paths, grid=np.array([0.0, T]),
                                seed=seed + 7919 * i, engine=engine, threads=threads, statistic=stat)
        vals = np.array(ens.statistics)
        Jh.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0)
        gaps.append(abs(Jh[-1] - J))
    return GapReport([int(n) for n in n_list], Jh, ses, J, gaps, int(paths), int(seed))
