"""Convergence experiments and equilibrium/stability analysis of the SIS limit.

The stability tools work on the susceptible density ``x`` of the scalar
SIS field ``x' = lam(t) (x - mu/lam)(x - c)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .meanfield import SampledTrajectory, integrate, sis_scalar_field
from .model import PopulationModel, drift_field
from .rates import as_rate
from .simulate import simulate_ensemble

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def lattice_state(z0, n: int) -> np.ndarray:
    """Round ``n * z0`` to integers while preserving the rounded total."""
    target = np.asarray(z0, dtype=float) * n
    base = np.floor(target).astype(np.int64)
    short = int(round(target.sum())) - int(base.sum())
    if short > 0:
        order = np.argsort(-(target - base), kind="stable")
        base[order[:short]] += 1
    return base


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceReport:
    n: list[int]
    median: list[float]
    q10: list[float]
    q90: list[float]
    paths: int
    slope: float
    slope_se: float
    seed: int = 0

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.median, self.median[1:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "median", "q10", "q90"])
            for row in zip(self.n, self.median, self.q10, self.q90):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def summary(self) -> dict:
        return {"slope": self.slope, "slope_se": self.slope_se, "paths": self.paths, "seed": self.seed,
                "strictly_decreasing": self.strictly_decreasing}


def loglog_slope(ns, values) -> tuple[float, float]:
    """OLS slope of ``log(values)`` against ``log(ns)`` and its standard error."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean()) / sxx)
    if len(x) <= 2:
        return slope, math.nan
    resid = y - y.mean() - slope * xc
    return slope, float(math.sqrt(resid @ resid / (len(x) - 2) / sxx))


def convergence_experiment(model: PopulationModel, z0, horizon: float, n_list, paths: int, seed: int = 0, *,
                           engine: str = "thinning", threads: int = 1, grid=None, tol: float = 1e-10
                           ) -> ConvergenceReport:
    """Sup-norm distance between scaled paths and the mean-field solution for each ``n``.

    Initial lattice states are ``lattice_state(z0, n)``; the reference is the
    ODE solution of the model drift started at ``z0``.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 2:
        raise ValueError("convergence_experiment needs at least two values of n")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n values must be strictly increasing")
    ref = integrate(drift_field(model), z0, (0.0, horizon), rtol=tol, atol=tol * 1e-2)
    grid = np.linspace(0.0, horizon, 201) if grid is None else grid
    med, q10, q90 = [], [], []
    for i, n in enumerate(n_list):
        ens = simulate_ensemble(model, n, lattice_state(z0, n), horizon, paths, grid=grid, reference=ref,
                                seed=seed + 1_000_003 * i, engine=engine, threads=threads)
        lo, mid, hi = ens.sup_deviation_quantiles()
        med.append(mid)
        q10.append(lo)
        q90.append(hi)
    slope, se = loglog_slope(n_list, med)
    return ConvergenceReport(n_list, med, q10, q90, int(paths), slope, se, int(seed))


# ---------------------------------------------------------------------------
# equilibria


@dataclass
class EquilibriumPoint:
    value: float | None
    kind: str  # stable | unstable | neither | asymptotic-state
    label: str = ""


@dataclass
class EquilibriumReport:
    case: int | str
    points: list[EquilibriumPoint]
    delta: float | None = None
    kappa: float | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def sis_equilibria_constant(lam: float, mu: float, c: float, tol: float = 1e-12) -> EquilibriumReport:
    """Equilibria ``mu/lam`` and ``c`` of the constant-rate susceptible dynamics."""
    if not (lam > 0 and mu > 0 and c > 0):
        raise ValueError("lambda, mu and c must be positive")
    r = mu / lam
    if abs(r - c) <= tol * max(1.0, c):
        return EquilibriumReport(3, [EquilibriumPoint(float(c), "neither", "x2")])
    if r < c:
        return EquilibriumReport(1, [EquilibriumPoint(r, "stable", "x1"), EquilibriumPoint(float(c), "unstable", "x2")],
                                 kappa=r)
    return EquilibriumReport(2, [EquilibriumPoint(r, "unstable", "x1"), EquilibriumPoint(float(c), "stable", "x2")],
                             kappa=r)


def predicted_limit(lam: float, mu: float, c: float, x0: float) -> float:
    """Limit of ``x(t)`` for constant rates started at ``x0`` in ``[0, c]``."""
    rep = sis_equilibria_constant(lam, mu, c)
    if rep.case == 1 and x0 != c:
        return mu / lam
    return float(c)


def _window(t_window) -> tuple[float, float]:
    if np.ndim(t_window) == 0:
        return 0.0, float(t_window)
    return float(t_window[0]), float(t_window[1])


def _ratio_samples(lam, mu, t_window, samples):
    t0, t1 = _window(t_window)
    ts = np.linspace(t0, t1, samples)
    lv = np.atleast_1d(lam(ts))
    if np.any(lv <= 0.0) or lam.bounds(t0, t1)[0] <= 0.0:
        raise ValueError("lambda must be strictly positive on the window")
    return ts, np.atleast_1d(mu(ts)) / lv


def default_psi(lam, mu, x0: float, c: float, t_window, margin: float = 0.01, samples: int = 20001) -> float:
    """``max(x0, sup mu/lam) + margin``, which must stay below ``c``."""
    lam, mu = as_rate(lam), as_rate(mu)
    _, ratio = _ratio_samples(lam, mu, t_window, samples)
    psi = max(float(x0), float(ratio.max())) + margin
    if not psi < c:
        raise ValueError(f"no psi < c available (candidate {psi} >= {c})")
    return psi


def _delta_integrand(lam, mu, t):
    lv = lam(t)
    return np.abs(lam.derivative(t) * mu(t) - mu.derivative(t) * lv) / lv ** 3


def _golden_max(f, a, b, tol=1e-13, max_iter=200):
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a)):
            break
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
    return max(f1, f2, f(a), f(b))


def delta_neighborhood(lam, mu, psi: float, c: float, t_window, t_burn: float | None = None,
                       samples: int = 20001) -> float:
    """Tail supremum of ``|lam' mu - mu' lam| / lam^3 / |psi - c|``.

    The limsup is approximated by the supremum over ``[t_burn, T]``
    (default ``t_burn = T/2``): a dense grid followed by golden-section
    refinement around the best grid point.
    """
    lam, mu = as_rate(lam), as_rate(mu)
    if not psi < c:
        raise ValueError("psi must be smaller than c")
    t0, t1 = _window(t_window)
    tb = t0 + 0.5 * (t1 - t0) if t_burn is None else float(t_burn)
    if lam.bounds(t0, t1)[0] <= 0.0:
        raise ValueError("lambda must be strictly positive on the window")
    ts = np.linspace(tb, t1, samples)
    g = _delta_integrand(lam, mu, ts)
    j = int(np.argmax(g))
    best = float(g[j])
    a, b = ts[max(j - 1, 0)], ts[min(j + 1, len(ts) - 1)]
    if b > a:
        best = max(best, _golden_max(lambda s: float(_delta_integrand(lam, mu, s)), a, b))
    return best / abs(psi - c)


def classify_time_varying(lam, mu, c: float, t_window, margin: float = 1e-9, samples: int = 20001,
                          kappa_tol: float = 1e-6) -> EquilibriumReport:
    """Case of the time-varying SIS dynamics from samples of ``mu/lam`` on the window."""
    lam, mu = as_rate(lam), as_rate(mu)
    ts, ratio = _ratio_samples(lam, mu, t_window, samples)
    tail = ratio[len(ratio) // 2:]
    kappa = float(ratio[-1]) if float(tail.max() - tail.min()) < kappa_tol else None
    details = {"ratio_min": float(ratio.min()), "ratio_max": float(ratio.max())}
    asym = EquilibriumPoint(None, "asymptotic-state", "x1(t) = mu(t)/lam(t)")
    if np.all(np.abs(ratio) <= 1e-12):
        return EquilibriumReport(4, [EquilibriumPoint(0.0, "neither", "x1")], kappa=0.0, details=details)
    if np.all(np.abs(ratio - c) <= 1e-12):
        return EquilibriumReport(3, [EquilibriumPoint(float(c), "neither", "x2")], kappa=float(c), details=details)
    m = margin * max(1.0, abs(c))
    if ratio.max() < c - m:
        return EquilibriumReport(1, [asym, EquilibriumPoint(float(c), "unstable", "x2")], kappa=kappa,
                                 details=details)
    if ratio.min() > c + m:
        return EquilibriumReport(2, [asym, EquilibriumPoint(float(c), "stable", "x2")], kappa=kappa,
                                 details=details)
    return EquilibriumReport("unclassified", [], kappa=kappa, details=details)


# ---------------------------------------------------------------------------
# Lyapunov and asymptote checks


@dataclass
class LyapunovReport:
    checked: int
    violations: int
    max_vdot: float
    t_violations: list[float]

    @property
    def ok(self) -> bool:
        return self.violations == 0


def lyapunov_vdot(lam, mu, c: float, t, x):
    """Time derivative of ``V = (x - mu/lam)^2 / 2`` along the scalar SIS field."""
    lam, mu = as_rate(lam), as_rate(mu)
    lv, mv = lam(t), mu(t)
    e = x - mv / lv
    return lv * e * e * (x - c) + e * (lam.derivative(t) * mv - mu.derivative(t) * lv) / (lv * lv)


def lyapunov_derivative_check(lam, mu, c: float, trajectory: SampledTrajectory, delta: float,
                              psi: float | None = None, grid=None) -> LyapunovReport:
    """Verify ``Vdot < 0`` wherever ``|x - mu/lam| > delta`` and ``x < psi`` on the grid."""
    lam, mu = as_rate(lam), as_rate(mu)
    ts = trajectory.t if grid is None else np.asarray(grid, dtype=float)
    xs = trajectory(ts)[:, 0]
    psi = math.inf if psi is None else psi
    e = xs - mu(ts) / lam(ts)
    active = (np.abs(e) > delta) & (xs < psi)
    vdot = lyapunov_vdot(lam, mu, c, ts, xs)
    bad = active & ~(vdot < 0.0)
    return LyapunovReport(int(active.sum()), int(bad.sum()),
                          float(vdot[active].max()) if active.any() else -math.inf, ts[bad].tolist())


def asymptote_check(trajectory, target, delta: float, t_tail: float, grid=None) -> bool:
    """True iff ``|x(t) - target(t)| <= delta + 1e-6`` for all grid ``t >= t_tail``."""
    t0, t1 = trajectory.span
    if not t0 <= t_tail <= t1:
        raise ValueError("t_tail must lie within the trajectory span")
    if grid is None:
        ts = np.union1d(trajectory.t[trajectory.t >= t_tail], np.linspace(t_tail, t1, 2001))
    else:
        ts = np.asarray(grid, dtype=float)
        ts = ts[ts >= t_tail]
    xs = trajectory(ts)[:, 0]
    tv = np.asarray(target(ts), dtype=float) if callable(target) else float(target)
    return bool(np.all(np.abs(xs - tv) <= delta + 1e-6))


def sis_trajectory(lam, mu, c: float, x0: float, T: float, tol: float = 1e-11) -> SampledTrajectory:
    """Susceptible-density trajectory of the scalar SIS field."""
    return integrate(sis_scalar_field(lam, mu, c), [x0], (0.0, T), rtol=tol, atol=tol * 1e-2, labels=("x",))


def settle(lam: float, mu: float, c: float, x0: float, tol: float = 1e-5, T0: float = 10.0,
           T_max: float = 1e7) -> tuple[SampledTrajectory, float]:
    """Integrate with doubling horizons until ``x(T)`` is within ``tol`` of the predicted limit."""
    target = predicted_limit(lam, mu, c, x0)
    T = T0
    while True:
        traj = sis_trajectory(lam, mu, c, x0, T, tol=1e-12)
        if abs(traj.y[-1, 0] - target) <= tol or T >= T_max:
            return traj, T
        T *= 2.0
