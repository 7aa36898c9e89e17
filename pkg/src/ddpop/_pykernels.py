"""Pure-Python simulation kernels.

Mirror of ``_ckernels.pyx``: same arithmetic order and the same uniform
stream, so both backends produce identical paths on compilable models.
This module additionally accepts models with Python-callable channels.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import SimulationError
from .model import FunctionChannel

BLOCK = 512
DT_MIN = 1e-9
NR_MAX_ITER = 200
SIMPSON_DEPTH = 40
_PI = math.pi
_TWO_PI = 2.0 * math.pi


def _exp(x):
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _sinc(u):
    if abs(u) < 1e-4:
        return 1.0 - u * u / 6.0
    return math.sin(u) / u


def _expm1_ratio(x):
    if abs(x) < 1e-5:
        return 1.0 + x * (0.5 + x / 6.0)
    return _expm1(x) / x


def _expm1(x):
    try:
        return math.expm1(x)
    except OverflowError:
        return math.inf


class Uniforms:
    def __init__(self, gen: np.random.Generator):
        self.gen = gen
        self.buf = []
        self.i = 0

    def next(self) -> float:
        if self.i == len(self.buf):
            self.buf = self.gen.random(BLOCK).tolist()
            self.i = 0
        u = self.buf[self.i]
        self.i += 1
        return u

    def exp(self) -> float:
        return -math.log(1.0 - self.next())


# ---------------------------------------------------------------------------
# rate-function primitives on the flat encoding


def rf_value(kind, par, kt, kv, t):
    if kind == 0:
        return par[0]
    if kind == 1:
        return par[0] + par[1] * t
    if kind == 2:
        return par[0] + par[1] * math.sin(par[2] * t + par[3])
    if kind == 3:
        return par[0] + par[1] * _exp(par[2] * t)
    return _pwl_value(kt, kv, t)


def _pwl_value(kt, kv, t):
    m = len(kt)
    if t <= kt[0]:
        return kv[0]
    if t >= kt[m - 1]:
        return kv[m - 1]
    lo, hi = 0, m - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if kt[mid] <= t:
            lo = mid
        else:
            hi = mid
    w = (t - kt[lo]) / (kt[hi] - kt[lo])
    return kv[lo] + w * (kv[hi] - kv[lo])


def _sin_range(w, phi, t0, t1):
    if w == 0.0:
        s = math.sin(phi)
        return s, s
    u0 = w * t0 + phi
    u1 = w * t1 + phi
    if u0 > u1:
        u0, u1 = u1, u0
    if u1 - u0 >= _TWO_PI:
        return -1.0, 1.0
    s0 = math.sin(u0)
    s1 = math.sin(u1)
    smin = s0 if s0 < s1 else s1
    smax = s1 if s0 < s1 else s0
    k = math.ceil((u0 - 0.5 * _PI) / _TWO_PI)
    if 0.5 * _PI + _TWO_PI * k <= u1:
        smax = 1.0
    k = math.ceil((u0 + 0.5 * _PI) / _TWO_PI)
    if -0.5 * _PI + _TWO_PI * k <= u1:
        smin = -1.0
    return smin, smax


def rf_sup_abs(kind, par, kt, kv, t0, t1):
    if kind == 0:
        return abs(par[0])
    if kind == 1:
        return max(abs(par[0] + par[1] * t0), abs(par[0] + par[1] * t1))
    if kind == 2:
        smin, smax = _sin_range(par[2], par[3], t0, t1)
        return max(abs(par[0] + par[1] * smin), abs(par[0] + par[1] * smax))
    if kind == 3:
        return max(abs(par[0] + par[1] * _exp(par[2] * t0)), abs(par[0] + par[1] * _exp(par[2] * t1)))
    s = max(abs(_pwl_value(kt, kv, t0)), abs(_pwl_value(kt, kv, t1)))
    for j in range(len(kt)):
        if t0 < kt[j] < t1 and abs(kv[j]) > s:
            s = abs(kv[j])
    return s


def rf_integral(kind, par, kt, kv, t0, t1):
    h = t1 - t0
    if kind == 0:
        return par[0] * h
    if kind == 1:
        return h * (par[0] + 0.5 * par[1] * (t0 + t1))
    if kind == 2:
        if par[2] == 0.0:
            return h * (par[0] + par[1] * math.sin(par[3]))
        return par[0] * h + par[1] * h * math.sin(0.5 * par[2] * (t0 + t1) + par[3]) * _sinc(0.5 * par[2] * h)
    if kind == 3:
        if par[2] == 0.0:
            return h * (par[0] + par[1])
        return par[0] * h + par[1] * h * _exp(par[2] * t0) * _expm1_ratio(par[2] * h)
    total = 0.0
    a = t0
    va = _pwl_value(kt, kv, a)
    for j in range(len(kt)):
        if t0 < kt[j] < t1:
            vb = kv[j]
            total += 0.5 * (va + vb) * (kt[j] - a)
            a = kt[j]
            va = vb
    vb = _pwl_value(kt, kv, t1)
    total += 0.5 * (va + vb) * (t1 - a)
    return total


# ---------------------------------------------------------------------------
# evaluators


class FlatEvaluator:
    """Channel rates, bounds and integrals on a ``CompiledModel``."""

    def __init__(self, cm):
        self.d = cm.d
        self.K = len(cm.ch_clip)
        self.R = len(cm.rf_kind)
        self.rf_kind = cm.rf_kind.tolist()
        self.rf_par = cm.rf_par.tolist()
        offs = cm.rf_knot_off.tolist()
        kt, kv = cm.knot_t.tolist(), cm.knot_v.tolist()
        self.rf_kt = [kt[offs[r]:offs[r + 1]] for r in range(self.R)]
        self.rf_kv = [kv[offs[r]:offs[r + 1]] for r in range(self.R)]
        self.coef = cm.term_coef.tolist()
        self.trf = cm.term_rf.tolist()
        self.pow = cm.term_pow.tolist()
        self.off = cm.ch_off.tolist()
        self.clip = cm.ch_clip.tolist()
        self.tinv = cm.ch_tinv.tolist()
        self.jump = cm.ch_jump.tolist()
        self.cm = cm
        self.dom_kind = cm.dom_kind
        self.lo = cm.dom_lo.tolist()
        self.hi = cm.dom_hi.tolist()
        self.total = cm.dom_total
        self.rfv = [0.0] * self.R
        self.mono = []

    def names(self, c):
        if c < len(self.cm.ch_names):
            return self.cm.ch_names[c]
        return f"channel {c} (jump {tuple(self.jump[c])})"

    def set_state(self, k, n):
        """Cache monomials for the current lattice state."""
        x = [ki / n for ki in k]
        mono = []
        for m in range(len(self.coef)):
            v = 1.0
            p = self.pow[m]
            for j in range(self.d):
                for _ in range(p[j]):
                    v *= x[j]
            mono.append(v)
        self.mono = mono

    def set_time(self, t):
        for r in range(self.R):
            self.rfv[r] = rf_value(self.rf_kind[r], self.rf_par[r], self.rf_kt[r], self.rf_kv[r], t)

    def rate(self, c, n):
        """Rate of channel ``c`` at the cached time and state (requires ``set_time``)."""
        s = 0.0
        for m in range(self.off[c], self.off[c + 1]):
            v = self.coef[m] * self.mono[m]
            if self.trf[m] >= 0:
                v *= self.rfv[self.trf[m]]
            s += v
        if self.clip[c] and s < 0.0:
            s = 0.0
        return n * s

    def rate_at(self, c, n, t):
        s = 0.0
        for m in range(self.off[c], self.off[c + 1]):
            v = self.coef[m] * self.mono[m]
            r = self.trf[m]
            if r >= 0:
                v *= rf_value(self.rf_kind[r], self.rf_par[r], self.rf_kt[r], self.rf_kv[r], t)
            s += v
        if self.clip[c] and s < 0.0:
            s = 0.0
        return n * s

    def bound(self, c, n, t0, t1):
        s = 0.0
        for m in range(self.off[c], self.off[c + 1]):
            v = abs(self.coef[m] * self.mono[m])
            r = self.trf[m]
            if r >= 0:
                v *= rf_sup_abs(self.rf_kind[r], self.rf_par[r], self.rf_kt[r], self.rf_kv[r], t0, t1)
            s += v
        return n * s

    def integral(self, c, n, t0, t1):
        if self.clip[c]:
            return n * _simpson(lambda s: self.rate_at(c, 1.0, s), t0, t1)
        s = 0.0
        for m in range(self.off[c], self.off[c + 1]):
            r = self.trf[m]
            if r >= 0:
                w = rf_integral(self.rf_kind[r], self.rf_par[r], self.rf_kt[r], self.rf_kv[r], t0, t1)
            else:
                w = t1 - t0
            s += self.coef[m] * self.mono[m] * w
        return n * s

    def allowed(self, k, n, c):
        jump = self.jump[c]
        if self.dom_kind == 0:
            for j in range(self.d):
                if jump[j] != 0:
                    y = (k[j] + jump[j]) / n
                    if y < self.lo[j] - 1e-12 or y > self.hi[j] + 1e-12:
                        return False
            return True
        tot = 0
        dsum = 0
        for j in range(self.d):
            if k[j] + jump[j] < 0:
                return False
            tot += k[j] + jump[j]
            dsum += jump[j]
        if dsum > 0 and tot / n > self.total + 1e-12:
            return False
        return True


class ModelEvaluator:
    """Evaluator over a ``PopulationModel`` holding Python-callable channels."""

    def __init__(self, model):
        self.model = model
        self.d = model.d
        self.K = len(model.channels)
        self.jump = [list(ch.jump) for ch in model.channels]
        self.tinv = [int(ch.time_invariant) for ch in model.channels]
        self.x = None
        self.t = 0.0

    def names(self, c):
        return self.model.channel_name(c)

    def set_state(self, k, n):
        self.x = np.array([ki / n for ki in k])

    def set_time(self, t):
        self.t = t

    def rate(self, c, n):
        return self.rate_at(c, n, self.t)

    def rate_at(self, c, n, t):
        return n * float(self.model.channels[c].beta(t, self.x))

    def bound(self, c, n, t0, t1):
        ch = self.model.channels[c]
        if ch.time_invariant:
            return self.rate_at(c, n, t0)
        if isinstance(ch, FunctionChannel):
            if ch.bound is None:
                raise SimulationError(f"{self.names(c)}: no rate bound available for thinning")
            return n * float(ch.bound(t0, t1, self.x))
        raise SimulationError(f"{self.names(c)}: unsupported channel type")

    def integral(self, c, n, t0, t1):
        return n * _simpson(lambda s: self.rate_at(c, 1.0, s), t0, t1)

    def allowed(self, k, n, c):
        y = np.array([(k[j] + self.jump[c][j]) / n for j in range(self.d)])
        return self.model.domain.contains(y)


def _simpson(f, a, b):
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4.0 * fm + fb) / 6.0
    return _simpson_rec(f, a, b, fa, fm, fb, whole, 1e-10 * (1.0 + abs(whole)), SIMPSON_DEPTH)


def _simpson_rec(f, a, b, fa, fm, fb, whole, eps, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) * (fa + 4.0 * flm + fm) / 6.0
    right = (b - m) * (fm + 4.0 * frm + fb) / 6.0
    delta = left + right - whole
    if depth <= 0 or abs(delta) <= 15.0 * eps:
        return left + right + delta / 15.0
    return (_simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
            + _simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1))


# ---------------------------------------------------------------------------
# engines


class _Recorder:
    def __init__(self, t0, k, record_every):
        self.times = [t0]
        self.states = [list(k)]
        self.chans = [-1]
        self.every = record_every

    def add(self, t, k, c, events):
        if events % self.every == 0:
            self.times.append(t)
            self.states.append(list(k))
            self.chans.append(c)

    def result(self, d, events, t, k, proposals, accepted):
        return {
            "times": np.array(self.times, dtype=float),
            "states": np.array(self.states, dtype=np.int64).reshape(len(self.states), d),
            "channels": np.array(self.chans, dtype=np.int32),
            "n_events": events,
            "t_end": t,
            "final_state": np.array(k, dtype=np.int64),
            "proposals": proposals,
            "accepted": accepted,
        }


def _pick(rates, target):
    acc = 0.0
    last = -1
    for c, a in enumerate(rates):
        if a > 0.0:
            acc += a
            last = c
            if target < acc:
                return c
    return last


def thinning(ev, n, x0, horizon, gen, dt0=0.1, max_events=-1, record_every=1):
    n = float(n)
    k = [int(v) for v in x0]
    K, d = ev.K, ev.d
    rng = Uniforms(gen)
    rec = _Recorder(0.0, k, record_every)
    t = 0.0
    events = proposals = accepted = 0
    allowed = [True] * K
    rates = [0.0] * K
    all_tinv = all(ev.tinv)

    def refresh():
        ev.set_state(k, n)
        for c in range(K):
            allowed[c] = ev.allowed(k, n, c)

    refresh()
    if all_tinv:
        ev.set_time(0.0)
        while max_events < 0 or events < max_events:
            total = 0.0
            for c in range(K):
                rates[c] = ev.rate(c, n) if allowed[c] else 0.0
                total += rates[c]
            if not total > 0.0:
                break
            if not math.isfinite(total):
                raise SimulationError("non-finite total rate")
            tn = t + rng.exp() / total
            if tn > horizon:
                break
            c = _pick(rates, rng.next() * total)
            for j in range(d):
                k[j] += ev.jump[c][j]
            t = tn
            events += 1
            proposals += 1
            accepted += 1
            rec.add(t, k, c, events)
            refresh()
        return rec.result(d, events, t, k, proposals, accepted)

    dt = dt0
    while t < horizon and (max_events < 0 or events < max_events):
        t1 = min(t + dt, horizon)
        bound = 0.0
        for c in range(K):
            if allowed[c]:
                b = ev.bound(c, n, t, t1)
                if not math.isfinite(b):
                    raise SimulationError(f"{ev.names(c)}: rate bound overflow on [{t}, {t1}]")
                bound += b
        if not bound > 0.0:
            t = t1
            continue
        props = 0
        hit = False
        while True:
            tc = t + rng.exp() / bound
            if tc > t1:
                t = t1
                break
            t = tc
            ev.set_time(t)
            total = 0.0
            for c in range(K):
                rates[c] = ev.rate(c, n) if allowed[c] else 0.0
                total += rates[c]
            props += 1
            proposals += 1
            if total > bound * (1.0 + 1e-9):
                raise SimulationError(f"rate bound violated at t={t}: {total} > {bound}")
            if rng.next() * bound < total:
                c = _pick(rates, rng.next() * total)
                for j in range(d):
                    k[j] += ev.jump[c][j]
                events += 1
                accepted += 1
                hit = True
                rec.add(t, k, c, events)
                refresh()
                break
        if props >= 10 and (1 if hit else 0) * 10 < props:
            dt = max(0.5 * dt, DT_MIN)
        elif props <= 2 and dt < dt0:
            dt = min(2.0 * dt, dt0)
    return rec.result(d, events, min(t, horizon), k, proposals, accepted)


def _solve_firing(ev, c, n, t, best, gap):
    """Smallest ``s`` in ``[0, best]`` with ``integral(t, t+s) = gap``."""
    tol = max(1e-12, 1e-15 * abs(t + best))
    lo, hi = 0.0, best
    a0 = ev.rate_at(c, n, t)
    x = gap / a0 if a0 > 0.0 else 0.5 * best
    if not (lo < x < hi):
        x = 0.5 * (lo + hi)
    for _ in range(NR_MAX_ITER):
        g = ev.integral(c, n, t, t + x) - gap
        if g > 0.0:
            hi = x
        else:
            lo = x
        der = ev.rate_at(c, n, t + x)
        xn = x - g / der if der > 0.0 else 0.5 * (lo + hi)
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= tol or hi - lo <= tol:
            return xn
        x = xn
    raise SimulationError(f"{ev.names(c)}: firing-time bisection did not converge to 1e-12")


def next_reaction(ev, n, x0, horizon, gen, max_events=-1, record_every=1):
    n = float(n)
    k = [int(v) for v in x0]
    K, d = ev.K, ev.d
    rng = Uniforms(gen)
    rec = _Recorder(0.0, k, record_every)
    t = 0.0
    events = 0
    internal = [0.0] * K
    target = [rng.exp() for _ in range(K)]
    allowed = [True] * K
    a_tinv = [0.0] * K
    while max_events < 0 or events < max_events:
        ev.set_state(k, n)
        ev.set_time(t)
        for c in range(K):
            allowed[c] = ev.allowed(k, n, c)
        best = horizon - t
        best_c = -1
        for c in range(K):
            if not allowed[c]:
                continue
            gap = target[c] - internal[c]
            if ev.tinv[c]:
                a = ev.rate(c, n)
                a_tinv[c] = a
                if a > 0.0:
                    s = gap / a
                    if s < best:
                        best = s
                        best_c = c
            else:
                if ev.integral(c, n, t, t + best) >= gap:
                    best = _solve_firing(ev, c, n, t, best, gap)
                    best_c = c
        if best_c < 0:
            break
        tn = t + best
        for c in range(K):
            if not allowed[c]:
                continue
            if c == best_c:
                internal[c] = target[c]
            elif ev.tinv[c]:
                internal[c] += a_tinv[c] * best
            else:
                internal[c] += ev.integral(c, n, t, tn)
        for j in range(d):
            k[j] += ev.jump[best_c][j]
        t = tn
        target[best_c] += rng.exp()
        events += 1
        rec.add(t, k, best_c, events)
    return rec.result(d, events, t, k, events, events)
