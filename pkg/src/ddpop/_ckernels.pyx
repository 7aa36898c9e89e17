# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulation kernels.

Line-for-line mirror of ``_pykernels`` on the flat ``CompiledModel``
encoding.  Uniforms come from the caller's numpy ``Generator`` in blocks of
``BLOCK`` so the random stream matches the Python fallback exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, exp, log, expm1, fabs, ceil, isfinite, M_PI
from libc.stdlib cimport malloc, realloc, free

from .errors import SimulationError

cnp.import_array()

DEF BLOCK = 512
cdef double DT_MIN = 1e-9
cdef int NR_MAX_ITER = 200
cdef int SIMPSON_DEPTH = 40
cdef double TWO_PI = 2.0 * M_PI


cdef class _Uniforms:
    cdef object gen
    cdef double buf[BLOCK]
    cdef int i

    def __cinit__(self, gen):
        self.gen = gen
        self.i = BLOCK

    cdef double next(self) except? -1.0:
        cdef double[::1] block
        cdef int j
        if self.i == BLOCK:
            block = self.gen.random(BLOCK)
            for j in range(BLOCK):
                self.buf[j] = block[j]
            self.i = 0
        self.i += 1
        return self.buf[self.i - 1]

    cdef double exp1(self) except? -1.0:
        return -log(1.0 - self.next())


cdef inline double _fmax(double a, double b) nogil:
    return a if a > b else b


cdef inline double _sinc(double u) nogil:
    if fabs(u) < 1e-4:
        return 1.0 - u * u / 6.0
    return sin(u) / u


cdef inline double _expm1_ratio(double x) nogil:
    if fabs(x) < 1e-5:
        return 1.0 + x * (0.5 + x / 6.0)
    return expm1(x) / x


cdef double _pwl_value(const double* kt, const double* kv, int m, double t) nogil:
    cdef int lo, hi, mid
    cdef double w
    if t <= kt[0]:
        return kv[0]
    if t >= kt[m - 1]:
        return kv[m - 1]
    lo = 0
    hi = m - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if kt[mid] <= t:
            lo = mid
        else:
            hi = mid
    w = (t - kt[lo]) / (kt[hi] - kt[lo])
    return kv[lo] + w * (kv[hi] - kv[lo])


cdef void _sin_range(double w, double phi, double t0, double t1, double* smin, double* smax) nogil:
    cdef double u0, u1, s0, s1, k, tmp
    if w == 0.0:
        smin[0] = sin(phi)
        smax[0] = smin[0]
        return
    u0 = w * t0 + phi
    u1 = w * t1 + phi
    if u0 > u1:
        tmp = u0
        u0 = u1
        u1 = tmp
    if u1 - u0 >= TWO_PI:
        smin[0] = -1.0
        smax[0] = 1.0
        return
    s0 = sin(u0)
    s1 = sin(u1)
    if s0 < s1:
        smin[0] = s0
        smax[0] = s1
    else:
        smin[0] = s1
        smax[0] = s0
    k = ceil((u0 - 0.5 * M_PI) / TWO_PI)
    if 0.5 * M_PI + TWO_PI * k <= u1:
        smax[0] = 1.0
    k = ceil((u0 + 0.5 * M_PI) / TWO_PI)
    if -0.5 * M_PI + TWO_PI * k <= u1:
        smin[0] = -1.0


cdef class _Flat:
    cdef int d, K, R, M, dom_kind
    cdef double dom_total
    cdef int[::1] rf_kind, rf_off, trf, off, clip, tinv
    cdef int[:, ::1] pw
    cdef double[:, ::1] rf_par
    cdef double[::1] knot_t, knot_v, coef, lo, hi, rfv, mono
    cdef long long[:, ::1] jump

    def __cinit__(self, cm):
        self.d = cm.d
        self.K = len(cm.ch_clip)
        self.R = len(cm.rf_kind)
        self.M = len(cm.term_coef)
        self.rf_kind = np.ascontiguousarray(cm.rf_kind, dtype=np.int32)
        self.rf_par = np.ascontiguousarray(cm.rf_par, dtype=np.float64)
        self.rf_off = np.ascontiguousarray(cm.rf_knot_off, dtype=np.int32)
        # pad so that empty knot tables still give a valid pointer
        self.knot_t = np.ascontiguousarray(np.append(cm.knot_t, 0.0), dtype=np.float64)
        self.knot_v = np.ascontiguousarray(np.append(cm.knot_v, 0.0), dtype=np.float64)
        self.coef = np.ascontiguousarray(cm.term_coef, dtype=np.float64)
        self.trf = np.ascontiguousarray(cm.term_rf, dtype=np.int32)
        self.pw = np.ascontiguousarray(cm.term_pow, dtype=np.int32).reshape(self.M, self.d)
        self.off = np.ascontiguousarray(cm.ch_off, dtype=np.int32)
        self.clip = np.ascontiguousarray(cm.ch_clip, dtype=np.int32)
        self.tinv = np.ascontiguousarray(cm.ch_tinv, dtype=np.int32)
        self.jump = np.ascontiguousarray(cm.ch_jump, dtype=np.int64).reshape(self.K, self.d)
        self.dom_kind = cm.dom_kind
        self.lo = np.ascontiguousarray(cm.dom_lo, dtype=np.float64)
        self.hi = np.ascontiguousarray(cm.dom_hi, dtype=np.float64)
        self.dom_total = cm.dom_total
        self.rfv = np.zeros(max(self.R, 1))
        self.mono = np.zeros(max(self.M, 1))

    cdef inline double rf_value(self, int r, double t) nogil:
        cdef int kind = self.rf_kind[r]
        if kind == 0:
            return self.rf_par[r, 0]
        if kind == 1:
            return self.rf_par[r, 0] + self.rf_par[r, 1] * t
        if kind == 2:
            return self.rf_par[r, 0] + self.rf_par[r, 1] * sin(self.rf_par[r, 2] * t + self.rf_par[r, 3])
        if kind == 3:
            return self.rf_par[r, 0] + self.rf_par[r, 1] * exp(self.rf_par[r, 2] * t)
        return _pwl_value(&self.knot_t[self.rf_off[r]], &self.knot_v[self.rf_off[r]],
                          self.rf_off[r + 1] - self.rf_off[r], t)

    cdef double rf_sup_abs(self, int r, double t0, double t1) nogil:
        cdef int kind = self.rf_kind[r]
        cdef double a = self.rf_par[r, 0], b = self.rf_par[r, 1]
        cdef double smin, smax, s
        cdef int j, o, m
        if kind == 0:
            return fabs(a)
        if kind == 1:
            return _fmax(fabs(a + b * t0), fabs(a + b * t1))
        if kind == 2:
            _sin_range(self.rf_par[r, 2], self.rf_par[r, 3], t0, t1, &smin, &smax)
            return _fmax(fabs(a + b * smin), fabs(a + b * smax))
        if kind == 3:
            return _fmax(fabs(a + b * exp(self.rf_par[r, 2] * t0)), fabs(a + b * exp(self.rf_par[r, 2] * t1)))
        o = self.rf_off[r]
        m = self.rf_off[r + 1] - o
        s = _fmax(fabs(_pwl_value(&self.knot_t[o], &self.knot_v[o], m, t0)),
                  fabs(_pwl_value(&self.knot_t[o], &self.knot_v[o], m, t1)))
        for j in range(m):
            if t0 < self.knot_t[o + j] and self.knot_t[o + j] < t1 and fabs(self.knot_v[o + j]) > s:
                s = fabs(self.knot_v[o + j])
        return s

    cdef double rf_integral(self, int r, double t0, double t1) nogil:
        cdef int kind = self.rf_kind[r]
        cdef double h = t1 - t0
        cdef double a = self.rf_par[r, 0], b = self.rf_par[r, 1], w = self.rf_par[r, 2]
        cdef double total, ta, va, vb
        cdef int j, o, m
        if kind == 0:
            return a * h
        if kind == 1:
            return h * (a + 0.5 * b * (t0 + t1))
        if kind == 2:
            if w == 0.0:
                return h * (a + b * sin(self.rf_par[r, 3]))
            return a * h + b * h * sin(0.5 * w * (t0 + t1) + self.rf_par[r, 3]) * _sinc(0.5 * w * h)
        if kind == 3:
            if w == 0.0:
                return h * (a + b)
            return a * h + b * h * exp(w * t0) * _expm1_ratio(w * h)
        o = self.rf_off[r]
        m = self.rf_off[r + 1] - o
        total = 0.0
        ta = t0
        va = _pwl_value(&self.knot_t[o], &self.knot_v[o], m, ta)
        for j in range(m):
            if t0 < self.knot_t[o + j] and self.knot_t[o + j] < t1:
                vb = self.knot_v[o + j]
                total += 0.5 * (va + vb) * (self.knot_t[o + j] - ta)
                ta = self.knot_t[o + j]
                va = vb
        vb = _pwl_value(&self.knot_t[o], &self.knot_v[o], m, t1)
        total += 0.5 * (va + vb) * (t1 - ta)
        return total

    cdef void set_state(self, const long long* k, double n) nogil:
        cdef int m, j, q
        cdef double v, xj
        for m in range(self.M):
            v = 1.0
            for j in range(self.d):
                xj = <double>k[j] / n
                for q in range(self.pw[m, j]):
                    v *= xj
            self.mono[m] = v

    cdef void set_time(self, double t) nogil:
        cdef int r
        for r in range(self.R):
            self.rfv[r] = self.rf_value(r, t)

    cdef double rate(self, int c, double n) nogil:
        cdef double s = 0.0, v
        cdef int m
        for m in range(self.off[c], self.off[c + 1]):
            v = self.coef[m] * self.mono[m]
            if self.trf[m] >= 0:
                v *= self.rfv[self.trf[m]]
            s += v
        if self.clip[c] and s < 0.0:
            s = 0.0
        return n * s

    cdef double rate_at(self, int c, double n, double t) nogil:
        cdef double s = 0.0, v
        cdef int m
        for m in range(self.off[c], self.off[c + 1]):
            v = self.coef[m] * self.mono[m]
            if self.trf[m] >= 0:
                v *= self.rf_value(self.trf[m], t)
            s += v
        if self.clip[c] and s < 0.0:
            s = 0.0
        return n * s

    cdef double bound(self, int c, double n, double t0, double t1) nogil:
        cdef double s = 0.0, v
        cdef int m
        for m in range(self.off[c], self.off[c + 1]):
            v = fabs(self.coef[m] * self.mono[m])
            if self.trf[m] >= 0:
                v *= self.rf_sup_abs(self.trf[m], t0, t1)
            s += v
        return n * s

    cdef double integral(self, int c, double n, double t0, double t1) nogil:
        cdef double s = 0.0, w
        cdef int m
        if self.clip[c]:
            return n * self.simpson(c, t0, t1)
        for m in range(self.off[c], self.off[c + 1]):
            if self.trf[m] >= 0:
                w = self.rf_integral(self.trf[m], t0, t1)
            else:
                w = t1 - t0
            s += self.coef[m] * self.mono[m] * w
        return n * s

    cdef double simpson(self, int c, double a, double b) nogil:
        cdef double fa = self.rate_at(c, 1.0, a)
        cdef double fm = self.rate_at(c, 1.0, 0.5 * (a + b))
        cdef double fb = self.rate_at(c, 1.0, b)
        cdef double whole = (b - a) * (fa + 4.0 * fm + fb) / 6.0
        return self.simpson_rec(c, a, b, fa, fm, fb, whole, 1e-10 * (1.0 + fabs(whole)), SIMPSON_DEPTH)

    cdef double simpson_rec(self, int c, double a, double b, double fa, double fm, double fb,
                            double whole, double eps, int depth) nogil:
        cdef double m = 0.5 * (a + b)
        cdef double lm = 0.5 * (a + m), rm = 0.5 * (m + b)
        cdef double flm = self.rate_at(c, 1.0, lm), frm = self.rate_at(c, 1.0, rm)
        cdef double left = (m - a) * (fa + 4.0 * flm + fm) / 6.0
        cdef double right = (b - m) * (fm + 4.0 * frm + fb) / 6.0
        cdef double delta = left + right - whole
        if depth <= 0 or fabs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        return (self.simpson_rec(c, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
                + self.simpson_rec(c, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1))

    cdef bint allowed(self, const long long* k, double n, int c) nogil:
        cdef int j
        cdef double y
        cdef long long tot = 0, dsum = 0
        if self.dom_kind == 0:
            for j in range(self.d):
                if self.jump[c, j] != 0:
                    y = <double>(k[j] + self.jump[c, j]) / n
                    if y < self.lo[j] - 1e-12 or y > self.hi[j] + 1e-12:
                        return False
            return True
        for j in range(self.d):
            if k[j] + self.jump[c, j] < 0:
                return False
            tot += k[j] + self.jump[c, j]
            dsum += self.jump[c, j]
        if dsum > 0 and <double>tot / n > self.dom_total + 1e-12:
            return False
        return True


cdef class _Recorder:
    cdef double* times
    cdef long long* states
    cdef int* chans
    cdef Py_ssize_t size, cap
    cdef int d, every

    def __cinit__(self, int d, int every):
        self.d = d
        self.every = every
        self.cap = 1024
        self.size = 0
        self.times = <double*>malloc(self.cap * sizeof(double))
        self.states = <long long*>malloc(self.cap * d * sizeof(long long))
        self.chans = <int*>malloc(self.cap * sizeof(int))
        if self.times == NULL or self.states == NULL or self.chans == NULL:
            raise MemoryError()

    def __dealloc__(self):
        free(self.times)
        free(self.states)
        free(self.chans)

    cdef int push(self, double t, const long long* k, int c) except -1:
        cdef int j
        if self.size == self.cap:
            self.cap *= 2
            self.times = <double*>realloc(self.times, self.cap * sizeof(double))
            self.states = <long long*>realloc(self.states, self.cap * self.d * sizeof(long long))
            self.chans = <int*>realloc(self.chans, self.cap * sizeof(int))
            if self.times == NULL or self.states == NULL or self.chans == NULL:
                raise MemoryError()
        self.times[self.size] = t
        for j in range(self.d):
            self.states[self.size * self.d + j] = k[j]
        self.chans[self.size] = c
        self.size += 1
        return 0

    cdef int add(self, double t, const long long* k, int c, long long events) except -1:
        if events % self.every == 0:
            self.push(t, k, c)
        return 0

    cdef dict result(self, long long events, double t, long long[::1] k, long long proposals,
                     long long accepted):
        cdef Py_ssize_t i
        times = np.empty(self.size)
        states = np.empty((self.size, self.d), dtype=np.int64)
        chans = np.empty(self.size, dtype=np.int32)
        cdef double[::1] tv = times
        cdef long long[:, ::1] sv = states
        cdef int[::1] cv = chans
        for i in range(self.size):
            tv[i] = self.times[i]
            cv[i] = self.chans[i]
            for j in range(self.d):
                sv[i, j] = self.states[i * self.d + j]
        return {
            "times": times,
            "states": states,
            "channels": chans,
            "n_events": int(events),
            "t_end": float(t),
            "final_state": np.array(k, dtype=np.int64),
            "proposals": int(proposals),
            "accepted": int(accepted),
        }


cdef int _pick(const double* rates, int K, double target) nogil:
    cdef double acc = 0.0
    cdef int c, last = -1
    for c in range(K):
        if rates[c] > 0.0:
            acc += rates[c]
            last = c
            if target < acc:
                return c
    return last


def _channel_name(cm, int c):
    if c < len(cm.ch_names):
        return cm.ch_names[c]
    return f"channel {c} (jump {tuple(int(v) for v in cm.ch_jump[c])})"


def thinning(cm, n_in, x0, double horizon, gen, double dt0=0.1, long long max_events=-1,
             int record_every=1):
    cdef _Flat ev = _Flat(cm)
    cdef double n = float(n_in)
    cdef int K = ev.K, d = ev.d, c, j, props
    cdef long long[::1] k = np.array(x0, dtype=np.int64)
    cdef _Uniforms rng = _Uniforms(gen)
    cdef _Recorder rec = _Recorder(d, record_every)
    cdef double t = 0.0, t1, bound, b, total, tn, tc, dt
    cdef long long events = 0, proposals = 0, accepted = 0
    cdef bint hit, all_tinv = True
    allowed_arr = np.ones(K, dtype=np.int32)
    rates_arr = np.zeros(K)
    cdef int[::1] allowed = allowed_arr
    cdef double[::1] rates = rates_arr

    rec.push(0.0, &k[0], -1)
    for c in range(K):
        if not ev.tinv[c]:
            all_tinv = False
    ev.set_state(&k[0], n)
    for c in range(K):
        allowed[c] = ev.allowed(&k[0], n, c)

    if all_tinv:
        ev.set_time(0.0)
        while max_events < 0 or events < max_events:
            total = 0.0
            for c in range(K):
                rates[c] = ev.rate(c, n) if allowed[c] else 0.0
                total += rates[c]
            if not total > 0.0:
                break
            if not isfinite(total):
                raise SimulationError("non-finite total rate")
            tn = t + rng.exp1() / total
            if tn > horizon:
                break
            c = _pick(&rates[0], K, rng.next() * total)
            for j in range(d):
                k[j] += ev.jump[c, j]
            t = tn
            events += 1
            proposals += 1
            accepted += 1
            rec.add(t, &k[0], c, events)
            ev.set_state(&k[0], n)
            for c in range(K):
                allowed[c] = ev.allowed(&k[0], n, c)
        return rec.result(events, t, k, proposals, accepted)

    dt = dt0
    while t < horizon and (max_events < 0 or events < max_events):
        t1 = t + dt
        if t1 > horizon:
            t1 = horizon
        bound = 0.0
        for c in range(K):
            if allowed[c]:
                b = ev.bound(c, n, t, t1)
                if not isfinite(b):
                    raise SimulationError(f"{_channel_name(cm, c)}: rate bound overflow on [{t}, {t1}]")
                bound += b
        if not bound > 0.0:
            t = t1
            continue
        props = 0
        hit = False
        while True:
            tc = t + rng.exp1() / bound
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
                c = _pick(&rates[0], K, rng.next() * total)
                for j in range(d):
                    k[j] += ev.jump[c, j]
                events += 1
                accepted += 1
                hit = True
                rec.add(t, &k[0], c, events)
                ev.set_state(&k[0], n)
                for c in range(K):
                    allowed[c] = ev.allowed(&k[0], n, c)
                break
        if props >= 10 and (1 if hit else 0) * 10 < props:
            dt = _fmax(0.5 * dt, DT_MIN)
        elif props <= 2 and dt < dt0:
            dt = 2.0 * dt if 2.0 * dt < dt0 else dt0
    return rec.result(events, t if t < horizon else horizon, k, proposals, accepted)


cdef double _solve_firing(_Flat ev, int c, double n, double t, double best, double gap) nogil:
    cdef double tol = _fmax(1e-12, 1e-15 * fabs(t + best))
    cdef double lo = 0.0, hi = best, x, xn, g, der
    cdef double a0 = ev.rate_at(c, n, t)
    cdef int it
    x = gap / a0 if a0 > 0.0 else 0.5 * best
    if not (lo < x and x < hi):
        x = 0.5 * (lo + hi)
    for it in range(NR_MAX_ITER):
        g = ev.integral(c, n, t, t + x) - gap
        if g > 0.0:
            hi = x
        else:
            lo = x
        der = ev.rate_at(c, n, t + x)
        xn = x - g / der if der > 0.0 else 0.5 * (lo + hi)
        if not (lo < xn and xn < hi):
            xn = 0.5 * (lo + hi)
        if fabs(xn - x) <= tol or hi - lo <= tol:
            return xn
        x = xn
    return -1.0


def next_reaction(cm, n_in, x0, double horizon, gen, long long max_events=-1, int record_every=1):
    cdef _Flat ev = _Flat(cm)
    cdef double n = float(n_in)
    cdef int K = ev.K, d = ev.d, c, j, best_c
    cdef long long[::1] k = np.array(x0, dtype=np.int64)
    cdef _Uniforms rng = _Uniforms(gen)
    cdef _Recorder rec = _Recorder(d, record_every)
    cdef double t = 0.0, best, gap, a, s, tn
    cdef long long events = 0
    internal_arr = np.zeros(K)
    target_arr = np.zeros(K)
    allowed_arr = np.ones(K, dtype=np.int32)
    a_arr = np.zeros(K)
    cdef double[::1] internal = internal_arr, target = target_arr, a_tinv = a_arr
    cdef int[::1] allowed = allowed_arr

    rec.push(0.0, &k[0], -1)
    for c in range(K):
        target[c] = rng.exp1()
    while max_events < 0 or events < max_events:
        ev.set_state(&k[0], n)
        ev.set_time(t)
        for c in range(K):
            allowed[c] = ev.allowed(&k[0], n, c)
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
                    s = _solve_firing(ev, c, n, t, best, gap)
                    if s < 0.0:
                        raise SimulationError(
                            f"{_channel_name(cm, c)}: firing-time bisection did not converge to 1e-12")
                    best = s
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
            k[j] += ev.jump[best_c, j]
        t = tn
        target[best_c] += rng.exp1()
        events += 1
        rec.add(t, &k[0], best_c, events)
    return rec.result(events, t, k, events, events)
