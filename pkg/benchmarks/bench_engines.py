"""Compare the compiled and pure-Python kernels on SIS and Lorenz workloads.

Usage: python3 benchmarks/bench_engines.py [--repeats 3] [--events 20000]
"""

import argparse
import time

import numpy as np

from ddpop import _backend
from ddpop.construct import LORENZ_BOX, affine_rescale, lorenz_model, lorenz_start
from ddpop.model import make_sis
from ddpop.rates import RateFunction
from ddpop.simulate import simulate


def workloads(events):
    sis_const = make_sis(2.0, 1.0)
    sis_tv = make_sis(RateFunction.sinusoid(2.0, 0.5), RateFunction.sinusoid(1.0, 0.3, 2.0))
    n = 1000
    x0 = np.array([700, 300])
    lor = lorenz_model(n=6000)
    lx0 = lorenz_start(affine_rescale(LORENZ_BOX, 1.0 / 3.0), 6000)
    return [
        ("sis constant / thinning", sis_const, n, x0, "thinning"),
        ("sis constant / next_reaction", sis_const, n, x0, "next_reaction"),
        ("sis sinusoid / thinning", sis_tv, n, x0, "thinning"),
        ("sis sinusoid / next_reaction", sis_tv, n, x0, "next_reaction"),
        ("lorenz / thinning", lor, 6000, lx0, "thinning"),
    ], events


def time_one(model, n, x0, engine, events, backend, repeats):
    best = np.inf
    for r in range(repeats):
        t0 = time.perf_counter()
        path = simulate(model, n, x0, 1e9, seed=r, engine=engine, max_events=events, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--events", type=int, default=20000)
    args = ap.parse_args()
    if not _backend.compiled_available():
        print("compiled kernels unavailable; only the Python backend can be timed")
    print(f"{'workload':32s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s} {'same':>5s}")
    items, events = workloads(args.events)
    for name, model, n, x0, engine in items:
        tp, pp = time_one(model, n, x0, engine, events, "python", args.repeats)
        if _backend.compiled_available():
            tc, pc = time_one(model, n, x0, engine, events, "compiled", args.repeats)
            same = np.array_equal(pp.times, pc.times) and np.array_equal(pp.states, pc.states)
            print(f"{name:32s} {tp:10.3f} {tc:11.4f} {tp / tc:8.1f} {str(same):>5s}")
        else:
            print(f"{name:32s} {tp:10.3f} {'-':>11s} {'-':>8s} {'-':>5s}")


if __name__ == "__main__":
    main()
