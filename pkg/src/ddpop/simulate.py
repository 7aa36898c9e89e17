"""Exact simulation of density-dependent jump processes.

Two engines share one kernel interface: Ogata thinning with adaptive
lookahead windows, and a next-reaction scheme with one unit-rate Poisson
clock per channel run on that channel's integrated intensity.  Each path has
its own counter-based generator derived from ``(seed, path_index)``, so
ensembles are reproducible for any degree of parallelism.
"""

from __future__ import annotations

import csv
import json
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _backend, _pykernels
from .errors import DomainError, SimulationError
from .model import PopulationModel

ENGINES = ("thinning", "next_reaction")


def make_generator(seed: int, path_index: int = 0) -> np.random.Generator:
    """Philox stream keyed by the pair ``(seed, path_index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path_index)])))


@dataclass
class JumpPath:
    """Piecewise-constant lattice trajectory.

    ``states[i]`` holds on ``[times[i], times[i+1])``; ``channel_ids[0]`` is
    ``-1`` for the initial state.  With ``record_every > 1`` only every
    ``record_every``-th event is stored and ``final_state`` keeps the end.
    """

    n: int
    times: np.ndarray
    states: np.ndarray
    channel_ids: np.ndarray
    horizon: float
    final_state: np.ndarray
    n_events: int
    engine: str = "thinning"
    record_every: int = 1
    proposals: int = 0

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def density(self) -> np.ndarray:
        return self.states / self.n

    def state_at(self, t) -> np.ndarray:
        """Lattice state(s) at time(s) ``t`` (right-continuous)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = self.states[np.clip(idx, 0, len(self.times) - 1)]
        return out

    def validate(self, model: PopulationModel) -> None:
        """Check time ordering, jump consistency and domain membership."""
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0.0):
            raise SimulationError("path times must start at 0 and increase strictly")
        if self.record_every == 1:
            jumps = np.array([ch.jump for ch in model.channels], dtype=np.int64)
            steps = np.diff(self.states, axis=0)
            if not np.array_equal(steps, jumps[self.channel_ids[1:]]):
                raise SimulationError("recorded transition does not match its channel jump")
        for s in self.states:
            if not model.domain.contains(s / self.n):
                raise DomainError(f"path state {s.tolist()} left the domain")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"k_{j + 1}" for j in range(self.d)] + ["channel"])
            for t, s, c in zip(self.times.tolist(), self.states.tolist(), self.channel_ids.tolist()):
                w.writerow([repr(t)] + s + [c])

    @classmethod
    def from_csv(cls, path, n: int, horizon: float | None = None) -> JumpPath:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = data[:, 0]
        states = data[:, 1:-1].astype(np.int64)
        chans = data[:, -1].astype(np.int32)
        return cls(n, times, states, chans, float(times[-1] if horizon is None else horizon),
                   states[-1].copy(), len(times) - 1)


def _compiled(model: PopulationModel):
    cm = getattr(model, "_ddpop_compiled", None)
    if cm is None:
        cm = model.compile()
        object.__setattr__(model, "_ddpop_compiled", cm)
    return cm


def _check_inputs(model: PopulationModel, n, x0, horizon):
    if n < 1:
        raise ValueError("scale n must be >= 1")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    x0 = np.asarray(x0)
    if x0.shape != (model.d,) or not np.all(x0 == np.round(x0)):
        raise ValueError(f"x0 must be an integer lattice state of length {model.d}")
    x0 = x0.astype(np.int64)
    model.check_state(x0 / n)
    return x0


def _run(engine, model, n, x0, horizon, gen, max_events, record_every, window, backend):
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    max_events = -1 if max_events is None else int(max_events)
    use_compiled = model.compilable and (backend or _backend.BACKEND) == "compiled"
    if use_compiled:
        mod, target = _backend.kernels("compiled"), _compiled(model)
    else:
        if backend == "compiled" and not model.compilable:
            raise SimulationError("models with Python-callable channels need the python backend")
        mod = _pykernels
        target = _pykernels.FlatEvaluator(_compiled(model)) if model.compilable else _pykernels.ModelEvaluator(model)
    if engine == "thinning":
        res = mod.thinning(target, n, x0, float(horizon), gen, float(window), max_events, int(record_every))
    else:
        res = mod.next_reaction(target, n, x0, float(horizon), gen, max_events, int(record_every))
    return JumpPath(
        n=int(n),
        times=res["times"],
        states=res["states"],
        channel_ids=res["channels"],
        horizon=float(res["t_end"]) if max_events >= 0 and res["n_events"] == max_events else float(horizon),
        final_state=res["final_state"],
        n_events=res["n_events"],
        engine=engine,
        record_every=int(record_every),
        proposals=res["proposals"],
    )


def simulate(model, n, x0, horizon, seed=0, *, engine="thinning", path_index=0, max_events=None,
             record_every=1, window=0.1, backend=None) -> JumpPath:
    """Simulate one path with the chosen engine.

    ``max_events`` stops early (the returned ``horizon`` is then the last
    event time); ``backend`` forces ``"compiled"`` or ``"python"`` kernels.
    """
    x0 = _check_inputs(model, n, x0, horizon)
    gen = make_generator(seed, path_index)
    return _run(engine, model, n, x0, horizon, gen, max_events, record_every, window, backend)


def simulate_thinning(model, n, x0, horizon, seed=0, **kw) -> JumpPath:
    return simulate(model, n, x0, horizon, seed, engine="thinning", **kw)


def simulate_next_reaction(model, n, x0, horizon, seed=0, **kw) -> JumpPath:
    return simulate(model, n, x0, horizon, seed, engine="next_reaction", **kw)


# ---------------------------------------------------------------------------
# ensembles


def sup_deviation(path: JumpPath, reference, grid=None, left_limits: bool = False) -> float:
    """``sup_s |Z_n(s) - Z(s)|`` (Euclidean norm) over event times and ``grid``.

    The path is right-continuous, so each event time compares the post-jump
    state.  ``left_limits=True`` also compares the pre-jump state, which
    tightens the supremum against a continuous reference.
    """
    times = path.times
    dens = path.density
    ref_ev = np.asarray(reference(times)).reshape(len(times), -1)
    dev = np.linalg.norm(dens - ref_ev, axis=1).max()
    if left_limits and len(times) > 1:
        pre = np.linalg.norm(dens[:-1] - ref_ev[1:], axis=1).max()
        dev = max(dev, pre)
    extra = [path.horizon] if grid is None else np.append(np.asarray(grid, dtype=float), path.horizon)
    extra = np.asarray(extra, dtype=float)
    extra = extra[extra <= path.horizon]
    ref_g = np.asarray(reference(extra)).reshape(len(extra), -1)
    dev = max(dev, np.linalg.norm(path.state_at(extra) / path.n - ref_g, axis=1).max())
    return float(dev)


@dataclass
class EnsembleSummary:
    n: int
    path_count: int
    time_grid: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sup_deviation: np.ndarray | None
    seed: int
    engine: str
    terminal_states: np.ndarray
    event_counts: np.ndarray
    statistics: list = field(default_factory=list)

    def sup_deviation_quantiles(self, qs=(0.1, 0.5, 0.9)) -> list[float] | None:
        if self.sup_deviation is None:
            return None
        return [float(v) for v in np.quantile(self.sup_deviation, qs)]

    def to_csv(self, path) -> None:
        d = self.mean.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"mean_{j + 1}" for j in range(d)] + [f"var_{j + 1}" for j in range(d)])
            for i, t in enumerate(self.time_grid.tolist()):
                w.writerow([repr(t)] + [repr(v) for v in self.mean[i].tolist()]
                           + [repr(v) for v in self.var[i].tolist()])

    def sidecar(self) -> dict:
        return {
            "n": self.n,
            "paths": self.path_count,
            "seed": self.seed,
            "engine": self.engine,
            "sup_deviation_quantiles": self.sup_deviation_quantiles(),
        }

    def write(self, csv_path, json_path=None) -> None:
        self.to_csv(csv_path)
        json_path = json_path or os.path.splitext(str(csv_path))[0] + ".json"
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _one_path(args):
    (model, n, x0, horizon, seed, i, engine, grid, reference, statistic, max_events, record_every,
     window, backend) = args
    path = _run(engine, model, n, x0, horizon, make_generator(seed, i), max_events, record_every, window, backend)
    on_grid = path.state_at(grid)
    dev = None if reference is None else sup_deviation(path, reference, grid)
    stat = None if statistic is None else statistic(path)
    return on_grid, dev, path.final_state, path.n_events, stat


def _picklable(obj) -> bool:
    try:
        pickle.dumps(obj)
        return True
    except Exception:  # noqa: BLE001
        return False


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def simulate_ensemble(model, n, x0, horizon, paths, grid=None, reference=None, seed=0, *,
                      engine="thinning", threads=1, statistic=None, max_events=None, record_every=1,
                      window=0.1, backend=None) -> EnsembleSummary:
    """Run ``paths`` independent paths and summarize them on ``grid``.

    ``reference`` is any callable ``t -> state`` (for example a
    ``SampledTrajectory``); per-path sup deviations are computed against it.
    ``statistic(path)`` is an optional per-path callback whose results are
    kept in path order.  Output does not depend on ``threads``.
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    x0 = _check_inputs(model, n, x0, horizon)
    grid = np.linspace(0.0, horizon, 101) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(grid < 0) or np.any(grid > horizon):
        raise ValueError("grid must lie within [0, horizon]")
    jobs = [(model, n, x0, horizon, seed, i, engine, grid, reference, statistic, max_events, record_every,
             window, backend) for i in range(paths)]
    threads = default_threads() if threads is None else int(threads)
    if threads > 1 and paths > 1 and _picklable(jobs[0]):
        with ProcessPoolExecutor(max_workers=min(threads, paths)) as pool:
            results = list(pool.map(_one_path, jobs, chunksize=max(1, paths // (4 * threads))))
    else:
        results = [_one_path(job) for job in jobs]
    # integer counts sum exactly, so the mean carries a single rounding
    counts = np.stack([r[0] for r in results]).astype(float)
    mean = counts.sum(axis=0) / (paths * n)
    var = (counts / n).var(axis=0, ddof=1) if paths > 1 else np.zeros_like(mean)
    devs = None if reference is None else np.array([r[1] for r in results])
    return EnsembleSummary(
        n=int(n),
        path_count=int(paths),
        time_grid=grid,
        mean=mean,
        var=var,
        sup_deviation=devs,
        seed=int(seed),
        engine=engine,
        terminal_states=np.stack([r[2] for r in results]),
        event_counts=np.array([r[3] for r in results]),
        statistics=[r[4] for r in results] if statistic is not None else [],
    )
