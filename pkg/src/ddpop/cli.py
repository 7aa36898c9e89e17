"""Command-line interface: ``ddpop <subcommand> --config CFG --out DIR``.

Every subcommand validates its JSON config against a schema before doing
any work, writes CSV/JSON outputs plus ``manifest.json``, and exits with 0 on
success, 1 on a runtime failure and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, _backend
from .errors import DdpopError

# ---------------------------------------------------------------------------
# schemas

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

RATE_SCHEMA = {
    "oneOf": [
        {"type": "number"},
        {
            "type": "object",
            "properties": {
                "form": {"enum": ["constant", "linear", "sinusoid", "exponential", "piecewise_linear"]},
                "a": _NUM, "b": _NUM, "omega": _NUM, "phi": _NUM, "r": _NUM,
                "knots": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                          "minItems": 1},
            },
            "required": ["form"],
            "additionalProperties": False,
        },
    ]
}

TERM_SCHEMA = {
    "type": "object",
    "properties": {"coef": _NUM, "powers": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                   "rate": RATE_SCHEMA},
    "required": ["coef", "powers"],
    "additionalProperties": False,
}
POLY_SCHEMA = {
    "type": "object",
    "properties": {"terms": {"type": "array", "items": TERM_SCHEMA}},
    "required": ["terms"],
    "additionalProperties": False,
}

MODEL_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"preset": {"enum": ["sis", "logistic"]}, "lambda": RATE_SCHEMA, "mu": RATE_SCHEMA},
            "required": ["preset", "lambda", "mu"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "d": _INT1,
                "domain": {"type": "object"},
                "channels": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "properties": {"jump": {"type": "array", "items": {"type": "integer"}}, "rate": POLY_SCHEMA,
                                   "clip": {"type": "boolean"}, "label": {"type": "string"}},
                    "required": ["jump", "rate"],
                    "additionalProperties": False,
                }},
                "conserved": {"type": "array", "items": {"type": "integer"}},
                "check_boundary": {"type": "boolean"},
            },
            "required": ["d", "domain", "channels"],
            "additionalProperties": False,
        },
    ]
}

_STATE = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}
_DENSITY = {"type": "array", "items": _NUM, "minItems": 1}
_ENGINE = {"enum": ["thinning", "next_reaction"]}

REWARD_FN_SCHEMA = {
    "type": "object",
    "properties": {"form": {"enum": ["linear", "quadratic", "piecewise_linear"]}, "rate": _NUM, "coef": _NUM,
                   "knots": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2,
                                                        "maxItems": 2}}},
    "required": ["form"],
    "additionalProperties": False,
}
REWARD_SPEC_SCHEMA = {
    "type": "object",
    "properties": {"R": REWARD_FN_SCHEMA, "C": REWARD_FN_SCHEMA, "C_lam": REWARD_FN_SCHEMA,
                   "C_mu": REWARD_FN_SCHEMA, "terminal": REWARD_FN_SCHEMA, "lam_hat": RATE_SCHEMA,
                   "mu_hat": RATE_SCHEMA, "c": _POS},
    "required": ["R", "C"],
    "additionalProperties": False,
}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SCHEMAS = {
    "simulate": {
        "type": "object",
        "properties": {
            "model": MODEL_SCHEMA, "n": _INT1, "x0": _STATE, "z0": _DENSITY, "horizon": _POS,
            "engine": _ENGINE, "paths": _INT1, "max_events": _INT1, "record_every": _INT1,
            "grid_points": {"type": "integer", "minimum": 2}, "seed": {"type": "integer", "minimum": 0},
        },
        "required": ["model", "n", "horizon"],
        "oneOf": [{"required": ["x0"]}, {"required": ["z0"]}],
        "additionalProperties": False,
    },
    "meanfield": {
        "type": "object",
        "properties": {
            "model": MODEL_SCHEMA, "z0": _DENSITY, "horizon": _POS, "rtol": _POS, "atol": _POS,
            "grid_points": {"type": "integer", "minimum": 2},
            "moment_bounds": {
                "type": "object",
                "properties": {"lambda": RATE_SCHEMA, "mu": RATE_SCHEMA, "y0": _NUM, "n": _POS, "tol": _POS},
                "required": ["lambda", "mu", "y0", "n"],
                "additionalProperties": False,
            },
            "seed": {"type": "integer", "minimum": 0},
        },
        "required": ["model", "z0", "horizon"],
        "additionalProperties": False,
    },
    "converge": {
        "type": "object",
        "properties": {
            "model": MODEL_SCHEMA, "z0": _DENSITY, "horizon": _POS,
            "n_list": {"type": "array", "items": _INT1, "minItems": 2}, "paths": _INT1, "engine": _ENGINE,
            "grid_points": {"type": "integer", "minimum": 2}, "seed": {"type": "integer", "minimum": 0},
        },
        "required": ["model", "z0", "horizon", "n_list", "paths"],
        "additionalProperties": False,
    },
    "stability": {
        "type": "object",
        "properties": {
            "lambda": RATE_SCHEMA, "mu": RATE_SCHEMA, "c": _POS, "x0": _NUM, "horizon": _POS,
            "t_burn": _NUM, "psi": _NUM, "grid_points": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer", "minimum": 0},
        },
        "required": ["lambda", "mu", "c", "x0", "horizon"],
        "additionalProperties": False,
    },
    "control": {
        "type": "object",
        "properties": {
            "spec": REWARD_SPEC_SCHEMA,
            "mode": {"enum": ["stationary", "finite_horizon", "ideal", "constrained"]},
            "lambda": _POS, "mu_max": _POS, "x0": _NUM, "T": _POS, "K": _INT1, "lam_box": _PAIR, "mu_box": _PAIR,
            "starts": _INT1, "max_iter": _INT1, "x_star": _NUM, "lam_cap": _POS, "delta": _NUM,
            "theta_lam": _PAIR, "theta_mu": _PAIR,
            "gap": {
                "type": "object",
                "properties": {"z0": _DENSITY, "n_list": {"type": "array", "items": _INT1, "minItems": 1},
                               "paths": {"type": "integer", "minimum": 2}, "engine": _ENGINE},
                "required": ["z0", "n_list", "paths"],
                "additionalProperties": False,
            },
            "seed": {"type": "integer", "minimum": 0},
        },
        "required": ["spec", "mode"],
        "additionalProperties": False,
    },
    "construct": {
        "type": "object",
        "properties": {
            "field": {"type": "array", "items": POLY_SCHEMA, "minItems": 1},
            "P": {"type": "array", "items": POLY_SCHEMA}, "N": {"type": "array", "items": POLY_SCHEMA},
            "mode": {"enum": ["auto", "user"]}, "procedure": {"enum": [1, 2]}, "alpha": _POS, "n": _INT1,
            "B": _POS, "with_n_scaling": {"type": "boolean"},
            "a": _POS, "b": _POS, "c": _POS, "events": _INT1, "record_every": _INT1,
            "variant": {"enum": ["rescaled", "displayed"]}, "decomposition": {"enum": ["auto", "monomial"]},
            "x0": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
            "seed": {"type": "integer", "minimum": 0},
        },
        "additionalProperties": False,
    },
}


class ConfigError(Exception):
    pass


def _format_path(err) -> str:
    parts = ["config"] + [f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path]
    path = parts[0] + "".join(parts[1:])
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        path += f".{missing}" if missing else ""
    return path


def validate_config(command: str, cfg) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (len(list(e.absolute_path)), str(e.message)))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    # descend into the most specific alternative of oneOf/anyOf
    while err.context:
        err = jsonschema.exceptions.best_match(err.context)
    raise ConfigError(f"{_format_path(err)}: {err.message}")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _manifest(out: Path, command: str, cfg: dict, seed: int, files: list[str]) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "seed": seed,
        "version": __version__,
        "backend": _backend.BACKEND,
        "numpy": np.__version__,
        "outputs": sorted(files),
    })


def _initial_state(model, cfg, n):
    from .analysis import lattice_state

    if "x0" in cfg:
        x0 = np.asarray(cfg["x0"], dtype=np.int64)
    else:
        x0 = lattice_state(cfg["z0"], n)
    if len(x0) != model.d:
        raise ConfigError(f"config.{'x0' if 'x0' in cfg else 'z0'}: expected {model.d} entries, got {len(x0)}")
    return x0


# ---------------------------------------------------------------------------
# subcommands; each returns (prepare, run) so configuration problems surface before any work


def cmd_simulate(cfg, out: Path, seed: int, threads: int):
    from .model import model_from_dict
    from .simulate import simulate, simulate_ensemble

    model = model_from_dict(cfg["model"])
    n = cfg["n"]
    x0 = _initial_state(model, cfg, n)
    horizon = float(cfg["horizon"])
    engine = cfg.get("engine", "thinning")
    paths = cfg.get("paths", 1)
    kw = {"max_events": cfg.get("max_events"), "record_every": cfg.get("record_every", 1)}
    model.check_state(x0 / n)

    def run():
        files = []
        width = len(str(paths - 1))
        for i in range(paths):
            p = simulate(model, n, x0, horizon, seed, engine=engine, path_index=i, **kw)
            name = f"path_{i:0{width}d}.csv"
            p.to_csv(out / name)
            files.append(name)
        if paths > 1:
            grid = np.linspace(0.0, horizon, cfg.get("grid_points", 101))
            ens = simulate_ensemble(model, n, x0, horizon, paths, grid=grid, seed=seed, engine=engine,
                                    threads=threads, **kw)
            ens.write(out / "ensemble.csv", out / "ensemble.json")
            files += ["ensemble.csv", "ensemble.json"]
        return files

    return run


def cmd_meanfield(cfg, out: Path, seed: int, threads: int):
    from .meanfield import integrate, moment_bounds
    from .model import drift_field, model_from_dict
    from .rates import as_rate

    model = model_from_dict(cfg["model"])
    z0 = np.asarray(cfg["z0"], dtype=float)
    if len(z0) != model.d:
        raise ConfigError(f"config.z0: expected {model.d} entries, got {len(z0)}")
    model.check_state(z0)
    horizon = float(cfg["horizon"])
    grid = np.linspace(0.0, horizon, cfg.get("grid_points", 201))
    mb = cfg.get("moment_bounds")
    if mb is not None:
        mb_args = (as_rate(mb["lambda"]), as_rate(mb["mu"]), float(mb["y0"]), float(mb["n"]))

    def run():
        traj = integrate(drift_field(model), z0, (0.0, horizon), rtol=cfg.get("rtol", 1e-9),
                         atol=cfg.get("atol", 1e-11))
        traj.to_csv(out / "trajectory.csv", grid)
        files = ["trajectory.csv"]
        if mb is not None:
            bounds = moment_bounds(*mb_args, (0.0, horizon), tol=mb.get("tol", 1e-10))
            bounds.to_csv(out / "moment_bounds.csv", grid)
            files.append("moment_bounds.csv")
        return files

    return run


def cmd_converge(cfg, out: Path, seed: int, threads: int):
    from .analysis import convergence_experiment
    from .model import model_from_dict

    model = model_from_dict(cfg["model"])
    z0 = np.asarray(cfg["z0"], dtype=float)
    if len(z0) != model.d:
        raise ConfigError(f"config.z0: expected {model.d} entries, got {len(z0)}")
    n_list = cfg["n_list"]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("config.n_list: values must be strictly increasing")
    horizon = float(cfg["horizon"])

    def run():
        rep = convergence_experiment(model, z0, horizon, n_list, cfg["paths"], seed,
                                     engine=cfg.get("engine", "thinning"), threads=threads,
                                     grid=np.linspace(0.0, horizon, cfg.get("grid_points", 201)))
        rep.to_csv(out / "convergence.csv")
        _write_json(out / "convergence.json", rep.summary())
        return ["convergence.csv", "convergence.json"]

    return run


def cmd_stability(cfg, out: Path, seed: int, threads: int):
    from .analysis import (asymptote_check, classify_time_varying, default_psi, delta_neighborhood,
                           lyapunov_derivative_check, sis_trajectory)
    from .rates import as_rate

    lam, mu = as_rate(cfg["lambda"]), as_rate(cfg["mu"])
    c, x0, T = float(cfg["c"]), float(cfg["x0"]), float(cfg["horizon"])
    if not 0.0 <= x0 <= c:
        raise ConfigError("config.x0: must lie in [0, c]")
    if lam.bounds(0.0, T)[0] <= 0.0:
        raise ConfigError("config.lambda: must be strictly positive on the horizon")
    grid = np.linspace(0.0, T, cfg.get("grid_points", 2001))

    def run():
        rep = classify_time_varying(lam, mu, c, (0.0, T))
        traj = sis_trajectory(lam, mu, c, x0, T)
        traj.to_csv(out / "trajectory.csv", grid, labels=("x",))
        lyap = None
        if rep.case == 1:
            psi = cfg.get("psi")
            psi = default_psi(lam, mu, x0, c, (0.0, T)) if psi is None else float(psi)
            delta = delta_neighborhood(lam, mu, psi, c, (0.0, T), cfg.get("t_burn"))
            rep.delta = delta
            rep.details["psi"] = psi
            t_tail = 0.5 * T if cfg.get("t_burn") is None else float(cfg["t_burn"])
            rep.details["asymptote_ok"] = asymptote_check(traj, lambda t: mu(t) / lam(t), delta, t_tail, grid)
            lr = lyapunov_derivative_check(lam, mu, c, traj, delta, psi, grid)
            lyap = {"checked": lr.checked, "violations": lr.violations, "max_vdot": lr.max_vdot,
                    "t_violations": lr.t_violations, "delta": delta, "psi": psi}
        rep.to_json(out / "equilibrium.json")
        _write_json(out / "lyapunov.json", lyap if lyap is not None else {"skipped": f"case {rep.case}"})
        return ["equilibrium.json", "trajectory.csv", "lyapunov.json"]

    return run


def cmd_control(cfg, out: Path, seed: int, threads: int):
    from .control import (ControlPolicy, ControlResult, RewardSpec, constrained_ideal_policy,
                          finite_horizon_control, ideal_trajectory_policy, mean_field_control_gap,
                          rollout_value, stationary_cure_rate)

    spec = RewardSpec.from_dict(cfg["spec"])
    mode = cfg["mode"]
    needed = {"stationary": ["lambda"], "finite_horizon": ["x0", "T"], "ideal": ["x_star", "lam_cap"],
              "constrained": ["x_star", "delta"]}[mode]
    for key in needed:
        if key not in cfg:
            raise ConfigError(f"config.{key}: required for mode {mode!r}")

    def run():
        files = []
        result = None
        if mode == "stationary":
            mu_star, value = stationary_cure_rate(spec, cfg["lambda"], cfg.get("mu_max"))
            policy = ControlPolicy.stationary(cfg["lambda"], mu_star)
            result = ControlResult(policy, value, [{"iteration": 0, "start": 0, "phase": "grid",
                                                    "best_value": value}])
        elif mode == "finite_horizon":
            result = finite_horizon_control(spec, cfg["x0"], cfg["T"], cfg.get("K", 32),
                                            tuple(cfg.get("lam_box", (0.0, 50.0))),
                                            tuple(cfg.get("mu_box", (0.0, 50.0))), seed=seed,
                                            starts=cfg.get("starts", 5), max_iter=cfg.get("max_iter", 100))
            policy = result.policy
        elif mode == "ideal":
            policy = ideal_trajectory_policy(cfg["x_star"], cfg["lam_cap"], spec)
        else:
            T = cfg.get("T", 10.0)
            policy = constrained_ideal_policy(spec, cfg["x_star"], cfg["delta"],
                                              tuple(cfg.get("theta_lam", (-math.inf, math.inf))),
                                              tuple(cfg.get("theta_mu", (-math.inf, math.inf))),
                                              np.linspace(0.0, T, cfg.get("K", 32) + 1), cfg.get("lam_cap", 50.0))
        policy.to_json(out / "policy.json")
        files.append("policy.json")
        if result is not None:
            result.log_to_csv(out / "objective_log.csv")
            files.append("objective_log.csv")
        elif "x0" in cfg:
            # rolled-out mean-field objective of the prescribed policy
            T = cfg.get("T", 10.0)
            value = rollout_value(spec, cfg["x0"], policy, T)
            _write_json(out / "value.json", {"value": value, "x0": cfg["x0"], "T": T})
            files.append("value.json")
        gap = cfg.get("gap")
        if gap is not None:
            T = cfg.get("T", 10.0)
            rep = mean_field_control_gap(policy, gap["z0"], T, gap["n_list"], gap["paths"], seed,
                                         engine=gap.get("engine", "thinning"), threads=threads)
            rep.to_csv(out / "gap.csv")
            files.append("gap.csv")
        return files

    return run


def cmd_construct(cfg, out: Path, seed: int, threads: int, preset: str | None = None):
    from .construct import (LORENZ_BOX, affine_rescale, build_population_model, build_sign_model,
                            decompose_field, lorenz_model, lorenz_start)
    from .model import Polynomial
    from .simulate import simulate

    if preset == "lorenz":
        a, b, c = cfg.get("a", 10.0), cfg.get("b", 28.0), cfg.get("c", 8.0 / 3.0)
        alpha, n = cfg.get("alpha", 0.015), cfg.get("n", 6000)
        variant = cfg.get("variant", "rescaled")
        model = lorenz_model(a, b, c, alpha, n, variant=variant, decomposition=cfg.get("decomposition", "auto"),
                             B=cfg.get("B", 1.0 / 3.0))
        rescale = affine_rescale(LORENZ_BOX, model.meta["B"])

        def run():
            _write_json(out / "model.json", {"model": model.to_dict(), "provenance": _provenance(model)})
            x0 = lorenz_start(rescale, n, cfg.get("x0", (1.0, 1.0, 20.0)))
            path = simulate(model, n, x0, math.inf, seed, max_events=cfg.get("events", 1_000_000),
                            record_every=cfg.get("record_every", 100))
            dens = path.density
            X = rescale.inverse(dens[:, :3]) if variant == "rescaled" else dens[:, :3]
            _write_rows(out / "phase_portrait.csv", ["t", "x1", "x2", "x3"], path.times, X)
            _write_rows(out / "timeseries.csv", ["t", "x1", "x2", "x3", "x4"], path.times, dens)
            return ["model.json", "phase_portrait.csv", "timeseries.csv"]

        return run
    if preset is not None:
        raise ConfigError(f"unknown preset {preset!r}")
    if "field" not in cfg:
        raise ConfigError("config.field: required unless --preset is given")
    m = len(cfg["field"])
    F = [Polynomial.from_dict(p, m) for p in cfg["field"]]
    alpha, n = cfg.get("alpha", 1.0), cfg.get("n")
    B = cfg.get("B", 1.0 / m)
    if cfg.get("procedure", 1) == 2:
        model = build_sign_model(F, alpha, n, B=B, with_n_scaling=cfg.get("with_n_scaling", True))
    else:
        mode = cfg.get("mode", "auto")
        if mode == "user":
            if "P" not in cfg or "N" not in cfg:
                raise ConfigError("config.P: user mode needs both P and N")
            dec = decompose_field(F, B=B, mode="user", P=[Polynomial.from_dict(p, m) for p in cfg["P"]],
                                  N=[Polynomial.from_dict(p, m) for p in cfg["N"]])
        else:
            dec = decompose_field(F, B=B)
        model = build_population_model(dec, alpha, n, cfg.get("with_n_scaling", True))

    def run():
        _write_json(out / "model.json", {"model": model.to_dict(), "provenance": _provenance(model)})
        return ["model.json"]

    return run


def _provenance(model) -> dict:
    return dict(model.meta)


def _write_rows(path, header, times, values) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, row in zip(times.tolist(), np.asarray(values).tolist()):
            w.writerow([repr(t)] + [repr(float(v)) for v in row])


COMMANDS = {
    "simulate": cmd_simulate,
    "meanfield": cmd_meanfield,
    "converge": cmd_converge,
    "stability": cmd_stability,
    "control": cmd_control,
    "construct": cmd_construct,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddpop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="parallel width (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "construct":
            p.add_argument("--preset", choices=["lorenz"], default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Path(args.out)
    try:
        if args.config is None and not (args.command == "construct" and args.preset):
            raise ConfigError("--config is required")
        cfg = load_config(args.config)
        validate_config(args.command, cfg)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        kwargs = {"preset": args.preset} if args.command == "construct" else {}
        run = COMMANDS[args.command](cfg, out, seed, threads, **kwargs)
    except (ConfigError, DdpopError, ValueError, KeyError, TypeError) as exc:
        print(f"ddpop {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = run()
        _manifest(out, args.command, cfg, seed, files)
    except Exception as exc:  # noqa: BLE001
        print(f"ddpop {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
