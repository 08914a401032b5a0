"""Batch experiment driver.

Each subcommand parses a flat JSON run configuration (plus ``--key value``
overrides), dispatches a simulation or analysis, and writes an RFC-4180 CSV
with 17 significant digits next to a JSON summary.  Outputs are a pure
function of the configuration and seed; reruns are byte identical.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical
failures (missed brackets, blow-up, singular geometry).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from immp.analysis import (
    BracketError,
    FitError,
    InsufficientDataError,
    autocorr_and_decorrelation,
    chain_cfl_dt,
    chain_dh_stats,
    chain_eigenvalues,
    macroscopic_convergence_experiment,
    spectral_density,
)
from immp.geometry import SingularGeometryError
from immp.integrators import IntegratorConfig
from immp.models.alkane import alkane_system, butane_system
from immp.models.chain import HarmonicChain
from immp.models.simple import quadratic_penalized_system, stiff_system
from immp.sampling import ThermostatSpec, run_chain

RNG_NAME = "numpy.random.PCG64"


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; unknown keys are rejected."""

    model: str = "butane"
    integrator: str = "immp"
    n_atoms: int = 4
    nu: float = 1.0
    nubar: float = 0.3
    epsilon: float = 0.01
    dt: float = 0.01
    steps: int = 1000
    seed: int = 0
    beta: float = 1.0
    gamma: float = 1.0
    gamma_z: float = 1.0
    use_fixman_force: bool = False
    metropolis: bool = True
    observables: list = field(default_factory=lambda: ["end_to_end"])
    burn_in: int = -1  # -1 selects the default (10 percent)
    out: str = "run"

    MODELS = ("butane", "alkane", "chain", "stiff", "oscillator")
    INTEGRATORS = ("verlet", "immp", "immp-split", "rattle")

    def validate(self):
        if self.model not in self.MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.integrator not in self.INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.nu < 0 or self.nubar < 0:
            raise ConfigError("penalty intensities must be non-negative")
        return self


_BOOL_KEYS = {"use_fixman_force", "metropolis"}


def _coerce(key: str, value, target_type):
    if isinstance(value, str):
        if key in _BOOL_KEYS or target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"cannot parse boolean {key}={value!r}")
        if target_type is list:
            return [v for v in value.split(",") if v]
        try:
            return target_type(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key}={value!r}") from exc
    return value


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Read the JSON file, apply ``key value`` override pairs, fail closed."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    data: dict = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a flat JSON object")
    if len(overrides) % 2:
        raise ConfigError("overrides come in key value pairs")
    for key, value in zip(overrides[::2], overrides[1::2]):
        data[key.lstrip("-").replace("-", "_")] = value
    cfg = RunConfig()
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown configuration key {key!r}")
        ftype = type(getattr(cfg, key))
        setattr(cfg, key, _coerce(key, value, ftype))
    return cfg.validate()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _pool_size() -> int:
    env = os.environ.get("IMMP_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _map_parallel(fn, items):
    if len(items) <= 1 or _pool_size() == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_pool_size()) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# system construction
# ---------------------------------------------------------------------------

def build_system(cfg: RunConfig):
    if cfg.model == "butane":
        if cfg.integrator == "verlet":
            return butane_system(0.0, n_atoms=cfg.n_atoms, beta=cfg.beta)
        if cfg.integrator == "rattle":
            return butane_system(0.0, n_atoms=cfg.n_atoms, rigid_angles=True, beta=cfg.beta)
        return butane_system(cfg.nu, n_atoms=cfg.n_atoms, beta=cfg.beta)
    if cfg.model == "alkane":
        if cfg.integrator == "verlet":
            return alkane_system(cfg.n_atoms, 0.0, beta=cfg.beta)
        if cfg.integrator == "rattle":
            raise ConfigError("rigid torsions freeze the chain; use verlet or immp-split")
        return alkane_system(cfg.n_atoms, cfg.nu, beta=cfg.beta)
    if cfg.model == "stiff":
        return stiff_system(cfg.epsilon, cfg.nubar, beta=cfg.beta)
    if cfg.model == "oscillator":
        nu = 0.0 if cfg.integrator == "verlet" else cfg.nu
        return quadratic_penalized_system(nu, beta=cfg.beta)
    raise ConfigError(f"model {cfg.model!r} has no phase-space runner")


_OBSERVABLES = {
    "end_to_end": lambda system: system.model.end_to_end,
    "potential": lambda system: system.potential,
    "q0": lambda system: (lambda q: q[..., 0]),
}


def _resolve_observables(cfg: RunConfig, system):
    obs = {}
    for name in cfg.observables:
        if name not in _OBSERVABLES:
            raise ConfigError(f"unknown observable {name!r}")
        try:
            obs[name] = _OBSERVABLES[name](system)
        except AttributeError as exc:
            raise ConfigError(f"observable {name!r} undefined for {cfg.model}") from exc
    return obs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if cfg.model == "chain":
        return _run_chain_model(cfg)
    system = build_system(cfg)
    icfg = IntegratorConfig(
        dt=cfg.dt,
        use_fixman_force=cfg.use_fixman_force,
        force_split=(cfg.integrator == "immp-split") or (cfg.model == "stiff"),
        strict_geometry=not cfg.metropolis,
    )
    thermo = ThermostatSpec(beta=cfg.beta, gamma=cfg.gamma, gamma_z=cfg.gamma_z)
    observables = _resolve_observables(cfg, system)
    if cfg.steps == 0:
        write_csv(
            f"{cfg.out}.csv",
            ["step", "time"] + cfg.observables + ["delta_h", "accepted", "constraint_residual"],
            [],
        )
        write_json(f"{cfg.out}.json", {"config": dataclasses.asdict(cfg), "rng": RNG_NAME,
                                       "n_steps": 0})
        return 0
    q0 = _initial_positions(cfg, system)
    rec = run_chain(
        system,
        icfg,
        thermo,
        n_steps=cfg.steps,
        seed=cfg.seed,
        q0=q0,
        observables=observables,
        burn_in=None if cfg.burn_in < 0 else cfg.burn_in,
        metropolis=cfg.metropolis,
    )
    if not cfg.metropolis and rec.stats.n_newton_fail:
        raise NumericalError(
            f"constraint solve failed {rec.stats.n_newton_fail} times without a Metropolis guard"
        )
    n_rec = rec.delta_h.shape[0]
    rows = (
        [
            rec.burn_in + i * rec.record_stride,
            (rec.burn_in + i * rec.record_stride) * cfg.dt,
            *[float(rec.observables[name][i]) for name in cfg.observables],
            float(rec.delta_h[i]),
            bool(rec.accepted[i]),
            float(rec.constraint_residual[i]),
        ]
        for i in range(n_rec)
    )
    write_csv(
        f"{cfg.out}.csv",
        ["step", "time"] + cfg.observables + ["delta_h", "accepted", "constraint_residual"],
        rows,
    )
    stats = rec.stats
    write_json(
        f"{cfg.out}.json",
        {
            "config": dataclasses.asdict(cfg),
            "rng": RNG_NAME,
            "n_steps": stats.n_steps,
            "n_accept": stats.n_accept,
            "n_newton_fail": stats.n_newton_fail,
            "acceptance_rate": stats.acceptance_rate,
            "mean_metropolis_weight": stats.mean_metropolis_weight,
            "mean_pos_dh_per_dof": stats.mean_pos_dh_per_dof,
        },
    )
    return 0


def _initial_positions(cfg: RunConfig, system) -> np.ndarray:
    if cfg.model in ("butane", "alkane"):
        return system.model.zigzag_positions()
    if cfg.model == "stiff":
        return np.array([1.0, 0.0])
    return np.zeros(system.dim)


def _run_chain_model(cfg: RunConfig) -> int:
    chain = HarmonicChain(
        n=cfg.n_atoms if cfg.n_atoms > 4 else 16,
        nubar=cfg.nubar,
        beta_n=cfg.beta / max(cfg.n_atoms, 2),
        gamma=cfg.gamma,
    )
    rng = np.random.default_rng(cfg.seed)
    q, p = chain.sample_canonical(rng)
    rows = []
    for i in range(cfg.steps):
        q, p = chain.step(q, p, cfg.dt, rng=rng)
        rows.append([i, (i + 1) * cfg.dt, float(np.sqrt(np.mean(q**2))), float(chain.energy(q, p))])
    write_csv(f"{cfg.out}.csv", ["step", "time", "q_rms", "energy"], rows)
    write_json(
        f"{cfg.out}.json",
        {"config": dataclasses.asdict(cfg), "rng": RNG_NAME, "n": chain.n, "nubar": chain.nubar},
    )
    return 0


def cmd_critdt(args) -> int:
    from immp.experiments import (
        alkane_label_system,
        butane_label_system,
        critical_dt_for_label,
        equilibrium_positions,
    )

    cfg = load_config(args.config, args.overrides)
    if cfg.model == "butane":
        label = {"verlet": "verlet", "rattle": "rattle"}.get(cfg.integrator, f"nu={cfg.nu}")
        system = butane_label_system(label, beta=cfg.beta)
    elif cfg.model == "alkane":
        label = "verlet" if cfg.integrator == "verlet" else "immp"
        system = alkane_label_system(label, cfg.n_atoms, nubar=cfg.nubar, beta=cfg.beta)
    else:
        raise ConfigError("critdt supports the butane and alkane models")
    pool = equilibrium_positions(system, args.samples, cfg.seed)
    if args.calibrate_dt is not None:
        from immp.experiments import one_step_dh_trials
        from immp.analysis import calibrate_level

        trials = one_step_dh_trials(system, pool, cfg.seed, mode=args.mode)
        level = calibrate_level(
            trials,
            args.mode,
            args.calibrate_dt,
            beta=cfg.beta,
            n_free_dof=system.dim - len(system.rigid_idx),
        )
    elif args.level is not None:
        level = args.level
    else:
        raise ConfigError("pass --level or --calibrate-dt")
    res = critical_dt_for_label(
        system, pool, mode=args.mode, level=level,
        bracket=(args.bracket[0], args.bracket[1]), seed=cfg.seed,
    )
    write_json(
        f"{cfg.out}.json",
        {
            "config": dataclasses.asdict(cfg),
            "rng": RNG_NAME,
            "mode": res.mode,
            "level": res.level,
            "calibrate_dt": args.calibrate_dt,
            "dt_c": res.dt_c,
            "stderr": res.stderr,
            "n_samples": res.n_samples,
            "evaluations": [[d, v] for d, v in res.evaluations],
        },
    )
    return 0


def _read_column(path: str, column: str) -> tuple[np.ndarray, float]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if column not in header:
            raise ConfigError(f"column {column!r} not in {path}")
        cidx = header.index(column)
        tidx = header.index("time") if "time" in header else None
        vals, times = [], []
        for row in reader:
            vals.append(float(row[cidx]))
            if tidx is not None:
                times.append(float(row[tidx]))
    if len(vals) < 2:
        raise ConfigError("need at least two rows")
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    return np.asarray(vals), dt


def cmd_butane_table(args) -> int:
    from immp.experiments import BUTANE_LABELS, butane_critdt_table

    reference = 0.024 if args.mode == "dyn" else 0.013
    table = butane_critdt_table(
        args.mode, reference_dt=reference, n_trials=args.samples, seed=args.seed
    )
    rows = [
        [label, table.entries[label].dt_c, table.entries[label].stderr]
        for label in BUTANE_LABELS
    ]
    write_csv(f"{args.out}.csv", ["label", "dt_c", "stderr"], rows)
    write_json(
        f"{args.out}.json",
        {
            "mode": args.mode,
            "level": table.level,
            "reference_label": table.reference_label,
            "reference_dt": table.reference_dt,
            "samples": args.samples,
            "seed": args.seed,
            "rng": RNG_NAME,
            "dt_c": {label: table.entries[label].dt_c for label in BUTANE_LABELS},
        },
    )
    return 0


def cmd_spectrum(args) -> int:
    series, dt = _read_column(args.input, args.column)
    if args.dt is not None:
        dt = args.dt
    spec = spectral_density(series, dt)
    write_csv(
        f"{args.out}.csv",
        ["omega", "density", "cumulative"],
        zip(spec.omega, spec.density, spec.cumulative),
    )
    write_json(
        f"{args.out}.json",
        {"input": args.input, "column": args.column, "dt": dt, "degenerate": spec.degenerate},
    )
    return 0


def cmd_autocorr(args) -> int:
    series, _ = _read_column(args.input, args.column)
    try:
        c, n_corr = autocorr_and_decorrelation(series)
    except InsufficientDataError as exc:
        raise NumericalError(str(exc)) from exc
    lags = min(args.max_lags, c.size)
    write_csv(f"{args.out}.csv", ["lag", "autocorrelation"], zip(range(lags), c[:lags]))
    write_json(
        f"{args.out}.json",
        {"input": args.input, "column": args.column, "n_corr": n_corr},
    )
    return 0


def cmd_chain_theory(args) -> int:
    delta = chain_eigenvalues(args.n)
    payload = {
        "n": args.n,
        "nubar": args.nubar,
        "dt": args.dt,
        "delta_k": list(delta),
        "dt_cfl": chain_cfl_dt(args.n, args.nubar),
    }
    stats = chain_dh_stats(args.n, args.nubar, args.dt, max(args.mc, 2), np.random.default_rng(args.seed))
    payload.update(
        {
            "m_exact": stats.m_exact,
            "sigma2_exact": stats.var_exact,
            "m_ratio_asymptotic": stats.m_ratio_asymptotic,
            "sigma2_ratio_asymptotic": stats.var_ratio_asymptotic,
        }
    )
    if args.mc > 1:
        payload.update(
            {
                "m_mc": stats.m_mc,
                "sigma2_mc": stats.var_mc,
                "m_mc_stderr": stats.m_mc_stderr,
                "sigma2_mc_stderr": stats.var_mc_stderr,
                "normality_p": stats.normality_p,
                "mc_samples": args.mc,
                "rng": RNG_NAME,
            }
        )
    write_json(f"{args.out}.json", payload)
    return 0


def cmd_converge_order(args) -> int:
    from immp.experiments import interpolation_orders

    res = interpolation_orders(dt=args.dt, seed=args.seed)
    rows = [["small", nu, err] for nu, err in zip(res["small_nus"], res["errors_small"])]
    rows += [["large", nu, err] for nu, err in zip(res["large_nus"], res["errors_large"])]
    write_csv(f"{args.out}.csv", ["side", "nu", "l2_error"], rows)
    write_json(
        f"{args.out}.json",
        {
            "dt": res["dt"],
            "slope_small_penalty": res["slope_small"],
            "slope_large_penalty": res["slope_large"],
        },
    )
    return 0


def cmd_stiff_sweep(args) -> int:
    from immp.experiments import stiff_sweep

    res = stiff_sweep(nubar=args.nubar, eps_list=tuple(args.eps), dt=args.dt)
    if any(res["blew_up"]):
        raise NumericalError("a stiff run blew up at fixed step size")
    write_csv(
        f"{args.out}.csv",
        ["epsilon", "distance_to_reference", "blew_up"],
        zip(res["eps"], res["distance_to_reference"], res["blew_up"]),
    )
    write_json(f"{args.out}.json", res)
    return 0


def cmd_macro_converge(args) -> int:
    def one(n):
        return macroscopic_convergence_experiment(
            [n], list(args.nubar), args.t_final, replicas=args.replicas, seed=args.seed
        )[0]

    rows = _map_parallel(one, list(args.n))
    write_csv(
        f"{args.out}.csv",
        ["n"] + [f"nubar={nb}" for nb in args.nubar],
        [[n, *row] for n, row in zip(args.n, rows)],
    )
    write_json(
        f"{args.out}.json",
        {
            "n": list(args.n),
            "nubar": list(args.nubar),
            "t_final": args.t_final,
            "max_sq_error": [list(r) for r in rows],
            "rng": RNG_NAME,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_config_args(sub):
    sub.add_argument("--config", help="flat JSON configuration file")
    sub.add_argument(
        "overrides",
        nargs="*",
        help="key value override pairs, e.g. nu 1.3 dt 0.01",
    )


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="immp",
        description="mass-penalized constrained dynamics and sampling experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("run", help="run a trajectory or sampling chain")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("critdt", help="bisect a critical time step")
    _add_config_args(p)
    p.add_argument("--mode", choices=("dyn", "sampl"), required=True)
    p.add_argument("--level", type=float, help="target error level or rejection rate")
    p.add_argument("--calibrate-dt", type=float, help="derive the level at this step")
    p.add_argument("--bracket", type=float, nargs=2, default=(0.004, 0.2))
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(func=cmd_critdt)

    p = subs.add_parser("butane-table", help="full critical-step table of the four-bead chain")
    p.add_argument("--mode", choices=("dyn", "sampl"), required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default="butane_table")
    p.set_defaults(func=cmd_butane_table)

    p = subs.add_parser("spectrum", help="frequency density of a CSV column")
    p.add_argument("--input", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--dt", type=float)
    p.add_argument("--out", default="spectrum")
    p.set_defaults(func=cmd_spectrum)

    p = subs.add_parser("autocorr", help="autocorrelation and decorrelation time")
    p.add_argument("--input", required=True)
    p.add_argument("--column", required=True)
    p.add_argument("--max-lags", type=int, default=2000)
    p.add_argument("--out", default="autocorr")
    p.set_defaults(func=cmd_autocorr)

    p = subs.add_parser("chain-theory", help="harmonic-chain closed forms")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--nubar", type=float, default=0.0)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--mc", type=int, default=0, help="cross-validate with this many draws")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="chain_theory")
    p.set_defaults(func=cmd_chain_theory)

    p = subs.add_parser("converge-order", help="penalty interpolation orders")
    p.add_argument("--dt", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", default="converge_order")
    p.set_defaults(func=cmd_converge_order)

    p = subs.add_parser("stiff-sweep", help="fixed-step stiffness sweep")
    p.add_argument("--nubar", type=float, default=0.5)
    p.add_argument("--eps", type=float, nargs="+", default=(1e-1, 1e-2, 1e-3))
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--out", default="stiff_sweep")
    p.set_defaults(func=cmd_stiff_sweep)

    p = subs.add_parser("macro-converge", help="chain macroscopic convergence table")
    p.add_argument("--n", type=int, nargs="+", default=(256,))
    p.add_argument("--nubar", type=float, nargs="+", default=(0.2, 0.1, 0.05))
    p.add_argument("--t-final", type=float, default=1.0)
    p.add_argument("--replicas", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="macro_converge")
    p.set_defaults(func=cmd_macro_converge)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, BracketError, FitError, SingularGeometryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
