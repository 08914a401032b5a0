"""Reusable experiment drivers shared by the command line and the test gate.

The heavy measurements all follow one pattern: equilibrate an ensemble of
lockstep replicas once, then reuse its states with common random numbers
across every integrator setting under comparison, so that ratios and
bisections are smooth in the swept parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from immp.analysis import (
    CriticalDtResult,
    autocorr_and_decorrelation,
    calibrate_level,
    critical_dt,
    pathwise_error_order,
)
from immp.integrators import (
    ImmpSystem,
    IntegratorConfig,
    PhaseState,
    _leapfrog_core,
)
from immp.models.alkane import AlkaneModel, alkane_system, butane_system
from immp.models.simple import StiffRadialModel, stiff_system
from immp.sampling import ExperimentRecord, ThermostatSpec, run_chain

__all__ = [
    "butane_label_system",
    "alkane_label_system",
    "equilibrium_positions",
    "one_step_dh_trials",
    "critical_dt_for_label",
    "CritDtTable",
    "butane_critdt_table",
    "alkane_scaling_tables",
    "sample_lengths",
    "histogram_l1",
    "decorrelation_time",
    "interpolation_orders",
    "consistency_order",
    "stiff_sweep",
]

#: butane table entries in presentation order
BUTANE_LABELS = ("verlet", "nu=0.5", "nu=1.0", "nu=1.3", "nu=1.9", "rattle")

_SAFE_DT = 0.006
_POOL_BURN = 3000


def butane_label_system(label: str, *, beta: float = 1.0) -> ImmpSystem:
    """Butane systems of the stability study, keyed by column label."""
    if label == "verlet":
        return butane_system(0.0, beta=beta)
    if label == "rattle":
        return butane_system(0.0, rigid_angles=True, beta=beta)
    if label.startswith("nu="):
        return butane_system(float(label[3:]), beta=beta)
    raise ValueError(f"unknown label {label!r}")


def alkane_label_system(label: str, n_atoms: int, *, nubar: float = 0.3, beta: float = 1.0) -> ImmpSystem:
    """Long-chain systems: baseline with free torsions or size-scaled penalty."""
    if label == "verlet":
        return alkane_system(n_atoms, 0.0, beta=beta)
    if label == "immp":
        return alkane_system(n_atoms, nubar * n_atoms, beta=beta)
    raise ValueError(f"unknown label {label!r}")


def _default_cfg(system: ImmpSystem, dt: float) -> IntegratorConfig:
    return IntegratorConfig(
        dt=dt,
        use_fixman_force=False,
        force_split=system.split is not None,
        strict_geometry=False,
    )


def equilibrium_positions(
    system: ImmpSystem,
    n_states: int,
    seed: int,
    *,
    dt: float = _SAFE_DT,
    gamma: float = 1.0,
    replicas: int = 128,
    burn_in: int = _POOL_BURN,
    stride: int = 20,
) -> np.ndarray:
    """Pool of equilibrium positions from a long chain run at a safe step.

    Returns an array (n_states, d).  All penalized variants share the
    position marginal of the unpenalized chain, so one pool serves a whole
    penalty sweep.
    """
    model = system.model
    q0 = np.tile(model.zigzag_positions(), (replicas, 1))
    cfg = _default_cfg(system, dt)
    thermo = ThermostatSpec(beta=system.beta, gamma=gamma, gamma_z=gamma)
    records = int(np.ceil(n_states / replicas))
    n_steps = burn_in + records * stride
    rec = run_chain(
        system,
        cfg,
        thermo,
        n_steps=n_steps,
        seed=seed,
        q0=q0,
        observables={"q": lambda q: q},
        burn_in=burn_in,
        record_stride=stride,
    )
    pool = rec.observables["q"].reshape(-1, system.dim)
    if rec.stats.n_newton_fail:
        raise RuntimeError("constraint solver failed during equilibration")
    return pool[:n_states]


def one_step_dh_trials(system: ImmpSystem, pool: np.ndarray, seed: int, *, mode: str):
    """Common-random-number one-step energy errors as a function of dt.

    Positions come from the pool; momenta are one fixed set of Gaussian
    draws projected onto the constrained momentum space.  ``dyn`` reports
    the energy change of the integrator's own Hamiltonian (corrector forces
    off); ``sampl`` the full target-energy change entering the Metropolis
    weight.
    """
    rng = np.random.default_rng(seed)
    zeta = rng.standard_normal((pool.shape[0], system.dim + system.n_pen))
    p, p_z = system.sample_momenta(pool, zeta=zeta)
    base = system.extend_state(pool, p)
    states = PhaseState(base.q, p, base.z, p_z)

    def trials(dt: float) -> np.ndarray:
        cfg = _default_cfg(system, dt)
        out = _leapfrog_core(system, cfg, states, None)
        if mode == "dyn":
            return out.delta_h
        cache0 = system.build_cache(states.q, cfg)
        fix0 = system.ensure_fixman(cache0)
        fix1 = system.ensure_fixman(out.cache)
        dh = out.d_kin + (out.cache.pot_v - cache0.pot_v) + (fix1 - fix0)
        return np.where(out.in_domain, dh, np.inf)

    return trials


def critical_dt_for_label(
    system: ImmpSystem,
    pool: np.ndarray,
    *,
    mode: str,
    level: float,
    bracket: tuple[float, float],
    seed: int,
) -> CriticalDtResult:
    trials = one_step_dh_trials(system, pool, seed, mode=mode)
    return critical_dt(
        trials,
        mode,
        level,
        bracket,
        beta=system.beta,
        n_free_dof=system.dim - len(system.rigid_idx),
        stderr_rng=np.random.default_rng(seed + 1),
    )


@dataclass
class CritDtTable:
    """Critical-step table with the level calibrated on a reference entry."""

    mode: str
    level: float
    reference_label: str
    reference_dt: float
    entries: dict[str, CriticalDtResult]

    def dt(self, label: str) -> float:
        return self.entries[label].dt_c


def _calibrated_table(
    systems: dict[str, ImmpSystem],
    pools: dict[str, np.ndarray],
    *,
    mode: str,
    reference_label: str,
    reference_dt: float,
    bracket: tuple[float, float],
    seed: int,
) -> CritDtTable:
    ref_sys = systems[reference_label]
    trials = one_step_dh_trials(ref_sys, pools[reference_label], seed, mode=mode)
    level = calibrate_level(
        trials,
        mode,
        reference_dt,
        beta=ref_sys.beta,
        n_free_dof=ref_sys.dim - len(ref_sys.rigid_idx),
    )
    entries = {}
    for label, system in systems.items():
        entries[label] = critical_dt_for_label(
            system, pools[label], mode=mode, level=level, bracket=bracket, seed=seed
        )
    return CritDtTable(
        mode=mode,
        level=level,
        reference_label=reference_label,
        reference_dt=reference_dt,
        entries=entries,
    )


def butane_critdt_table(
    mode: str,
    *,
    reference_dt: float,
    n_trials: int = 10_000,
    seed: int = 2024,
    labels: tuple[str, ...] = BUTANE_LABELS,
    bracket: tuple[float, float] = (0.004, 0.2),
) -> CritDtTable:
    """Butane critical steps with the level pinned on the baseline column.

    One equilibrium pool serves every penalized column (their position
    marginals agree); the fully constrained column equilibrates separately.
    """
    systems = {label: butane_label_system(label) for label in labels}
    shared_pool = equilibrium_positions(systems["verlet"], n_trials, seed)
    pools = {}
    for label in labels:
        if label == "rattle":
            pools[label] = equilibrium_positions(systems["rattle"], n_trials, seed + 7)
        else:
            pools[label] = shared_pool
    return _calibrated_table(
        systems,
        pools,
        mode=mode,
        reference_label="verlet",
        reference_dt=reference_dt,
        bracket=bracket,
        seed=seed,
    )


def alkane_scaling_tables(
    n_atoms: int,
    *,
    nubar: float = 0.3,
    reference_dt_dyn: float | None = None,
    reference_dt_sampl: float | None = None,
    level_dyn: float | None = None,
    level_sampl: float | None = None,
    n_trials: int = 8_000,
    seed: int = 99,
) -> dict[str, CritDtTable | dict]:
    """Size-scaled penalty study on one chain length: dyn and sampl tables."""
    systems = {lab: alkane_label_system(lab, n_atoms, nubar=nubar) for lab in ("verlet", "immp")}
    pool = equilibrium_positions(systems["verlet"], n_trials, seed, dt=0.004)
    pools = {lab: pool for lab in systems}
    out: dict = {}
    for mode, level, ref_dt in (
        ("dyn", level_dyn, reference_dt_dyn),
        ("sampl", level_sampl, reference_dt_sampl),
    ):
        if level is None and ref_dt is None:
            continue
        if level is None:
            table = _calibrated_table(
                systems, pools, mode=mode, reference_label="verlet",
                reference_dt=ref_dt, bracket=(0.002, 0.9), seed=seed,
            )
        else:
            entries = {
                lab: critical_dt_for_label(
                    systems[lab], pools[lab], mode=mode, level=level,
                    bracket=(0.002, 0.9), seed=seed,
                )
                for lab in systems
            }
            table = CritDtTable(mode=mode, level=level, reference_label="",
                                reference_dt=float("nan"), entries=entries)
        out[mode] = table
    return out


# ---------------------------------------------------------------------------
# sampling experiments
# ---------------------------------------------------------------------------

def sample_lengths(
    system: ImmpSystem,
    dt: float,
    *,
    n_samples: int,
    seed: int,
    gamma: float = 1.0,
    replicas: int = 1024,
    burn_in: int = 800,
    target_fixman: bool = True,
    q0_pool: np.ndarray | None = None,
) -> tuple[np.ndarray, ExperimentRecord]:
    """End-to-end length samples from a lockstep Metropolis ensemble.

    Returns (lengths with shape (steps, replicas), record).  Starting states
    come from an equilibrated pool when given, otherwise from the zig-zag
    configuration (burn-in then absorbs the transient).
    """
    model: AlkaneModel = system.model
    steps = int(np.ceil(n_samples / replicas))
    if q0_pool is not None:
        idx = np.random.default_rng(seed + 3).integers(0, q0_pool.shape[0], size=replicas)
        q0 = q0_pool[idx]
    else:
        q0 = np.tile(model.zigzag_positions(), (replicas, 1))
    cfg = _default_cfg(system, dt)
    rec = run_chain(
        system,
        cfg,
        ThermostatSpec(beta=system.beta, gamma=gamma, gamma_z=gamma),
        n_steps=burn_in + steps,
        seed=seed,
        q0=q0,
        observables={"length": model.end_to_end},
        burn_in=burn_in,
        target_fixman=target_fixman,
    )
    return rec.observables["length"], rec


def histogram_l1(
    a: np.ndarray, b: np.ndarray, *, bins: int = 100, lo: float | None = None, hi: float | None = None
) -> float:
    """L1 distance between two normalized histograms on a shared grid."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    lo = min(a.min(), b.min()) if lo is None else lo
    hi = max(a.max(), b.max()) if hi is None else hi
    pa, _ = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return float(np.abs(pa / pa.sum() - pb / pb.sum()).sum())


def decorrelation_time(series: np.ndarray) -> float:
    """Squared-sum decorrelation time of a (steps, replicas) observable log."""
    _, n_corr = autocorr_and_decorrelation(series)
    return n_corr


# ---------------------------------------------------------------------------
# deterministic interpolation experiments
# ---------------------------------------------------------------------------

def _butane_dyn_initial(seed: int, energy: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium geometry with rescaled momenta at a prescribed energy.

    Momenta live in the cotangent space of both bond and angle constraints
    so the trajectory family has a well-defined fully constrained limit.
    """
    rng = np.random.default_rng(seed)
    sys_r = butane_system(0.0, rigid_angles=True)
    q0 = sys_r.model.zigzag_positions()
    p, _ = sys_r.sample_momenta(q0, rng)
    kin = 0.5 * np.sum(p * p)
    p = p * np.sqrt(energy / kin)
    return q0, p


def _run_deterministic(system: ImmpSystem, dt: float, n_steps: int,
                       q0: np.ndarray, p0: np.ndarray) -> np.ndarray:
    """Length trajectory of the deterministic constrained leapfrog."""
    cfg = _default_cfg(system, dt)
    state = system.extend_state(q0, p0)
    model = system.model
    out = np.empty(n_steps)
    cache = None
    for i in range(n_steps):
        step = _leapfrog_core(system, cfg, state, cache)
        if not np.all(step.in_domain):
            raise RuntimeError(f"constraint solve failed at step {i} (dt={dt})")
        state, cache = step.state, step.cache
        out[i] = model.end_to_end(state.q)
    return out


def interpolation_orders(
    *,
    dt: float = 2e-3,
    t_final: float = 0.25,
    small_nus: tuple = (0.05, 0.1, 0.2, 0.4),
    large_nus: tuple = (4.0, 8.0, 16.0, 32.0),
    seed: int = 11,
) -> dict:
    """Pathwise convergence orders of the penalized butane dynamics.

    The small-penalty family is compared with the bond-constrained baseline
    (order two in nu), the large-penalty family with the fully constrained
    run (order minus two).
    """
    q0, p0 = _butane_dyn_initial(seed)
    n_steps = int(round(t_final / dt))
    ref_small = _run_deterministic(butane_system(0.0), dt, n_steps, q0, p0)
    ref_large = _run_deterministic(butane_system(0.0, rigid_angles=True), dt, n_steps, q0, p0)
    fam_small = [_run_deterministic(butane_system(nu), dt, n_steps, q0, p0) for nu in small_nus]
    fam_large = [_run_deterministic(butane_system(nu), dt, n_steps, q0, p0) for nu in large_nus]
    slope_small, err_small = pathwise_error_order(fam_small, ref_small, list(small_nus))
    slope_large, err_large = pathwise_error_order(fam_large, ref_large, list(large_nus))
    return {
        "slope_small": slope_small,
        "errors_small": err_small,
        "slope_large": slope_large,
        "errors_large": err_large,
        "dt": dt,
        "small_nus": list(small_nus),
        "large_nus": list(large_nus),
    }


def consistency_order(
    *,
    nubar: float = 1.0,
    dts: tuple = (4e-3, 2e-3, 1e-3),
    t_final: float = 0.4,
    dt_ref: float = 5e-5,
    seed: int = 23,
) -> tuple[float, np.ndarray]:
    """Global order of the penalized scheme under the step-scaled penalty.

    The penalty nu = nubar * dt vanishes with the step; trajectories are
    compared on the coarsest grid against a high-resolution unpenalized
    reference, giving the classical second order.
    """
    q0, p0 = _butane_dyn_initial(seed)
    coarse = max(dts)
    stride_ref = int(round(coarse / dt_ref))
    n_ref = int(round(t_final / dt_ref))
    ref = _run_deterministic(butane_system(0.0), dt_ref, n_ref, q0, p0)[stride_ref - 1 :: stride_ref]
    fam = []
    for dt in dts:
        stride = int(round(coarse / dt))
        n = int(round(t_final / dt))
        traj = _run_deterministic(butane_system(nubar * dt), dt, n, q0, p0)
        fam.append(traj[stride - 1 :: stride])
    slope, errors = pathwise_error_order(fam, ref, list(dts))
    return slope, errors


# ---------------------------------------------------------------------------
# stiff-scaling experiment
# ---------------------------------------------------------------------------

def _effective_reference(
    model: StiffRadialModel, nubar: float, dt: float, n_steps: int,
    q0: np.ndarray, p0: np.ndarray, z0: np.ndarray, pz0: np.ndarray,
) -> np.ndarray:
    """Zero-stiffness limit scheme: rigid radial constraint, slow force on q,
    rescaled fast force on the auxiliary oscillator."""
    from immp.geometry import radial_map
    from immp.integrators import ImmpSystem as _Sys

    class _SlowModel:
        dim = 2
        mass = model.mass

        @staticmethod
        def potential(q):
            return model.slow_potential(q)

        @staticmethod
        def force(q):
            return model.slow_force(q)

    sys_q = _Sys(_SlowModel(), constraints=radial_map(2, 1.0),
                 penalized=np.array([False]), rigid_targets=np.array([0.0]))
    cfg = IntegratorConfig(dt=dt)
    state = PhaseState(q0, p0, np.zeros(q0.shape[:-1] + (0,)), np.zeros(q0.shape[:-1] + (0,)))
    z, pz = z0.copy(), pz0.copy()
    angles = np.empty(n_steps)
    cache = None
    for i in range(n_steps):
        # auxiliary oscillator: leapfrog with force -z/nubar^2 (decoupled here)
        pz = pz - 0.5 * dt * z / nubar**2
        z = z + dt * pz
        pz = pz - 0.5 * dt * z / nubar**2
        out = _leapfrog_core(sys_q, cfg, state, cache)
        state, cache = out.state, out.cache
        angles[i] = np.arctan2(state.q[..., 1], state.q[..., 0])
    return angles


def stiff_sweep(
    *,
    nubar: float = 0.5,
    eps_list: tuple = (1e-1, 1e-2, 1e-3),
    dt: float = 0.05,
    t_final: float = 5.0,
    theta0: float = 0.4,
    seed: int = 0,
) -> dict:
    """Fixed-step stability of the penalized scheme as the stiffness grows.

    The particle starts on the circle with a tangent kick; for each
    stiffness the penalty is nubar/eps.  Reports the sup distance of the
    angle trajectory to the zero-stiffness effective scheme and whether any
    run blew up.
    """
    n_steps = int(round(t_final / dt))
    q0 = np.array([np.cos(theta0), np.sin(theta0)])
    p0 = 0.6 * np.array([-np.sin(theta0), np.cos(theta0)])
    model = StiffRadialModel(epsilon=1.0)
    ref = _effective_reference(model, nubar, dt, n_steps, q0, p0, np.zeros(1), np.zeros(1))
    distances = []
    blew_up = []
    for eps in eps_list:
        system = stiff_system(eps, nubar)
        cfg = replace(_default_cfg(system, dt), force_split=True)
        state = system.extend_state(q0, p0)
        angles = np.empty(n_steps)
        cache = None
        ok = True
        for i in range(n_steps):
            out = _leapfrog_core(system, cfg, state, cache)
            ok = ok and bool(np.all(out.in_domain)) and bool(np.isfinite(out.state.q).all())
            state, cache = out.state, out.cache
            angles[i] = np.arctan2(state.q[..., 1], state.q[..., 0])
        distances.append(float(np.abs(angles - ref).max()))
        blew_up.append(not ok)
    return {
        "eps": list(eps_list),
        "distance_to_reference": distances,
        "blew_up": blew_up,
        "nubar": nubar,
        "dt": dt,
    }
