"""Metropolis-corrected sampling chains built on the constrained leapfrog.

One chain step is: (1) a deterministic constrained leapfrog step with its
energy change, set to +inf when the constraint solve leaves its convergence
domain; (2) accept with probability min(1, exp(-beta dH)), restoring the
state and flipping both momentum blocks on rejection; (3) an exact
constrained fluctuation/dissipation step on the momenta.  The resulting
Markov chain leaves the penalized canonical distribution invariant, with a
position marginal independent of the penalty intensity.

The integrator may be driven by a substitute potential (typically the bare
potential, dropping the geometric-corrector forces); the acceptance test
always uses the full target energy, so the chain still samples exactly.

Everything broadcasts over leading state axes: a batch of replicas is a set
of independent chains advancing in lockstep and sharing one random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from immp.integrators import (
    ImmpSystem,
    IntegratorConfig,
    OuStep,
    PhaseState,
    QCache,
    TildePotential,
    _bwhere,
    _leapfrog_core,
)

__all__ = [
    "ThermostatSpec",
    "ChainStats",
    "ExperimentRecord",
    "ghmc_step",
    "ghmc_step_importance",
    "run_chain",
]


@dataclass(frozen=True)
class ThermostatSpec:
    """Inverse temperature and dissipation of the stochastic thermostat.

    ``gamma`` / ``gamma_z`` may be scalars or symmetric non-negative
    matrices.  The fluctuation matrices are derived internally as the
    symmetric square root of 2 gamma / beta, so the fluctuation-dissipation
    identity holds by construction.
    """

    beta: float
    gamma: float | np.ndarray = 1.0
    gamma_z: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class ChainStats:
    """Acceptance bookkeeping of one chain (or one lockstep ensemble)."""

    n_steps: int = 0
    n_accept: int = 0
    n_newton_fail: int = 0
    sum_pos_dh: float = 0.0
    sum_metropolis_weight: float = 0.0
    n_free_dof: int = 1

    @property
    def acceptance_rate(self) -> float:
        return self.n_accept / self.n_steps if self.n_steps else float("nan")

    @property
    def mean_metropolis_weight(self) -> float:
        return self.sum_metropolis_weight / self.n_steps if self.n_steps else float("nan")

    @property
    def mean_pos_dh_per_dof(self) -> float:
        return self.sum_pos_dh / (self.n_steps * self.n_free_dof) if self.n_steps else float("nan")


@dataclass
class ExperimentRecord:
    """Per-step trajectory, observable and acceptance log of one run."""

    observables: dict[str, np.ndarray]
    delta_h: np.ndarray
    accepted: np.ndarray
    constraint_residual: np.ndarray
    stats: ChainStats
    seed: int
    n_steps: int
    burn_in: int
    record_stride: int
    params: dict = field(default_factory=dict)

    def series(self, name: str) -> np.ndarray:
        """Observable time series flattened over replicas: shape (n_rec, R)."""
        arr = self.observables[name]
        return arr.reshape(arr.shape[0], -1)


def _merge_cache(mask: np.ndarray, take: QCache, keep: QCache) -> QCache:
    jac = None if take.jac is None else _bwhere(mask, take.jac, keep.jac)
    fix = None
    if take.fixman is not None and keep.fixman is not None:
        fix = np.where(mask, take.fixman, keep.fixman)
    return QCache(
        jac=jac,
        force=_bwhere(mask, take.force, keep.force),
        pot_v=np.where(mask, take.pot_v, keep.pot_v),
        fixman=fix,
    )


def _ghmc_kernel(
    system: ImmpSystem,
    cfg: IntegratorConfig,
    ou: OuStep,
    state: PhaseState,
    cache: QCache,
    rng: np.random.Generator,
    *,
    metropolis: bool,
    target_fixman: bool,
):
    """One full chain step; returns (state, cache, accepted, dh, in_domain)."""
    out = _leapfrog_core(system, cfg, state, cache)
    if metropolis:
        if target_fixman:
            fix0 = system.ensure_fixman(cache)
            fix1 = system.ensure_fixman(out.cache)
            d_pot = (out.cache.pot_v + fix1) - (cache.pot_v + fix0)
        else:
            d_pot = out.cache.pot_v - cache.pot_v
        dh = np.where(out.in_domain, out.d_kin + d_pot, np.inf)
        u = rng.random(state.batch_shape)
        with np.errstate(over="ignore", invalid="ignore"):
            accept = u < np.exp(-system.beta * np.minimum(dh, 700.0 / system.beta)) * np.isfinite(
                dh
            )
        flipped = state.flipped()
        new_state = PhaseState(
            _bwhere(accept, out.state.q, flipped.q),
            _bwhere(accept, out.state.p, flipped.p),
            _bwhere(accept, out.state.z, flipped.z),
            _bwhere(accept, out.state.p_z, flipped.p_z),
        )
        new_cache = _merge_cache(accept, out.cache, cache)
    else:
        dh = out.delta_h
        accept = out.in_domain.copy()
        new_state = out.state
        new_cache = out.cache
    new_state = ou(new_state, rng, jac=new_cache.jac)
    return new_state, new_cache, accept, dh, out.in_domain


def ghmc_step(
    system: ImmpSystem,
    cfg: IntegratorConfig,
    thermo: ThermostatSpec,
    state: PhaseState,
    rng: np.random.Generator,
    *,
    target_fixman: bool = True,
) -> tuple[PhaseState, np.ndarray, np.ndarray]:
    """One Metropolis-corrected step with momentum flip on rejection.

    Returns (state, accepted, delta_h); delta_h is the full target-energy
    change used in the acceptance test (+inf outside the convergence
    domain).
    """
    ou = OuStep(system, thermo, cfg.dt)
    cache = system.build_cache(state.q, cfg)
    new_state, _, accept, dh, _ = _ghmc_kernel(
        system, cfg, ou, state, cache, rng, metropolis=True, target_fixman=target_fixman
    )
    return new_state, accept, dh


def ghmc_step_importance(
    system: ImmpSystem,
    cfg: IntegratorConfig,
    thermo: ThermostatSpec,
    state: PhaseState,
    rng: np.random.Generator,
    *,
    v_tilde: TildePotential | None = None,
    target_fixman: bool = True,
) -> tuple[PhaseState, np.ndarray, np.ndarray]:
    """Chain step whose integrator runs on a substitute potential.

    By default the substitute is the bare potential: the corrector forces
    are skipped while the acceptance test keeps the full target energy, so
    the stationary law is unchanged.
    """
    if v_tilde is None:
        cfg = replace(cfg, use_fixman_force=False)
    else:
        system = system.with_tilde(v_tilde)
        cfg = replace(cfg, use_fixman_force=False)
    return ghmc_step(system, cfg, thermo, state, rng, target_fixman=target_fixman)


def run_chain(
    system: ImmpSystem,
    cfg: IntegratorConfig,
    thermo: ThermostatSpec,
    *,
    n_steps: int,
    seed: int,
    q0: np.ndarray | None = None,
    state0: PhaseState | None = None,
    observables: dict[str, Callable[[np.ndarray], np.ndarray]] | None = None,
    burn_in: int | None = None,
    record_stride: int = 1,
    metropolis: bool = True,
    target_fixman: bool = True,
) -> ExperimentRecord:
    """Run a chain (or a lockstep ensemble of chains) and record observables.

    The initial state is either given explicitly or built from positions
    ``q0`` with momenta drawn from the constrained Gaussian.  The first
    ``burn_in`` steps (default 10 percent) are discarded; afterwards every
    ``record_stride``-th state is logged.  Fully reproducible from the seed.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    rng = np.random.default_rng(seed)
    if state0 is None:
        if q0 is None:
            raise ValueError("need q0 or state0")
        state0 = system.extend_state(q0, np.zeros_like(np.asarray(q0, dtype=float)))
        p, p_z = system.sample_momenta(state0.q, rng)
        state0 = PhaseState(state0.q, p, state0.z, p_z)
    if burn_in is None:
        burn_in = n_steps // 10
    observables = observables or {}

    state = state0
    cache = system.build_cache(state.q, cfg)
    ou = OuStep(system, thermo, cfg.dt)
    batch = state.batch_shape
    n_rec = max(0, (n_steps - burn_in + record_stride - 1) // record_stride)
    obs_buf = {
        k: np.empty((n_rec,) + np.shape(fn(state.q))) for k, fn in observables.items()
    }
    dh_buf = np.empty((n_rec,) + batch)
    acc_buf = np.empty((n_rec,) + batch, dtype=bool)
    res_buf = np.empty((n_rec,) + batch)
    stats = ChainStats(n_free_dof=system.dim - len(system.rigid_idx))

    i_rec = 0
    n_rep = int(np.prod(batch)) if batch else 1
    for step in range(n_steps):
        state, cache, accept, dh, in_domain = _ghmc_kernel(
            system, cfg, ou, state, cache, rng, metropolis=metropolis, target_fixman=target_fixman
        )
        stats.n_steps += n_rep
        stats.n_accept += int(np.count_nonzero(accept))
        stats.n_newton_fail += n_rep - int(np.count_nonzero(in_domain))
        pos_dh = np.maximum(dh, 0.0)
        stats.sum_pos_dh += float(np.sum(np.where(np.isfinite(pos_dh), pos_dh, 0.0)))
        with np.errstate(over="ignore"):
            stats.sum_metropolis_weight += float(
                np.sum(np.exp(-system.beta * np.where(np.isfinite(pos_dh), pos_dh, np.inf)))
            )
        if step >= burn_in and (step - burn_in) % record_stride == 0:
            for name, fn in observables.items():
                obs_buf[name][i_rec] = fn(state.q)
            dh_buf[i_rec] = dh
            acc_buf[i_rec] = accept
            res_buf[i_rec] = system.constraint_residual_max(state, cache)
            i_rec += 1

    return ExperimentRecord(
        observables=obs_buf,
        delta_h=dh_buf,
        accepted=acc_buf,
        constraint_residual=res_buf,
        stats=stats,
        seed=seed,
        n_steps=n_steps,
        burn_in=burn_in,
        record_stride=record_stride,
        params={
            "dt": cfg.dt,
            "beta": system.beta,
            "metropolis": metropolis,
            "target_fixman": target_fixman,
            "use_fixman_force": cfg.use_fixman_force,
            "force_split": cfg.force_split,
            "rng": "numpy.random.PCG64",
        },
    )
