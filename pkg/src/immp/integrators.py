"""One-step maps for mass-penalized constrained dynamics.

The working state is ``(q, p, z, p_z)``: positions and momenta of the
physical system plus auxiliary positions and momenta attached to the
penalized components.  Constrained components come in two flavours:

* rigid components hold ``xi_i(q) = c_i`` with a fixed target,
* penalized components couple to an auxiliary variable, ``xi_i(q) = z_j / nu``.

Both kinds are resolved in one coupled multiplier system.  The main step is
a leapfrog with constraints: the first half-kick multiplier is found by a
full Newton iteration on the position constraint, the second half-kick
multiplier by a single symmetric positive-definite solve on the (affine)
momentum constraint.  A mid-point Euler step with constraints integrates the
fluctuation/dissipation part exactly on the constrained momentum space.

All step functions broadcast over leading axes of the state, so an ensemble
of replicas advances in one call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from immp.geometry import (
    ConstraintMap,
    MassSpec,
    PenaltySpec,
    SingularGeometryError,
    fixman_from_amat,
    fixman_gradient_from_bmat,
    gram_from_jacobian,
    wrap_angle,
)

log = logging.getLogger(__name__)

__all__ = [
    "PhaseState",
    "IntegratorConfig",
    "StepOutcome",
    "SplitPotential",
    "TildePotential",
    "ImmpSystem",
    "newton_constraint_solve",
    "rattle_immp_step",
    "rattle_immp_split_step",
    "rattle_rigid_step",
    "verlet_step",
    "OuStep",
    "fluctuation_dissipation_step",
    "symplectic_volume_ratio",
    "project_state",
]

#: constraint residual tolerance guaranteed after an accepted step
TOL_C = 1e-10


def _bwhere(mask: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """np.where with the mask broadcast over the trailing axes of a/b."""
    extra = a.ndim - mask.ndim
    return np.where(mask.reshape(mask.shape + (1,) * extra), a, b)


@dataclass
class PhaseState:
    """Positions, momenta and the auxiliary pair of the penalized components.

    Arrays may carry leading batch axes: ``q``/``p`` have shape ``(..., d)``
    and ``z``/``p_z`` shape ``(..., n_p)``.
    """

    q: np.ndarray
    p: np.ndarray
    z: np.ndarray
    p_z: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.p_z = np.asarray(self.p_z, dtype=float)

    @property
    def batch_shape(self) -> tuple:
        return self.q.shape[:-1]

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy(), self.z.copy(), self.p_z.copy())

    def flipped(self) -> "PhaseState":
        """Momentum-reversed state (positions untouched)."""
        return PhaseState(self.q, -self.p, self.z, -self.p_z)


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size and solver knobs of the constrained leapfrog.

    ``use_fixman_force`` adds the gradient of the geometric corrector to the
    forces (and to the energy the step reports).  ``force_split`` routes the
    fast part of the force to the auxiliary momenta instead of the physical
    ones; the system must expose the split potential.  With
    ``strict_geometry`` a singular multiplier system raises; without it the
    affected replicas are flagged out of domain and rolled back.
    """

    dt: float
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    use_fixman_force: bool = False
    force_split: bool = False
    strict_geometry: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")


@dataclass
class QCache:
    """Position-dependent quantities reused across kicks and steps."""

    jac: np.ndarray | None
    force: np.ndarray
    pot_v: np.ndarray
    xi: np.ndarray | None = None
    fixman: np.ndarray | None = None


@dataclass
class StepOutcome:
    """Result of one deterministic step.

    ``in_domain`` is False for replicas whose constraint solve did not
    converge; those replicas are rolled back to the input state and their
    ``delta_h`` is +inf.  ``cache`` holds position-dependent quantities of
    the returned state.
    """

    state: PhaseState
    delta_h: np.ndarray
    in_domain: np.ndarray
    n_newton: np.ndarray
    cache: QCache
    d_kin: np.ndarray


@dataclass(frozen=True)
class SplitPotential:
    """Explicit dependence V(q) = U(q, xi(q)) on the penalized components.

    ``grad1(q)`` is the q-gradient of U at (q, xi(q)); ``grad2(q, zred)``
    the gradient in the second slot, evaluated at the reduced auxiliary
    value zred = z / nu; ``value(q, zred)`` the energy U(q, zred).
    """

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad1: Callable[[np.ndarray], np.ndarray]
    grad2: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TildePotential:
    """Substitute potential driving the integrator (importance variant).

    ``force`` follows the model convention: it is minus the gradient.
    """

    potential: Callable[[np.ndarray], np.ndarray]
    force: Callable[[np.ndarray], np.ndarray]


def _solve_soft(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched linear solve marking singular or non-finite members.

    Returns (x, ok) where failed members carry zeros and ok=False.
    """
    if a.shape[-1] == 1:
        den = a[..., 0, 0]
        ok = np.isfinite(den) & (np.abs(den) > 1e-300) & np.isfinite(b[..., 0])
        x = np.divide(b[..., 0], den, out=np.zeros(np.broadcast_shapes(den.shape, b[..., 0].shape)), where=ok)
        return x[..., None], ok
    bad = ~(np.isfinite(a).all(axis=(-2, -1)) & np.isfinite(b).all(axis=-1))
    if bad.any():
        a = _bwhere(bad, np.broadcast_to(np.eye(a.shape[-1]), a.shape), a)
        b = _bwhere(bad, np.zeros_like(b), b)
    try:
        x = np.linalg.solve(a, b[..., None])[..., 0]
        return x, ~bad
    except np.linalg.LinAlgError:
        pass
    flat_a = a.reshape((-1,) + a.shape[-2:])
    flat_b = b.reshape((-1,) + b.shape[-1:])
    out = np.zeros_like(flat_b)
    ok = np.ones(flat_a.shape[0], dtype=bool)
    for i in range(flat_a.shape[0]):
        try:
            out[i] = np.linalg.solve(flat_a[i], flat_b[i])
        except np.linalg.LinAlgError:
            ok[i] = False
    return out.reshape(b.shape), ok.reshape(a.shape[:-2]) & ~bad


class ImmpSystem:
    """A model plus its constrained components and penalty parameters.

    Parameters
    ----------
    model:
        Object with ``dim``, ``mass`` (a :class:`MassSpec`), ``potential(q)``
        and ``force(q)`` (minus the potential gradient).
    constraints:
        Map of all constrained components (rigid and penalized), or None.
    penalized:
        Boolean mask over constraint components; True marks components
        coupled to an auxiliary variable.  Defaults to all rigid.
    rigid_targets:
        Target values of the rigid components, in order of appearance.
    penalty:
        Intensity and virtual mass of the penalized block; required when the
        mask selects any component.
    beta:
        Inverse temperature entering the geometric corrector.
    split:
        Optional :class:`SplitPotential` enabling the force-split variant.
    state_eval:
        Optional fused evaluator ``q -> (xi, jacobian, potential, force)``
        letting the model share one geometry pass across those quantities.
    """

    def __init__(
        self,
        model,
        *,
        constraints: ConstraintMap | None = None,
        penalized: np.ndarray | None = None,
        rigid_targets: np.ndarray | None = None,
        penalty: PenaltySpec | None = None,
        beta: float = 1.0,
        split: SplitPotential | None = None,
        tilde: TildePotential | None = None,
        state_eval=None,
        xi_jac_eval=None,
    ):
        self.model = model
        self.cons = constraints
        self.beta = float(beta)
        self.split = split
        self.tilde = tilde
        self.state_eval = state_eval
        self.xi_jac_eval = xi_jac_eval
        self.mass: MassSpec = model.mass
        self.dim = int(model.dim)
        if self.mass.dim != self.dim:
            raise ValueError("mass matrix does not match model dimension")

        self.n = 0 if constraints is None else constraints.dim_xi
        if penalized is None:
            penalized = np.zeros(self.n, dtype=bool)
        penalized = np.asarray(penalized, dtype=bool)
        if penalized.shape != (self.n,):
            raise ValueError("penalized mask must have one entry per constraint")
        self.penalized = penalized
        self.pen_idx = np.flatnonzero(penalized)
        self.rigid_idx = np.flatnonzero(~penalized)
        self.n_pen = len(self.pen_idx)
        self.penalty = penalty
        if self.n_pen:
            if penalty is None or penalty.nu <= 0:
                raise ValueError("penalized components need a penalty with nu > 0")
            if penalty.dim != self.n_pen:
                raise ValueError("virtual mass size must match the penalized block")
            self.mz = penalty.mz_spec()
        else:
            self.mz = None

        targets = np.zeros(self.n)
        if len(self.rigid_idx):
            if rigid_targets is None:
                raise ValueError("rigid components need target values")
            rigid_targets = np.asarray(rigid_targets, dtype=float)
            if rigid_targets.shape != (len(self.rigid_idx),):
                raise ValueError("one target per rigid component")
            targets[self.rigid_idx] = rigid_targets
        self.targets = targets

        # S embeds multipliers into the auxiliary block: S^T lam = lam[pen]/nu
        smat = np.zeros((self.n, self.n_pen))
        if self.n_pen:
            smat[self.pen_idx, np.arange(self.n_pen)] = 1.0 / penalty.nu
        self.smat = smat
        self.bmat = (
            smat @ self.penalty.mz_inv @ smat.T if self.n_pen else np.zeros((self.n, self.n))
        )

    # -- basic evaluations -------------------------------------------------
    def xi(self, q: np.ndarray) -> np.ndarray:
        return self.cons.value(q)

    def jac(self, q: np.ndarray) -> np.ndarray:
        return self.cons.jacobian(q)

    def xi_and_jac(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.xi_jac_eval is not None:
            return self.xi_jac_eval(q)
        if self.state_eval is not None:
            xi, jac, _, _ = self.state_eval(q)
            return xi, jac
        return self.cons.value(q), self.cons.jacobian(q)

    def amat(self, jac: np.ndarray) -> np.ndarray:
        """Multiplier matrix G(q) + B with B the penalty block."""
        return gram_from_jacobian(jac, self.mass) + self.bmat

    def kinetic(self, p: np.ndarray, p_z: np.ndarray) -> np.ndarray:
        kin = 0.5 * self.mass.inv_quad(p)
        if self.n_pen:
            kin = kin + 0.5 * self.mz.inv_quad(p_z)
        return kin

    def potential(self, q: np.ndarray) -> np.ndarray:
        """Physical potential of the model (the Metropolis target uses it)."""
        return self.model.potential(q)

    def fixman_value(self, jac: np.ndarray | None) -> np.ndarray:
        if self.n == 0:
            return np.array(0.0)
        return fixman_from_amat(self.amat(jac), self.beta)

    def fixman_force(self, q: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(q)
        return -fixman_gradient_from_bmat(self.cons, self.mass, self.bmat, q, self.beta)

    # -- constraint residuals ----------------------------------------------
    def residual_from_xi(self, xi: np.ndarray, z: np.ndarray) -> np.ndarray:
        r = xi - (self.targets + z @ self.smat.T)
        wrap = self.cons.wrap
        if wrap is not None and wrap.any():
            r = np.where(wrap, wrap_angle(r), r)
        return r

    def position_residual(self, q: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.residual_from_xi(self.xi(q), z)

    def hidden_residual(self, jac: np.ndarray, p: np.ndarray, p_z: np.ndarray) -> np.ndarray:
        """(grad xi)^T M^{-1} p minus the auxiliary velocity image S Mz^{-1} p_z."""
        h = np.einsum("...nd,...d->...n", jac, self.mass.inv_apply(p))
        if self.n_pen:
            h = h - self.mz.inv_apply(p_z) @ self.smat.T
        return h

    def constraint_residual_max(self, state: PhaseState, cache: "QCache | None" = None) -> np.ndarray:
        """Max norm over position and hidden momentum residuals."""
        if self.n == 0:
            return np.zeros(state.batch_shape)
        if cache is not None and cache.jac is not None and cache.xi is not None:
            xi, jac = cache.xi, cache.jac
        else:
            xi, jac = self.xi_and_jac(state.q)
        rp = np.abs(self.residual_from_xi(xi, state.z)).max(axis=-1)
        rh = np.abs(self.hidden_residual(jac, state.p, state.p_z)).max(axis=-1)
        return np.maximum(rp, rh)

    # -- forces and energies used by the scheme ----------------------------
    def force_q(self, q: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
        if self.tilde is not None:
            f = self.tilde.force(q)
        elif cfg.force_split:
            if self.split is None:
                raise ValueError("force_split requires a split potential")
            f = -self.split.grad1(q)
        else:
            f = self.model.force(q)
        if cfg.use_fixman_force:
            f = f + self.fixman_force(q)
        return f

    def force_z(self, q: np.ndarray, z: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
        if self.tilde is None and cfg.force_split and self.n_pen:
            zred = z / self.penalty.nu
            return -self.split.grad2(q, zred) / self.penalty.nu
        return np.zeros_like(z)

    def scheme_potential(self, q: np.ndarray, z: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
        if self.tilde is not None:
            return self.tilde.potential(q)
        if cfg.force_split:
            return self.split.value(q, z / self.penalty.nu)
        return self.model.potential(q)

    def build_cache(self, q: np.ndarray, cfg: IntegratorConfig) -> QCache:
        if self.state_eval is not None:
            xi, jac, pot_v, force = self.state_eval(q)
            if self.tilde is not None:
                force = self.tilde.force(q)
            elif cfg.force_split:
                force = -self.split.grad1(q)
            if cfg.use_fixman_force:
                force = force + self.fixman_force(q)
            cache = QCache(jac=jac, force=force, pot_v=pot_v, xi=xi)
        else:
            jac = self.jac(q) if self.n else None
            xi = self.xi(q) if self.n else None
            cache = QCache(jac=jac, force=self.force_q(q, cfg), pot_v=self.potential(q), xi=xi)
        if cfg.use_fixman_force:
            cache.fixman = self.fixman_value(cache.jac)
        return cache

    def ensure_fixman(self, cache: QCache) -> np.ndarray:
        if cache.fixman is None:
            cache.fixman = self.fixman_value(cache.jac)
        return cache.fixman

    # -- state construction -------------------------------------------------
    def extend_state(self, q: np.ndarray, p: np.ndarray) -> PhaseState:
        """Attach consistent auxiliary variables to physical coordinates."""
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.n_pen:
            nu = self.penalty.nu
            z = nu * self.xi(q)[..., self.pen_idx]
            jp = self.jac(q)[..., self.pen_idx, :]
            vel = np.einsum("...nd,...d->...n", jp, self.mass.inv_apply(p))
            p_z = nu * (vel @ self.penalty.mz.T)
        else:
            z = np.zeros(q.shape[:-1] + (0,))
            p_z = np.zeros_like(z)
        return PhaseState(q, p, z, p_z)

    def sample_momenta(
        self, q: np.ndarray, rng: np.random.Generator | None = None, zeta: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw (p, p_z) from the constrained Gaussian at inverse temperature beta.

        An unconstrained Gaussian with covariance beta^{-1} diag(M, M_z) is
        projected onto the hidden momentum constraint; the projected law is
        exactly the constrained canonical momentum marginal.
        """
        q = np.asarray(q, dtype=float)
        shape = q.shape[:-1]
        if zeta is None:
            zeta = rng.standard_normal(shape + (self.dim + self.n_pen,))
        scale = 1.0 / np.sqrt(self.beta)
        p = scale * self.mass.sqrt_apply(zeta[..., : self.dim])
        if self.n_pen:
            p_z = scale * self.mz.sqrt_apply(zeta[..., self.dim :])
        else:
            p_z = np.zeros(shape + (0,))
        if self.n == 0:
            return p, p_z
        jac = self.jac(q)
        h = self.hidden_residual(jac, p, p_z)
        lam = np.linalg.solve(self.amat(jac), h[..., None])[..., 0]
        p = p - np.einsum("...n,...nd->...d", lam, jac)
        if self.n_pen:
            p_z = p_z + lam @ self.smat
        return p, p_z

    def with_tilde(self, tilde: TildePotential) -> "ImmpSystem":
        """Same system with the integrator driven by a substitute potential."""
        out = ImmpSystem.__new__(ImmpSystem)
        out.__dict__.update(self.__dict__)
        out.tilde = tilde
        return out


def newton_constraint_solve(
    system: ImmpSystem,
    cfg: IntegratorConfig,
    q_free: np.ndarray,
    z_free: np.ndarray,
    dq_dir: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full Newton iteration for the position-constraint multiplier.

    The candidate positions are ``q(lam) = q_free - lam . dq_dir`` with the
    direction rows ``dq_dir = dt M^{-1} grad xi(q_n)`` assembled by the
    caller, and ``z(lam) = z_free + dt Mz^{-1} S^T lam``.  The residual
    Jacobian is re-assembled at every iterate (full Newton).  Returns
    ``(lam, converged, iterations)`` per replica; a singular Newton system or
    non-finite residual marks the replica unconverged.
    """
    dt = cfg.dt
    batch = q_free.shape[:-1]
    lam = np.zeros(batch + (system.n,))
    conv = np.zeros(batch, dtype=bool)
    dead = np.zeros(batch, dtype=bool)
    iters = np.full(batch, cfg.newton_max_iter)
    dt_bmat = dt * system.bmat

    q1 = q_free
    z1 = z_free
    for it in range(cfg.newton_max_iter + 1):
        xi1, j1 = system.xi_and_jac(q1)
        r = system.residual_from_xi(xi1, z1)
        finite = np.isfinite(r).all(axis=-1)
        if not finite.all():
            dead |= ~finite & ~conv
            r = _bwhere(finite, r, np.zeros_like(r))
        newly = ~conv & ~dead & (np.abs(r).max(axis=-1) < cfg.newton_tol)
        iters = np.where(newly, it, iters)
        conv |= newly
        active = ~conv & ~dead
        if it == cfg.newton_max_iter or not active.any():
            break
        jfin = np.isfinite(j1).all(axis=(-2, -1))
        if not jfin.all():
            j1 = _bwhere(jfin, j1, np.zeros_like(j1))
        amat = np.einsum("...nd,...md->...nm", j1, dq_dir) + dt_bmat
        delta, ok = _solve_soft(amat, r)
        step_mask = active & ok
        if step_mask.all():
            lam = lam + delta
        else:
            dead |= active & ~ok
            lam = lam + _bwhere(step_mask, delta, np.zeros_like(delta))
        q1 = q_free - np.einsum("...n,...nd->...d", lam, dq_dir)
        if system.n_pen:
            z1 = z_free + dt * _mz_inv_apply(system, lam @ system.smat)
    return lam, conv, iters


def _mz_inv_apply(system: ImmpSystem, v: np.ndarray) -> np.ndarray:
    return system.mz.inv_apply(v) if system.n_pen else v


def _leapfrog_core(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, cache: QCache | None
) -> StepOutcome:
    dt = cfg.dt
    q0, p0, z0, pz0 = state.q, state.p, state.z, state.p_z
    batch = state.batch_shape
    if cache is None:
        cache = system.build_cache(q0, cfg)

    with np.errstate(all="ignore"):
        p_star = p0 + 0.5 * dt * cache.force
        pz_star = pz0 + 0.5 * dt * system.force_z(q0, z0, cfg)

        if system.n:
            dq_dir = dt * system.mass.inv_apply(cache.jac)
            q_free = q0 + dt * system.mass.inv_apply(p_star)
            z_free = z0 + dt * _mz_inv_apply(system, pz_star)
            lam, conv, iters = newton_constraint_solve(system, cfg, q_free, z_free, dq_dir)
            p_half = p_star - np.einsum("...n,...nd->...d", lam, cache.jac)
            pz_half = pz_star + lam @ system.smat
        else:
            conv = np.ones(batch, dtype=bool)
            iters = np.zeros(batch, dtype=int)
            p_half, pz_half = p_star, pz_star

        q1 = q0 + dt * system.mass.inv_apply(p_half)
        z1 = z0 + dt * _mz_inv_apply(system, pz_half)
        all_ok = bool(conv.all())
        if not all_ok:
            # roll back failed replicas before touching the geometry again
            q1 = _bwhere(conv, q1, q0)
            z1 = _bwhere(conv, z1, z0)

        cache1 = system.build_cache(q1, cfg)
        p_dag = p_half + 0.5 * dt * cache1.force
        pz_dag = pz_half + 0.5 * dt * system.force_z(q1, z1, cfg)

        if system.n:
            hidden = system.hidden_residual(cache1.jac, p_dag, pz_dag)
            lam2, ok2 = _solve_soft(system.amat(cache1.jac), hidden)
            if not ok2.all():
                if cfg.strict_geometry:
                    raise SingularGeometryError("singular momentum-constraint system")
                # replicas newly failing at the momentum solve roll back too
                if (conv & ~ok2).any():
                    conv = conv & ok2
                    q1 = _bwhere(conv, q1, q0)
                    z1 = _bwhere(conv, z1, z0)
                    cache1 = system.build_cache(q1, cfg)
                    p_dag = p_half + 0.5 * dt * cache1.force
                    pz_dag = pz_half + 0.5 * dt * system.force_z(q1, z1, cfg)
                    hidden = system.hidden_residual(cache1.jac, p_dag, pz_dag)
                    lam2, _ = _solve_soft(system.amat(cache1.jac), hidden)
            p1 = p_dag - np.einsum("...n,...nd->...d", lam2, cache1.jac)
            pz1 = pz_dag + lam2 @ system.smat
        else:
            p1, pz1 = p_dag, pz_dag

        if not all_ok:
            p1 = _bwhere(conv, p1, p0)
            pz1 = _bwhere(conv, pz1, pz0)

        kin0 = system.kinetic(p0, pz0)
        kin1 = system.kinetic(p1, pz1)
        pot0 = system.scheme_potential(q0, z0, cfg)
        pot1 = system.scheme_potential(q1, z1, cfg)
        if cfg.use_fixman_force:
            pot0 = pot0 + system.ensure_fixman(cache)
            pot1 = pot1 + system.ensure_fixman(cache1)
        d_kin = kin1 - kin0
        delta_h = d_kin + pot1 - pot0
        if not all_ok:
            delta_h = np.where(conv, delta_h, np.inf)

    new_state = PhaseState(q1, p1, z1, pz1)
    return StepOutcome(
        state=new_state,
        delta_h=np.asarray(delta_h),
        in_domain=conv,
        n_newton=iters,
        cache=cache1,
        d_kin=np.asarray(d_kin),
    )


def rattle_immp_step(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, cache: QCache | None = None
) -> StepOutcome:
    """One constrained leapfrog step of the penalized dynamics."""
    return _leapfrog_core(system, cfg, state, cache)


def rattle_immp_split_step(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, cache: QCache | None = None
) -> StepOutcome:
    """Force-split variant: the fast force drives the auxiliary momenta."""
    cfg = replace(cfg, force_split=True)
    return _leapfrog_core(system, cfg, state, cache)


def rattle_rigid_step(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, cache: QCache | None = None
) -> StepOutcome:
    """Leapfrog with hard constraints only (no penalized components)."""
    if system.n_pen:
        raise ValueError("system has penalized components; use rattle_immp_step")
    return _leapfrog_core(system, cfg, state, cache)


def verlet_step(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, cache: QCache | None = None
) -> StepOutcome:
    """Plain kick-drift-kick leapfrog (no constraints at all)."""
    if system.n:
        raise ValueError("system has constraints; use a constrained step")
    return _leapfrog_core(system, cfg, state, cache)


def _as_matrix(g, dim: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim == 0:
        return float(g) * np.eye(dim)
    if g.shape != (dim, dim):
        raise ValueError("dissipation matrix has wrong shape")
    if not np.allclose(g, g.T, atol=1e-12):
        raise ValueError("dissipation matrix must be symmetric")
    return g


def sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of the positive semidefinite part."""
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


class OuStep:
    """Mid-point Euler fluctuation/dissipation step with constraints.

    Solves the implicit relation

        p' = p - (dt/2) gamma M^{-1} (p + p') + sqrt(dt) sigma U - (grad xi) lam

    jointly on (p, p_z) with the multiplier enforcing the hidden momentum
    constraint, through one symmetric positive-definite solve.  The kernel
    is reversible with respect to the constrained Gaussian momentum law
    when (dt/2) M^{-1} <= gamma in the matrix sense; the flag
    ``condition_ok`` records whether that sufficient condition holds, and
    the step executes either way.
    """

    def __init__(self, system: ImmpSystem, thermo, dt: float):
        self.system = system
        self.beta = float(thermo.beta)
        self.dt = float(dt)
        d, n_p = system.dim, system.n_pen
        gp = _as_matrix(thermo.gamma, d)
        gz = _as_matrix(getattr(thermo, "gamma_z", 0.0), n_p)
        minv_p = system.mass.inverse
        minv_z = system.mz.inverse if n_p else np.zeros((0, 0))

        self._kp_inv = np.linalg.inv(np.eye(d) + 0.5 * dt * gp @ minv_p)
        self._wp = np.linalg.inv(system.mass.matrix + 0.5 * dt * gp)
        self._gm_p = 0.5 * dt * gp @ minv_p
        self._sig_p = np.sqrt(dt) * sqrt_psd(2.0 / self.beta * gp)
        if n_p:
            self._kz_inv = np.linalg.inv(np.eye(n_p) + 0.5 * dt * gz @ minv_z)
            self._wz = np.linalg.inv(system.mz.matrix + 0.5 * dt * gz)
            self._gm_z = 0.5 * dt * gz @ minv_z
            self._sig_z = np.sqrt(dt) * sqrt_psd(2.0 / self.beta * gz)
        self._noisy = bool(np.any(gp) or (n_p and np.any(gz)))

        cond = np.concatenate(
            [
                np.linalg.eigvalsh(gp - 0.5 * dt * minv_p),
                np.linalg.eigvalsh(gz - 0.5 * dt * minv_z) if n_p else np.zeros(0),
            ]
        )
        self.condition_ok = bool(cond.min(initial=np.inf) >= -1e-10)
        if self._noisy and not self.condition_ok:
            log.warning(
                "fluctuation/dissipation step outside its reversibility condition "
                "(dt/2 M^{-1} <= gamma fails); executing anyway"
            )

    def __call__(
        self, state: PhaseState, rng: np.random.Generator, jac: np.ndarray | None = None
    ) -> PhaseState:
        sys_ = self.system
        p, pz = state.p, state.p_z
        a_p = p - p @ self._gm_p.T
        if self._noisy:
            u = rng.standard_normal(p.shape)
            a_p = a_p + u @ self._sig_p.T
        if sys_.n_pen:
            a_z = pz - pz @ self._gm_z.T
            if self._noisy:
                uz = rng.standard_normal(pz.shape)
                a_z = a_z + uz @ self._sig_z.T
        else:
            a_z = pz
        if sys_.n == 0:
            return PhaseState(state.q, a_p @ self._kp_inv.T, state.z, a_z)
        if jac is None:
            jac = sys_.jac(state.q)
        wa = np.einsum("...nd,...d->...n", jac, a_p @ self._wp.T)
        amat = np.einsum("...nd,...md->...nm", jac @ self._wp, jac)
        if sys_.n_pen:
            wa = wa - (a_z @ self._wz.T) @ sys_.smat.T
            amat = amat + sys_.smat @ self._wz @ sys_.smat.T
        if amat.shape[-1] == 1:
            lam = wa / amat[..., 0]
        else:
            lam = np.linalg.solve(amat, wa[..., None])[..., 0]
        p1 = (a_p - np.einsum("...n,...nd->...d", lam, jac)) @ self._kp_inv.T
        pz1 = (a_z + lam @ sys_.smat) @ self._kz_inv.T if sys_.n_pen else a_z
        return PhaseState(state.q, p1, state.z, pz1)


def fluctuation_dissipation_step(
    system: ImmpSystem,
    thermo,
    cfg: IntegratorConfig,
    state: PhaseState,
    rng: np.random.Generator,
) -> PhaseState:
    """One exact constrained fluctuation/dissipation step (momenta only)."""
    return OuStep(system, thermo, cfg.dt)(state, rng)


def symplectic_volume_ratio(
    system: ImmpSystem, cfg: IntegratorConfig, state: PhaseState, fd_step: float = 1e-5
) -> float:
    """Volume ratio of the symplectic form under one step, on the constrained
    tangent space.

    A finite-difference image of an orthonormal tangent basis is measured
    with the canonical two-form before and after the step; the square root
    of the Gram-determinant ratio equals one for a map that preserves the
    symplectic structure of the constraint manifold.
    """
    d, n_p, n = system.dim, system.n_pen, system.n

    def pack(s: PhaseState) -> np.ndarray:
        return np.concatenate([s.q, s.z, s.p, s.p_z])

    def unpack(v: np.ndarray) -> PhaseState:
        return PhaseState(v[:d], v[d + n_p : 2 * d + n_p], v[d : d + n_p], v[2 * d + n_p :])

    def omega(u: np.ndarray, v: np.ndarray) -> float:
        xu, pu = u[: d + n_p], u[d + n_p :]
        xv, pv = v[: d + n_p], v[d + n_p :]
        return float(pu @ xv - pv @ xu)

    x0 = pack(state)
    if n:
        def residuals(v):
            s = unpack(v)
            rp = system.position_residual(s.q, s.z)
            rh = system.hidden_residual(system.jac(s.q), s.p, s.p_z)
            return np.concatenate([rp, rh])

        grad = np.array(
            [
                (residuals(x0 + fd_step * e) - residuals(x0 - fd_step * e)) / (2 * fd_step)
                for e in np.eye(x0.size)
            ]
        ).T
        _, _, vt = np.linalg.svd(grad)
        tangent = vt[2 * n :].T
    else:
        tangent = np.eye(x0.size)

    def step_packed(v: np.ndarray) -> np.ndarray:
        out = _leapfrog_core(system, cfg, project_state(system, unpack(v)), None)
        if not np.all(out.in_domain):
            raise SingularGeometryError("step left its convergence domain during probing")
        return pack(out.state)

    img = np.array(
        [
            (step_packed(x0 + fd_step * t) - step_packed(x0 - fd_step * t)) / (2 * fd_step)
            for t in tangent.T
        ]
    ).T
    m = tangent.shape[1]
    before = np.array([[omega(tangent[:, i], tangent[:, j]) for j in range(m)] for i in range(m)])
    after = np.array([[omega(img[:, i], img[:, j]) for j in range(m)] for i in range(m)])
    return float(np.sqrt(np.linalg.det(after) / np.linalg.det(before)))


def project_state(system: ImmpSystem, state: PhaseState, tol: float = 1e-13) -> PhaseState:
    """Project a nearby state back onto both constraints (test helper)."""
    q, z = state.q.copy(), state.z
    if system.n:
        for _ in range(50):
            r = system.position_residual(q, z)
            if np.abs(r).max() < tol:
                break
            jac = system.jac(q)
            lam = np.linalg.solve(system.amat(jac), r[..., None])[..., 0]
            q = q - system.mass.inv_apply(np.einsum("...n,...nd->...d", lam, jac))
            if system.n_pen:
                z = z + _mz_inv_apply(system, lam @ system.smat)
        jac = system.jac(q)
        h = system.hidden_residual(jac, state.p, state.p_z)
        lam = np.linalg.solve(system.amat(jac), h[..., None])[..., 0]
        p = state.p - np.einsum("...n,...nd->...d", lam, jac)
        pz = state.p_z + lam @ system.smat
    else:
        p, pz = state.p, state.p_z
    return PhaseState(q, p, z, pz)
