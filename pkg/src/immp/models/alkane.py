"""United-atom alkane chain: rigid bonds, bending angles, torsion angles.

N beads in R^3 with unit masses and unit bond lengths.  Bending angles are
measured between consecutive bond vectors and interact through
``(A0/2) sin^2(theta - pi/2)``; torsions through ``-B0 cos(phi)`` with the
convention that the planar zig-zag (all-trans) chain has phi = 0.  Bonds are
always rigidly constrained; depending on the experiment the bending angles
are penalized (butane study) or rigid while the torsions are penalized
(long-chain study, force-split variant).

All evaluations broadcast over leading axes of the coordinate array.  The
hot path is a fused single pass computing internal coordinates, their
Jacobians, the potential and the force from one set of bond vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from immp.geometry import (
    ConstraintMap,
    MassSpec,
    PenaltySpec,
    SingularGeometryError,
    identity_mass,
)
from immp.integrators import ImmpSystem, SplitPotential

__all__ = [
    "AlkaneModel",
    "alkane_xi",
    "butane_system",
    "alkane_system",
    "end_to_end_length",
]

_DEGEN_TOL = 1e-12


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis without np.cross overhead."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # unrolled 3-vector dot; much cheaper than np.sum on small arrays
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _atoms(q: np.ndarray, n_atoms: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q.reshape(q.shape[:-1] + (n_atoms, 3))


class _ChainEval:
    """One pass over the chain geometry; families computed on demand."""

    __slots__ = ("x", "n_atoms", "b", "_bond", "_angle", "_tors")

    def __init__(self, x: np.ndarray):
        self.x = x
        self.n_atoms = x.shape[-2]
        self.b = x[..., 1:, :] - x[..., :-1, :]
        self._bond = None
        self._angle = None
        self._tors = None

    # -- bonds ---------------------------------------------------------------
    def bond(self):
        if self._bond is None:
            r = np.sqrt(_dot(self.b, self.b))
            self._bond = (r, self.b / r[..., None])
        return self._bond

    def bond_jac(self):
        n = self.n_atoms
        _, u = self.bond()
        jac = np.zeros(self.x.shape[:-2] + (n - 1, n, 3))
        idx = np.arange(n - 1)
        jac[..., idx, idx, :] = -u
        jac[..., idx, idx + 1, :] = u
        return jac.reshape(self.x.shape[:-2] + (n - 1, 3 * n))

    # -- bending angles --------------------------------------------------------
    def angle(self, on_degenerate: str = "nan"):
        if self._angle is None:
            v1 = self.b[..., :-1, :]
            v2 = self.b[..., 1:, :]
            dot = _dot(v1, v2)
            cross = _cross(v1, v2)
            s = np.sqrt(_dot(cross, cross))
            theta = np.arctan2(s, dot)
            bad = s < _DEGEN_TOL
            if bad.any():
                theta = np.where(bad, np.nan, theta)
            self._angle = (theta, v1, v2, s, bad)
        theta, _, _, _, bad = self._angle
        if on_degenerate == "raise" and bad.any():
            raise SingularGeometryError(
                f"collinear bond triple at angle index {int(np.argwhere(bad)[0][-1])}"
            )
        return theta

    def angle_jac(self, on_degenerate: str = "nan"):
        self.angle(on_degenerate)
        _, v1, v2, s, bad = self._angle
        n = self.n_atoms
        n1sq = _dot(v1, v1)
        n2sq = _dot(v2, v2)
        n1 = np.sqrt(n1sq)
        n2 = np.sqrt(n2sq)
        with np.errstate(all="ignore"):
            cos_t = _dot(v1, v2) / (n1 * n2)
            inv_s = (n1 * n2) / np.where(s < _DEGEN_TOL, np.nan, s)
            u1 = v1 / n1[..., None]
            u2 = v2 / n2[..., None]
            d1 = (cos_t[..., None] * u1 - u2) * (inv_s / n1)[..., None]
            d2 = (cos_t[..., None] * u2 - u1) * (inv_s / n2)[..., None]
        jac = np.zeros(self.x.shape[:-2] + (n - 2, n, 3))
        idx = np.arange(n - 2)
        jac[..., idx, idx, :] = -d1
        jac[..., idx, idx + 1, :] = d1 - d2
        jac[..., idx, idx + 2, :] = d2
        return jac.reshape(self.x.shape[:-2] + (n - 2, 3 * n))

    # -- torsions ----------------------------------------------------------------
    def torsion(self, on_degenerate: str = "nan"):
        if self.n_atoms < 4:
            raise ValueError("torsions need four atoms")
        if self._tors is None:
            b1 = self.b[..., :-2, :]
            b2 = self.b[..., 1:-1, :]
            b3 = self.b[..., 2:, :]
            n1 = _cross(b1, b2)
            n2 = _cross(b2, b3)
            nb2 = np.sqrt(_dot(b2, b2))
            y = _dot(n1, n2)
            sarg = _dot(_cross(n1, n2), b2) / nb2
            # trans chain maps to phi = 0; the branch cut sits at the cis state
            phi = np.arctan2(-sarg, -y)
            nn1 = _dot(n1, n1)
            nn2 = _dot(n2, n2)
            bad = (nn1 < _DEGEN_TOL**2) | (nn2 < _DEGEN_TOL**2)
            if bad.any():
                phi = np.where(bad, np.nan, phi)
            self._tors = (phi, b1, b2, b3, n1, n2, nb2, nn1, nn2, bad)
        phi, *_, bad = self._tors
        if on_degenerate == "raise" and bad.any():
            raise SingularGeometryError(
                f"collinear bond plane at torsion index {int(np.argwhere(bad)[0][-1])}"
            )
        return phi

    def torsion_jac(self, on_degenerate: str = "nan"):
        self.torsion(on_degenerate)
        _, b1, b2, b3, n1, n2, nb2, nn1, nn2, bad = self._tors
        n = self.n_atoms
        with np.errstate(all="ignore"):
            g1 = -(nb2 / nn1)[..., None] * n1
            g4 = (nb2 / nn2)[..., None] * n2
            pfac = (_dot(b1, b2) / nb2**2)[..., None]
            sfac = (_dot(b3, b2) / nb2**2)[..., None]
            g2 = -(1.0 + pfac) * g1 + sfac * g4
            g3 = pfac * g1 - (1.0 + sfac) * g4
        if bad.any():
            mask = bad[..., None]
            g1 = np.where(mask, np.nan, g1)
            g2 = np.where(mask, np.nan, g2)
            g3 = np.where(mask, np.nan, g3)
            g4 = np.where(mask, np.nan, g4)
        jac = np.zeros(self.x.shape[:-2] + (n - 3, n, 3))
        idx = np.arange(n - 3)
        jac[..., idx, idx, :] = g1
        jac[..., idx, idx + 1, :] = g2
        jac[..., idx, idx + 2, :] = g3
        jac[..., idx, idx + 3, :] = g4
        return jac.reshape(self.x.shape[:-2] + (n - 3, 3 * n))


@dataclass(frozen=True)
class AlkaneModel:
    """Chain of ``n_atoms`` unit-mass beads with bending and torsion terms."""

    n_atoms: int
    a0: float = 500.0
    b0: float = 20.0
    mass: MassSpec = None

    def __post_init__(self):
        if self.n_atoms < 4:
            raise ValueError("need at least four atoms")
        if self.mass is None:
            object.__setattr__(self, "mass", identity_mass(self.dim))

    @property
    def dim(self) -> int:
        return 3 * self.n_atoms

    @property
    def n_bonds(self) -> int:
        return self.n_atoms - 1

    @property
    def n_angles(self) -> int:
        return self.n_atoms - 2

    @property
    def n_torsions(self) -> int:
        return self.n_atoms - 3

    def _eval(self, q: np.ndarray) -> _ChainEval:
        return _ChainEval(_atoms(q, self.n_atoms))

    # -- constraint maps ----------------------------------------------------
    def bond_map(self) -> ConstraintMap:
        return ConstraintMap(
            self.dim,
            self.n_bonds,
            lambda q: self._eval(q).bond()[0],
            lambda q: self._eval(q).bond_jac(),
        )

    def angle_map(self) -> ConstraintMap:
        return ConstraintMap(
            self.dim,
            self.n_angles,
            lambda q: self._eval(q).angle(),
            lambda q: self._eval(q).angle_jac(),
        )

    def torsion_map(self) -> ConstraintMap:
        return ConstraintMap(
            self.dim,
            self.n_torsions,
            lambda q: self._eval(q).torsion(),
            lambda q: self._eval(q).torsion_jac(),
            wrap=np.ones(self.n_torsions, dtype=bool),
        )

    # -- energies and forces -------------------------------------------------
    def angle_energy(self, theta: np.ndarray) -> np.ndarray:
        # sin^2(theta - pi/2) = cos^2(theta)
        return 0.5 * self.a0 * np.sum(np.cos(theta) ** 2, axis=-1)

    def torsion_energy(self, phi: np.ndarray) -> np.ndarray:
        return -self.b0 * np.sum(np.cos(phi), axis=-1)

    def _pot_force(self, ev: _ChainEval) -> tuple[np.ndarray, np.ndarray]:
        theta = ev.angle()
        pot = self.angle_energy(theta)
        dv_dtheta = -0.5 * self.a0 * np.sin(2.0 * theta)
        force = -np.einsum("...n,...nd->...d", dv_dtheta, ev.angle_jac())
        if self.n_torsions:
            phi = ev.torsion()
            pot = pot + self.torsion_energy(phi)
            dv_dphi = self.b0 * np.sin(phi)
            force = force - np.einsum("...n,...nd->...d", dv_dphi, ev.torsion_jac())
        return pot, force

    def potential(self, q: np.ndarray) -> np.ndarray:
        ev = self._eval(q)
        v = self.angle_energy(ev.angle())
        if self.n_torsions:
            v = v + self.torsion_energy(ev.torsion())
        return v

    def force(self, q: np.ndarray) -> np.ndarray:
        return self._pot_force(self._eval(q))[1]

    # -- geometry helpers ----------------------------------------------------
    def zigzag_positions(self) -> np.ndarray:
        """Planar equilibrium chain: unit bonds, right bending angles, trans."""
        x = np.zeros((self.n_atoms, 3))
        step = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        for i in range(1, self.n_atoms):
            x[i] = x[i - 1] + step[(i - 1) % 2]
        return x.reshape(-1)

    def end_to_end(self, q: np.ndarray) -> np.ndarray:
        return end_to_end_length(q, self.n_atoms)


def end_to_end_length(q: np.ndarray, n_atoms: int | None = None) -> np.ndarray:
    """Distance between the first and the last bead."""
    q = np.asarray(q, dtype=float)
    if n_atoms is None:
        if q.shape[-1] % 3:
            raise ValueError("coordinate dimension is not a multiple of 3")
        n_atoms = q.shape[-1] // 3
    if n_atoms < 2:
        raise ValueError("need at least two atoms")
    x = _atoms(q, n_atoms)
    d = x[..., -1, :] - x[..., 0, :]
    return np.sqrt(np.sum(d * d, axis=-1))


def alkane_xi(model: AlkaneModel, which: str, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and Jacobian of one family of internal coordinates.

    Raises :class:`SingularGeometryError` with the offending index on
    degenerate geometry (collinear triples or quadruple planes).
    """
    ev = model._eval(q)
    if which == "bond":
        return ev.bond()[0], ev.bond_jac()
    if which == "angle":
        return ev.angle("raise"), ev.angle_jac("raise")
    if which == "torsion":
        return ev.torsion("raise"), ev.torsion_jac("raise")
    raise ValueError("which must be one of bond, angle, torsion")


def _collect_families(ev: _ChainEval, families: tuple[str, ...]):
    vals = []
    jacs = []
    for fam in families:
        if fam == "bond":
            vals.append(ev.bond()[0])
            jacs.append(ev.bond_jac())
        elif fam == "angle":
            vals.append(ev.angle())
            jacs.append(ev.angle_jac())
        else:
            vals.append(ev.torsion())
            jacs.append(ev.torsion_jac())
    return np.concatenate(vals, axis=-1), np.concatenate(jacs, axis=-2)


def _fused_families(model: AlkaneModel, families: tuple[str, ...]):
    """State evaluator returning (xi, jac, potential, force) in one pass."""

    def state_eval(q):
        ev = model._eval(q)
        xi, jac = _collect_families(ev, families)
        pot, force = model._pot_force(ev)
        return xi, jac, pot, force

    return state_eval


def _fused_xi_jac(model: AlkaneModel, families: tuple[str, ...]):
    """Constraints-only evaluator (xi, jac): the Newton iteration hot path."""

    def xi_jac(q):
        return _collect_families(model._eval(q), families)

    return xi_jac


def _stacked_map(model: AlkaneModel, families: tuple[str, ...]) -> ConstraintMap:
    sizes = {"bond": model.n_bonds, "angle": model.n_angles, "torsion": model.n_torsions}
    n = sum(sizes[f] for f in families)
    wrap = np.concatenate(
        [np.full(sizes[f], f == "torsion", dtype=bool) for f in families]
    )

    def value(q):
        ev = model._eval(q)
        parts = {"bond": lambda: ev.bond()[0], "angle": ev.angle, "torsion": ev.torsion}
        return np.concatenate([parts[f]() for f in families], axis=-1)

    def jacobian(q):
        ev = model._eval(q)
        parts = {"bond": ev.bond_jac, "angle": ev.angle_jac, "torsion": ev.torsion_jac}
        return np.concatenate([parts[f]() for f in families], axis=-2)

    return ConstraintMap(model.dim, n, value, jacobian, wrap if wrap.any() else None)


def butane_system(
    nu: float,
    *,
    n_atoms: int = 4,
    rigid_angles: bool = False,
    beta: float = 1.0,
    a0: float = 500.0,
    b0: float = 20.0,
) -> ImmpSystem:
    """Chain with rigid unit bonds and mass-penalized bending angles.

    ``nu = 0`` drops the penalized block (bond-constrained baseline run);
    ``rigid_angles`` freezes the angles at the right-angle equilibrium
    instead (fully constrained comparison run).
    """
    model = AlkaneModel(n_atoms, a0=a0, b0=b0)
    bond_targets = np.ones(model.n_bonds)
    if rigid_angles:
        families = ("bond", "angle")
        return ImmpSystem(
            model,
            constraints=_stacked_map(model, families),
            penalized=np.zeros(model.n_bonds + model.n_angles, dtype=bool),
            rigid_targets=np.concatenate([bond_targets, np.full(model.n_angles, np.pi / 2)]),
            beta=beta,
            state_eval=_fused_families(model, families),
            xi_jac_eval=_fused_xi_jac(model, families),
        )
    if nu == 0.0:
        families = ("bond",)
        return ImmpSystem(
            model,
            constraints=_stacked_map(model, families),
            penalized=np.zeros(model.n_bonds, dtype=bool),
            rigid_targets=bond_targets,
            beta=beta,
            state_eval=_fused_families(model, families),
            xi_jac_eval=_fused_xi_jac(model, families),
        )
    families = ("bond", "angle")
    penalized = np.zeros(model.n_bonds + model.n_angles, dtype=bool)
    penalized[model.n_bonds :] = True
    return ImmpSystem(
        model,
        constraints=_stacked_map(model, families),
        penalized=penalized,
        rigid_targets=bond_targets,
        penalty=PenaltySpec(nu, np.eye(model.n_angles)),
        beta=beta,
        state_eval=_fused_families(model, families),
        xi_jac_eval=_fused_xi_jac(model, families),
    )


def alkane_system(
    n_atoms: int,
    nu: float,
    *,
    beta: float = 1.0,
    a0: float = 500.0,
    b0: float = 20.0,
) -> ImmpSystem:
    """Chain with rigid bonds and angles and mass-penalized torsions.

    The torsion force is applied to the auxiliary momenta (force-split
    variant); the q-space force of the split is identically zero because the
    whole potential depends on the coordinates through the torsions only.
    ``nu = 0`` gives the baseline with free torsions driven directly.
    """
    model = AlkaneModel(n_atoms, a0=a0, b0=b0)
    rigid_targets = np.concatenate(
        [np.ones(model.n_bonds), np.full(model.n_angles, np.pi / 2)]
    )
    if nu == 0.0:
        families = ("bond", "angle")
        return ImmpSystem(
            model,
            constraints=_stacked_map(model, families),
            penalized=np.zeros(model.n_bonds + model.n_angles, dtype=bool),
            rigid_targets=rigid_targets,
            beta=beta,
            state_eval=_fused_families(model, families),
            xi_jac_eval=_fused_xi_jac(model, families),
        )
    families = ("bond", "angle", "torsion")
    n_all = model.n_bonds + model.n_angles + model.n_torsions
    penalized = np.zeros(n_all, dtype=bool)
    penalized[model.n_bonds + model.n_angles :] = True

    def split_value(q, zred):
        return model.torsion_energy(zred)

    def split_grad1(q):
        return np.zeros_like(np.asarray(q, dtype=float))

    def split_grad2(q, zred):
        return model.b0 * np.sin(zred)

    return ImmpSystem(
        model,
        constraints=_stacked_map(model, families),
        penalized=penalized,
        rigid_targets=rigid_targets,
        penalty=PenaltySpec(nu, np.eye(model.n_torsions)),
        beta=beta,
        split=SplitPotential(value=split_value, grad1=split_grad1, grad2=split_grad2),
        state_eval=_fused_families(model, families),
        xi_jac_eval=_fused_xi_jac(model, families),
    )
