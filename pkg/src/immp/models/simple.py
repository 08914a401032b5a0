"""Small test systems: quadratic wells, a pendulum and the stiff radial model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from immp.geometry import MassSpec, PenaltySpec, identity_mass, linear_map, radial_map
from immp.integrators import ImmpSystem, SplitPotential


@dataclass(frozen=True)
class QuadraticModel:
    """V(q) = k |q|^2 / 2 on R^dim."""

    dim: int = 1
    k: float = 1.0
    mass: MassSpec = None

    def __post_init__(self):
        if self.mass is None:
            object.__setattr__(self, "mass", identity_mass(self.dim))

    def potential(self, q):
        return 0.5 * self.k * np.sum(np.asarray(q) ** 2, axis=-1)

    def force(self, q):
        return -self.k * np.asarray(q)


@dataclass(frozen=True)
class DoubleWellModel:
    """V(q) = (q^2 - 1)^2, one degree of freedom."""

    dim: int = 1
    mass: MassSpec = field(default_factory=lambda: identity_mass(1))

    def potential(self, q):
        q = np.asarray(q)[..., 0]
        return (q**2 - 1.0) ** 2

    def force(self, q):
        q = np.asarray(q)
        return -4.0 * q * (q**2 - 1.0)


@dataclass(frozen=True)
class PlanarModel:
    """V(q) = g q_2 on R^2 (a tilted plane; pendulum once |q| is constrained)."""

    g: float = 1.0
    dim: int = 2
    mass: MassSpec = field(default_factory=lambda: identity_mass(2))

    def potential(self, q):
        return self.g * np.asarray(q)[..., 1]

    def force(self, q):
        f = np.zeros_like(np.asarray(q, dtype=float))
        f[..., 1] = -self.g
        return f


def quadratic_penalized_system(nu: float, *, k: float = 1.0, beta: float = 1.0) -> ImmpSystem:
    """1-DOF quadratic well with the coordinate itself penalized (xi(q) = q).

    A fully linear system: the constrained leapfrog reduces to an explicit
    one and the canonical target is an exact Gaussian.
    """
    model = QuadraticModel(dim=1, k=k)
    if nu == 0.0:
        return ImmpSystem(model, beta=beta)
    return ImmpSystem(
        model,
        constraints=linear_map(np.array([[1.0]])),
        penalized=np.array([True]),
        penalty=PenaltySpec(nu, np.eye(1)),
        beta=beta,
    )


def double_well_system(nu: float, *, beta: float = 1.0) -> ImmpSystem:
    model = DoubleWellModel()
    if nu == 0.0:
        return ImmpSystem(model, beta=beta)
    return ImmpSystem(
        model,
        constraints=linear_map(np.array([[1.0]])),
        penalized=np.array([True]),
        penalty=PenaltySpec(nu, np.eye(1)),
        beta=beta,
    )


def pendulum_system(*, g: float = 1.0, radius: float = 1.0, beta: float = 1.0) -> ImmpSystem:
    """Planar pendulum: |q| = radius rigidly constrained."""
    model = PlanarModel(g=g)
    return ImmpSystem(
        model,
        constraints=radial_map(2, 0.0),
        penalized=np.array([False]),
        rigid_targets=np.array([radius]),
        beta=beta,
    )


@dataclass(frozen=True)
class StiffRadialModel:
    """Planar particle with a stiff radial spring: V = V_slow + (|q|-1)^2 / (2 eps^2).

    The slow part is the tilt g q_2.  The potential has the two-scale form
    U(q, xi(q)/eps) with U(q, w) = g q_2 + w^2/2 and xi(q) = |q| - 1, so the
    effective potential on the circle is V_slow up to an additive constant.
    """

    epsilon: float
    g: float = 1.0
    dim: int = 2
    mass: MassSpec = field(default_factory=lambda: identity_mass(2))

    def slow_potential(self, q):
        return self.g * np.asarray(q)[..., 1]

    def slow_force(self, q):
        f = np.zeros_like(np.asarray(q, dtype=float))
        f[..., 1] = -self.g
        return f

    def xi_value(self, q):
        return np.linalg.norm(q, axis=-1) - 1.0

    def potential(self, q):
        return self.slow_potential(q) + self.xi_value(q) ** 2 / (2.0 * self.epsilon**2)

    def force(self, q):
        q = np.asarray(q, dtype=float)
        r = np.linalg.norm(q, axis=-1, keepdims=True)
        radial = (r - 1.0) / self.epsilon**2 * (q / r)
        return self.slow_force(q) - radial

    def u_value(self, q, w):
        """Two-scale energy U(q, w) with w the rescaled fast coordinate."""
        return self.slow_potential(q) + 0.5 * np.sum(np.asarray(w) ** 2, axis=-1)

    def effective_potential(self, q, beta: float = 1.0) -> float:
        """-beta^{-1} ln int exp(-beta U(q, w)) dw by quadrature (single point)."""
        vs = float(self.slow_potential(np.asarray(q)))
        norm, _ = quad(lambda w: np.exp(-beta * 0.5 * w**2), -np.inf, np.inf)
        return vs - np.log(norm) / beta


def stiff_system(epsilon: float, nubar: float, *, g: float = 1.0, beta: float = 1.0) -> ImmpSystem:
    """Penalized stiff radial model at intensity nu = nubar / epsilon (split form)."""
    model = StiffRadialModel(epsilon=epsilon, g=g)
    nu = nubar / epsilon

    def grad1(q):
        return -model.slow_force(q)

    def grad2(q, zred):
        # d/dw of U(q, w/eps) at w = zred: the stiff spring pulled back
        return zred / epsilon**2

    def value(q, zred):
        return model.slow_potential(q) + 0.5 * np.sum((zred / epsilon) ** 2, axis=-1)

    return ImmpSystem(
        model,
        constraints=radial_map(2, 1.0),
        penalized=np.array([True]),
        penalty=PenaltySpec(nu, np.eye(1)),
        beta=beta,
        split=SplitPotential(value=value, grad1=grad1, grad2=grad2),
    )
