"""Harmonic particle chain with a mass penalty on inter-particle distances.

N particles on a line interact through the quadratic potential of their
scaled differences; the discrete Neumann gradient is
``(grad_d q)_i = N (q_{i+1} - q_i)`` and the Laplacian
``lap_d = -(grad_d)^T grad_d``.  Penalizing the differences with intensity
``nubar * N`` and unit virtual mass turns the mass operator into
``Id - nubar^2 lap_d``: a low-pass filter acting on the momenta.  The chain
couples to a heat bath at the size-rescaled inverse temperature ``beta_n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = ["HarmonicChain", "neumann_eigenvalues"]


def neumann_eigenvalues(n: int) -> np.ndarray:
    """Eigenvalues 4 N^2 sin^2(k pi / 2N), k = 0..N-1, of minus the Laplacian."""
    if n < 2:
        raise ValueError("need at least two particles")
    k = np.arange(n)
    return 4.0 * n**2 * np.sin(k * np.pi / (2 * n)) ** 2


@dataclass
class HarmonicChain:
    """State and operators of the penalized harmonic chain.

    ``v_ext`` / ``v_ext_prime`` add a bounded exterior potential acting on
    each particle (used by the macroscopic-convergence experiment); the
    default is none.
    """

    n: int
    nubar: float = 0.0
    beta_n: float = 1.0
    gamma: float = 0.0
    v_ext = None
    v_ext_prime = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two particles")
        n = self.n
        grad = np.zeros((n - 1, n))
        idx = np.arange(n - 1)
        grad[idx, idx] = -n
        grad[idx, idx + 1] = n
        self.grad_d = grad
        self.lap_d = -grad.T @ grad
        self.pen_mass = np.eye(n) - self.nubar**2 * self.lap_d
        self._pen_cho = cho_factor(self.pen_mass)
        # Neumann cosine basis rows: P @ P.T = Id, -lap = P^T diag(delta) P
        i = np.arange(n)
        p = np.cos(np.outer(np.arange(n) * np.pi, (i + 0.5) / n)) * np.sqrt(2.0 / n)
        p[0] *= np.sqrt(0.5)
        self.pmat = p
        self.delta = neumann_eigenvalues(n)
        self._ou_cache: dict[float, tuple] = {}

    # -- linear algebra helpers ---------------------------------------------
    def mass_solve(self, p: np.ndarray) -> np.ndarray:
        """(Id - nubar^2 lap)^{-1} p along the last axis."""
        p = np.asarray(p, dtype=float)
        x = cho_solve(self._pen_cho, p.reshape(-1, self.n).T).T
        return x.reshape(p.shape)

    def to_spectral(self, v: np.ndarray) -> np.ndarray:
        return v @ self.pmat.T

    def from_spectral(self, vhat: np.ndarray) -> np.ndarray:
        return vhat @ self.pmat

    def mass_power_apply(self, p: np.ndarray, power: float) -> np.ndarray:
        """(Id - nubar^2 lap)^power p through the spectral factorization."""
        scale = (1.0 + self.nubar**2 * self.delta) ** power
        return self.from_spectral(self.to_spectral(p) * scale)

    # -- energies -------------------------------------------------------------
    def energy(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        kin = 0.5 * np.sum(p * self.mass_solve(p), axis=-1)
        pot = 0.5 * np.einsum("...i,ij,...j->...", q, -self.lap_d, q)
        if self.v_ext is not None:
            pot = pot + np.sum(self.v_ext(q), axis=-1)
        return kin + pot

    def mode_energies(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Per-mode energies (k >= 1): kinetic plus potential share."""
        qh = self.to_spectral(q)
        ph = self.to_spectral(p)
        scale = 1.0 + self.nubar**2 * self.delta
        return (0.5 * ph**2 / scale + 0.5 * self.delta * qh**2)[..., 1:]

    # -- dynamics ---------------------------------------------------------------
    def _force(self, q: np.ndarray) -> np.ndarray:
        f = q @ self.lap_d  # symmetric
        if self.v_ext_prime is not None:
            f = f - self.v_ext_prime(q)
        return f

    def leapfrog_step(self, q: np.ndarray, p: np.ndarray, dt: float):
        """One kick-drift-kick step of the penalized Hamiltonian part."""
        p_half = p + 0.5 * dt * self._force(q)
        q1 = q + dt * self.mass_solve(p_half)
        p1 = p_half + 0.5 * dt * self._force(q1)
        return q1, p1

    def ou_step(
        self,
        p: np.ndarray,
        dt: float,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> np.ndarray:
        """Mid-point fluctuation/dissipation step at temperature beta_n."""
        if self.gamma == 0.0:
            return p
        if noise is None:
            noise = rng.standard_normal(p.shape)
        sigma = np.sqrt(2.0 * self.gamma / self.beta_n)
        a = p - 0.5 * dt * self.gamma * self.mass_solve(p) + np.sqrt(dt) * sigma * noise
        # (Id + (dt/2) gamma Mp^{-1}) p' = a  <=>  (Mp + (dt/2) gamma) x = a, p' = Mp x
        key = float(dt)
        fac = self._ou_cache.get(key)
        if fac is None:
            fac = cho_factor(self.pen_mass + 0.5 * dt * self.gamma * np.eye(self.n))
            self._ou_cache[key] = fac
        x = cho_solve(fac, np.asarray(a, dtype=float).reshape(-1, self.n).T).T
        return (x @ self.pen_mass).reshape(a.shape)

    def step(
        self,
        q: np.ndarray,
        p: np.ndarray,
        dt: float,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ):
        """Leapfrog plus fluctuation/dissipation; reduces to plain leapfrog
        on the discrete wave equation when nubar = gamma = 0."""
        q1, p1 = self.leapfrog_step(q, p, dt)
        p1 = self.ou_step(p1, dt, rng=rng, noise=noise)
        return q1, p1

    # -- sampling ---------------------------------------------------------------
    def sample_canonical(self, rng: np.random.Generator, shape: tuple = ()) -> tuple:
        """Canonical draw at beta_n in the spectral basis.

        The zero mode carries no potential: its position is pinned at zero
        and its momentum drawn from the free Gaussian.
        """
        scale = 1.0 + self.nubar**2 * self.delta
        ph = rng.standard_normal(shape + (self.n,)) * np.sqrt(scale / self.beta_n)
        qh = np.zeros(shape + (self.n,))
        qh[..., 1:] = rng.standard_normal(shape + (self.n - 1,)) / np.sqrt(
            self.beta_n * self.delta[1:]
        )
        return self.from_spectral(qh), self.from_spectral(ph)
