"""Geometry of selected fast degrees of freedom.

A handful of scalar functions ``xi_i(q)`` single out coordinates of a
mechanical system (bond lengths, bending angles, torsions, ...) that are
either rigidly constrained or mass-penalized.  This module evaluates the
map and its Jacobian, the mass-metric Gram matrix, the penalized mass
tensor, the geometric correcting potential (log-determinant form) together
with its gradient, and the cotangent-space projector used for momentum
sampling.

All operations broadcast over leading axes: positions may be passed with
shape ``(..., d)`` and results gain the same leading shape.  Everything in
here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "SingularGeometryError",
    "ConstraintMap",
    "MassSpec",
    "PenaltySpec",
    "wrap_angle",
    "fd_jacobian",
    "concat_maps",
    "linear_map",
    "radial_map",
    "gram_matrix",
    "gram_from_jacobian",
    "penalized_mass",
    "fixman_penalized",
    "fixman_gradient",
    "cotangent_projector",
    "smallest_singular_value",
]

#: default finite-difference step for Jacobian / second-derivative stencils
FD_STEP = 1e-5

#: smallest admissible singular value of a constraint Jacobian
RANK_TOL = 1e-10


class SingularGeometryError(RuntimeError):
    """Constraint gradients degenerate: rank loss, collinearity or a
    singular constraint system."""


def wrap_angle(x: np.ndarray) -> np.ndarray:
    """Reduce angles to the representative in (-pi, pi]."""
    y = np.remainder(np.asarray(x) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


@dataclass(frozen=True)
class ConstraintMap:
    """Smooth map ``xi`` from R^d to R^n selecting fast degrees of freedom.

    ``value(q)`` accepts positions of shape ``(..., dim_q)`` and returns
    ``(..., dim_xi)``; ``jacobian(q)`` returns ``(..., dim_xi, dim_q)``.
    Components flagged in ``wrap`` are angle valued: residuals against them
    are taken modulo 2*pi with the representative in (-pi, pi].
    """

    dim_q: int
    dim_xi: int
    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    wrap: np.ndarray | None = None

    def __post_init__(self):
        if self.dim_xi > self.dim_q:
            raise ValueError("more constrained components than coordinates")
        if self.wrap is not None:
            w = np.asarray(self.wrap, dtype=bool)
            if w.shape != (self.dim_xi,):
                raise ValueError("wrap mask must have shape (dim_xi,)")
            object.__setattr__(self, "wrap", w)

    def residual(self, q: np.ndarray, target: np.ndarray) -> np.ndarray:
        """xi(q) - target, angle components wrapped to (-pi, pi]."""
        r = self.value(q) - target
        if self.wrap is not None and self.wrap.any():
            r = np.where(self.wrap, wrap_angle(r), r)
        return r


def fd_jacobian(cm: ConstraintMap, q: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference Jacobian of ``cm.value``; oracle for tests."""
    q = np.asarray(q, dtype=float)
    eye = np.eye(cm.dim_q)
    qp = q[..., None, :] + step * eye
    qm = q[..., None, :] - step * eye
    diff = cm.value(qp) - cm.value(qm)  # (..., d, n)
    if cm.wrap is not None and cm.wrap.any():
        diff = np.where(cm.wrap, wrap_angle(diff), diff)
    return np.swapaxes(diff, -1, -2) / (2.0 * step)


def concat_maps(maps: list[ConstraintMap]) -> ConstraintMap:
    """Stack several constraint maps over the same coordinates."""
    if not maps:
        raise ValueError("need at least one map")
    d = maps[0].dim_q
    if any(m.dim_q != d for m in maps):
        raise ValueError("maps act on different coordinate spaces")
    n = sum(m.dim_xi for m in maps)
    wrap = np.concatenate(
        [m.wrap if m.wrap is not None else np.zeros(m.dim_xi, bool) for m in maps]
    )

    def value(q):
        return np.concatenate([m.value(q) for m in maps], axis=-1)

    def jacobian(q):
        return np.concatenate([m.jacobian(q) for m in maps], axis=-2)

    return ConstraintMap(d, n, value, jacobian, wrap if wrap.any() else None)


def linear_map(a: np.ndarray, offset: np.ndarray | None = None) -> ConstraintMap:
    """Affine constraints xi(q) = a q + offset (constant Jacobian)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n, d = a.shape
    b = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    def value(q):
        return np.asarray(q) @ a.T + b

    def jacobian(q):
        q = np.asarray(q)
        return np.broadcast_to(a, q.shape[:-1] + (n, d)).copy()

    return ConstraintMap(d, n, value, jacobian)


def radial_map(dim_q: int, radius: float = 1.0) -> ConstraintMap:
    """Single constraint xi(q) = |q| - radius."""

    def value(q):
        q = np.asarray(q, dtype=float)
        return np.sqrt(np.sum(q * q, axis=-1, keepdims=True)) - radius

    def jacobian(q):
        q = np.asarray(q, dtype=float)
        r = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
        return (q / r)[..., None, :]

    return ConstraintMap(dim_q, 1, value, jacobian)


def _check_spd(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{what} must be a square matrix")
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError(f"{what} must be symmetric")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what} must be positive definite") from exc
    return chol


@dataclass(frozen=True)
class MassSpec:
    """Symmetric positive-definite mass matrix with cached factorizations.

    Diagonal matrices (all shipped models) take a broadcast fast path.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        chol = _check_spd(m, "mass matrix")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_inv", np.linalg.inv(m))
        diag = np.diagonal(m)
        is_diag = np.count_nonzero(m - np.diag(diag)) == 0
        object.__setattr__(self, "_diag", diag.copy() if is_diag else None)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return self._inv

    def inv_apply(self, v: np.ndarray) -> np.ndarray:
        """M^{-1} v, broadcasting over leading axes of v (..., d)."""
        if self._diag is not None:
            return v / self._diag
        return v @ self._inv  # inverse is symmetric

    def apply(self, v: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            return v * self._diag
        return v @ self.matrix

    def sqrt_apply(self, v: np.ndarray) -> np.ndarray:
        """L v with M = L L^T; Gaussian draws L zeta have covariance M."""
        if self._diag is not None:
            return v * np.sqrt(self._diag)
        return v @ self._chol.T

    def inv_quad(self, v: np.ndarray) -> np.ndarray:
        """v^T M^{-1} v per leading index."""
        return np.sum(v * self.inv_apply(v), axis=-1)


def identity_mass(dim: int) -> MassSpec:
    return MassSpec(np.eye(dim))


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty intensity and the virtual mass attached to penalized components."""

    nu: float
    mz: np.ndarray

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("penalty intensity must be non-negative")
        mz = np.asarray(self.mz, dtype=float)
        chol = _check_spd(mz, "virtual mass")
        object.__setattr__(self, "mz", mz)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_inv", np.linalg.inv(mz))

    @property
    def dim(self) -> int:
        return self.mz.shape[0]

    @property
    def mz_inv(self) -> np.ndarray:
        return self._inv

    def mz_spec(self) -> MassSpec:
        return MassSpec(self.mz)


def unit_penalty(nu: float, n: int) -> PenaltySpec:
    return PenaltySpec(nu, np.eye(n))


def smallest_singular_value(jac: np.ndarray) -> np.ndarray:
    """Smallest singular value of the constraint Jacobian, per leading index."""
    if jac.shape[-2] == 0:
        return np.full(jac.shape[:-2], np.inf)
    return np.linalg.svd(jac, compute_uv=False)[..., -1]


def _require_full_rank(jac: np.ndarray) -> None:
    sv = smallest_singular_value(jac)
    if np.any(sv <= RANK_TOL) or not np.all(np.isfinite(sv)):
        raise SingularGeometryError(
            f"constraint Jacobian is rank deficient (smallest singular value "
            f"{np.min(sv):.3e} <= {RANK_TOL:g})"
        )


def gram_from_jacobian(jac: np.ndarray, ms: MassSpec) -> np.ndarray:
    """G = (grad xi)^T M^{-1} (grad xi) assembled from a Jacobian (..., n, d)."""
    jm = ms.inv_apply(jac)
    return np.einsum("...nd,...md->...nm", jm, jac)


def gram_matrix(cm: ConstraintMap, ms: MassSpec, q: np.ndarray) -> np.ndarray:
    """Mass-metric Gram matrix of the constraint gradients at q.

    Raises :class:`SingularGeometryError` when the Jacobian loses rank.
    """
    jac = cm.jacobian(np.asarray(q, dtype=float))
    _require_full_rank(jac)
    return gram_from_jacobian(jac, ms)


def penalized_mass(
    cm: ConstraintMap, ms: MassSpec, ps: PenaltySpec, q: np.ndarray
) -> np.ndarray:
    """Penalized mass tensor M + nu^2 (grad xi) M_z (grad xi)^T.

    Reduces to M exactly when nu = 0.
    """
    q = np.asarray(q, dtype=float)
    if ps.nu == 0.0:
        return np.broadcast_to(ms.matrix, q.shape[:-1] + ms.matrix.shape).copy()
    jac = cm.jacobian(q)
    bump = np.einsum("...nd,nm,...me->...de", jac, ps.mz, jac)
    return ms.matrix + ps.nu**2 * bump


def _logdet_spd(a: np.ndarray) -> np.ndarray:
    sign, logdet = np.linalg.slogdet(a)
    if np.any(sign <= 0):
        raise SingularGeometryError("penalized Gram matrix is not positive definite")
    return logdet


def fixman_from_amat(amat: np.ndarray, beta: float) -> np.ndarray:
    """Correcting potential (2 beta)^{-1} log det A for an assembled A."""
    if amat.shape[-1] == 0:
        return np.zeros(amat.shape[:-2])
    return _logdet_spd(amat) / (2.0 * beta)


def fixman_penalized(
    cm: ConstraintMap, ms: MassSpec, ps: PenaltySpec, q: np.ndarray, beta: float
) -> np.ndarray:
    """Geometric correcting potential of the penalized mass tensor.

    Log-determinant form (2 beta)^{-1} ln det(G + nu^{-2} M_z^{-1}); equals the
    d-dimensional det form up to a q-independent additive constant.  The same
    code path with the nu^{-2} term dropped gives the rigid-constraint
    corrector (2 beta)^{-1} ln det G.
    """
    if ps.nu <= 0:
        raise ValueError("the log-determinant corrector requires nu > 0")
    jac = cm.jacobian(np.asarray(q, dtype=float))
    amat = gram_from_jacobian(jac, ms) + ps.mz_inv / ps.nu**2
    return fixman_from_amat(amat, beta)


def _jacobian_derivatives(cm: ConstraintMap, q: np.ndarray, step: float) -> np.ndarray:
    """d/dq_i of the Jacobian, by central differences: (..., d, n, d)."""
    eye = np.eye(cm.dim_q)
    jp = cm.jacobian(q[..., None, :] + step * eye)
    jm = cm.jacobian(q[..., None, :] - step * eye)
    return (jp - jm) / (2.0 * step)


def fixman_gradient_from_bmat(
    cm: ConstraintMap,
    ms: MassSpec,
    bmat: np.ndarray,
    q: np.ndarray,
    beta: float,
    fd_step: float = FD_STEP,
) -> np.ndarray:
    """Gradient of (2 beta)^{-1} ln det(G(q) + B) for constant B.

    Uses the trace identity d_i V = (2 beta)^{-1} tr(A^{-1} d_i G) with the
    second derivatives of xi obtained by finite differences of the analytic
    Jacobian.
    """
    q = np.asarray(q, dtype=float)
    jac = cm.jacobian(q)
    amat = gram_from_jacobian(jac, ms) + bmat
    ainv = np.linalg.inv(amat)
    djac = _jacobian_derivatives(cm, q, fd_step)  # (..., d, n, d)
    jm = ms.inv_apply(jac)  # M^{-1} grad xi rows: (..., n, d)
    # tr(A^{-1} dG_i) = 2 tr(A^{-1} dJ_i M^{-1} J^T) since A^{-1} symmetric
    return np.einsum("...ab,...ibd,...ad->...i", ainv, djac, jm) / beta


def fixman_gradient(
    cm: ConstraintMap,
    ms: MassSpec,
    ps: PenaltySpec,
    q: np.ndarray,
    beta: float,
    fd_step: float = FD_STEP,
) -> np.ndarray:
    """Force -free gradient of :func:`fixman_penalized` at q."""
    if ps.nu <= 0:
        raise ValueError("the log-determinant corrector requires nu > 0")
    return fixman_gradient_from_bmat(cm, ms, ps.mz_inv / ps.nu**2, q, beta, fd_step)


def cotangent_projector(cm: ConstraintMap | None, ms: MassSpec, q: np.ndarray) -> np.ndarray:
    """Projector P = Id - (grad xi) G^{-1} (grad xi)^T M^{-1}.

    P is idempotent and maps any momentum into the cotangent space
    {p : (grad xi)^T M^{-1} p = 0}.  With no constraints it is the identity.
    """
    q = np.asarray(q, dtype=float)
    if cm is None or cm.dim_xi == 0:
        return np.broadcast_to(np.eye(ms.dim), q.shape[:-1] + (ms.dim, ms.dim)).copy()
    jac = cm.jacobian(q)
    _require_full_rank(jac)
    gram = gram_from_jacobian(jac, ms)
    jm = ms.inv_apply(jac)  # (grad xi)^T M^{-1} rows: (..., n, d)
    ginv_jm = np.linalg.solve(gram, jm)  # G^{-1} (grad xi)^T M^{-1}
    return np.eye(ms.dim) - np.einsum("...na,...nb->...ab", jac, ginv_jm)
