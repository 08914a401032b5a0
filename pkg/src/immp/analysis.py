"""Experiment metrics and analytic oracles.

Critical time steps are located by bisection on a monotone functional of
one-step energy errors estimated with common random numbers.  Spectral
densities and autocorrelations diagnose trajectories; closed-form spectral
results for the harmonic chain (eigenvalues, stability bound, one-step
energy-change statistics) serve as exact references.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

from immp.models.chain import HarmonicChain, neumann_eigenvalues

log = logging.getLogger(__name__)

__all__ = [
    "BracketError",
    "FitError",
    "InsufficientDataError",
    "CriticalDtResult",
    "critical_dt",
    "calibrate_level",
    "SpectrumResult",
    "spectral_density",
    "autocorr_and_decorrelation",
    "pathwise_error_order",
    "chain_eigenvalues",
    "chain_cfl_dt",
    "chain_mode_matrices",
    "ChainDhStats",
    "chain_dh_stats",
    "chain_dh_mean_dense",
    "chain_blowup_dt",
    "macroscopic_convergence_experiment",
]


class BracketError(RuntimeError):
    """The bisection bracket does not straddle the target level."""


class FitError(RuntimeError):
    """Not enough (or degenerate) data for a log-log slope fit."""


class InsufficientDataError(RuntimeError):
    """Series too short for the requested statistic."""


# ---------------------------------------------------------------------------
# critical time steps
# ---------------------------------------------------------------------------

@dataclass
class CriticalDtResult:
    """Critical time step located by bisection.

    ``evaluations`` records the (dt, functional value) pairs visited, in
    evaluation order; the realized estimates must be monotone for the
    bisection to be meaningful and are checked for it.
    """

    dt_c: float
    mode: str
    level: float
    n_samples: int
    stderr: float
    evaluations: list = field(default_factory=list)


def _functional(dh: np.ndarray, mode: str, beta: float, n_free_dof: int) -> float:
    """Monotone-increasing-in-dt target: mean positive energy error per free
    degree of freedom (dyn) or the Metropolis rejection rate (sampl)."""
    pos = np.maximum(dh, 0.0)
    if mode == "dyn":
        return float(np.mean(beta * pos)) / n_free_dof
    if mode == "sampl":
        with np.errstate(over="ignore"):
            w = np.exp(-beta * pos)
        return 1.0 - float(np.mean(np.where(np.isfinite(dh), w, 0.0)))
    raise ValueError("mode must be 'dyn' or 'sampl'")


def _bootstrap_stderr(dh: np.ndarray, mode: str, beta: float, n_free_dof: int,
                      rng: np.random.Generator, n_boot: int = 100) -> float:
    vals = np.empty(n_boot)
    n = dh.shape[0]
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        vals[b] = _functional(dh[idx], mode, beta, n_free_dof)
    vals = vals[np.isfinite(vals)]
    if vals.size < 2:
        return float("nan")
    return float(vals.std(ddof=1))


def calibrate_level(
    trials: Callable[[float], np.ndarray],
    mode: str,
    dt_ref: float,
    *,
    beta: float = 1.0,
    n_free_dof: int = 1,
) -> float:
    """Value of the target functional at a reference time step.

    Used to pin the error level on a baseline integrator; the level is then
    held fixed while other integrators are bisected against it.
    """
    return _functional(trials(dt_ref), mode, beta, n_free_dof)


def critical_dt(
    trials: Callable[[float], np.ndarray],
    mode: str,
    level: float,
    dt_bracket: tuple[float, float],
    *,
    beta: float = 1.0,
    n_free_dof: int = 1,
    rel_width: float = 0.02,
    stderr_rng: np.random.Generator | None = None,
) -> CriticalDtResult:
    """Bisection for the time step at which the error functional hits a level.

    ``trials(dt)`` returns one-step energy changes sampled from equilibrium
    states; for common-random-number monotonicity the callable should reuse
    the same states and momenta for every ``dt``.  The bracket must straddle
    the level.  The reported standard error combines a bootstrap over trials
    with the local slope of the functional.
    """
    lo, hi = float(dt_bracket[0]), float(dt_bracket[1])
    if not 0 < lo < hi:
        raise BracketError("bracket must satisfy 0 < lo < hi")
    evaluations = []

    def value(dt: float) -> float:
        dh = trials(dt)
        v = _functional(dh, mode, beta, n_free_dof)
        evaluations.append((dt, v))
        return v

    f_lo, f_hi = value(lo), value(hi)
    if not (f_lo <= level <= f_hi):
        raise BracketError(
            f"level {level:.3e} not straddled: f({lo:g})={f_lo:.3e}, f({hi:g})={f_hi:.3e}"
        )
    while (hi - lo) > rel_width * 0.5 * (hi + lo):
        mid = 0.5 * (lo + hi)
        if value(mid) < level:
            lo = mid
        else:
            hi = mid
    dt_c = 0.5 * (lo + hi)

    # monotonicity of realized estimates along the visited dt grid
    pts = sorted(evaluations)
    vals = [v for _, v in pts]
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise BracketError("realized functional estimates are not monotone in dt")

    stderr = float("nan")
    dh_final = trials(dt_c)
    v_final = _functional(dh_final, mode, beta, n_free_dof)
    evaluations.append((dt_c, v_final))
    if stderr_rng is not None:
        se_f = _bootstrap_stderr(dh_final, mode, beta, n_free_dof, stderr_rng)
        slope = abs(f_hi - f_lo) / (dt_bracket[1] - dt_bracket[0])
        lo_v = [v for d, v in pts if d <= dt_c]
        hi_v = [v for d, v in pts if d > dt_c]
        if lo_v and hi_v:
            d_lo = max(d for d, v in pts if d <= dt_c)
            d_hi = min(d for d, v in pts if d > dt_c)
            v_lo = max(v for d, v in pts if d == d_lo)
            v_hi = min(v for d, v in pts if d == d_hi)
            if d_hi > d_lo and v_hi > v_lo:
                slope = (v_hi - v_lo) / (d_hi - d_lo)
        stderr = se_f / slope if slope > 0 else float("nan")
    return CriticalDtResult(
        dt_c=dt_c, mode=mode, level=level, n_samples=int(np.size(dh_final)),
        stderr=stderr, evaluations=evaluations,
    )


# ---------------------------------------------------------------------------
# spectra and autocorrelation
# ---------------------------------------------------------------------------

@dataclass
class SpectrumResult:
    """Normalized frequency density of a time series and its cumulative."""

    omega: np.ndarray
    density: np.ndarray
    cumulative: np.ndarray
    degenerate: bool = False


def spectral_density(series: np.ndarray, dt: float) -> SpectrumResult:
    """Normalized squared Fourier modulus of a mean-removed series.

    The density integrates to one on the angular-frequency grid (trapezoid
    rule); a constant series yields the flagged degenerate result with a
    zero density.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InsufficientDataError("need a 1-d series of length >= 2")
    mean = x.mean()
    x = x - mean
    omega = 2.0 * np.pi * np.fft.rfftfreq(x.size, d=dt)
    if x.std() <= 1e-14 * max(1.0, abs(mean)):
        log.warning("degenerate spectrum: series is constant after mean removal")
        zero = np.zeros_like(omega)
        return SpectrumResult(omega, zero, zero.copy(), degenerate=True)
    amp2 = np.abs(np.fft.rfft(x)) ** 2
    norm = np.trapezoid(amp2, omega)
    if norm <= 0.0:
        return SpectrumResult(omega, np.zeros_like(amp2), np.zeros_like(amp2), degenerate=True)
    dens = amp2 / norm
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(omega))])
    return SpectrumResult(omega, dens, cum)


def autocorr_and_decorrelation(
    series: np.ndarray, *, min_lags: int = 10
) -> tuple[np.ndarray, float]:
    """Normalized autocorrelation and the squared-sum decorrelation time.

    Accepts shape (T,) or (T, R); replicas are averaged after per-replica
    mean removal.  The decorrelation time is 2 sum_n C_n^2 with the sum cut
    at the first lag where C_n^2 stays below the noise floor 2/sqrt(L) for
    ten consecutive lags (L the total sample count).
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t, r = x.shape
    if t < min_lags:
        raise InsufficientDataError(f"need at least {min_lags} samples, got {t}")
    x = x - x.mean(axis=0, keepdims=True)
    nfft = int(2 ** np.ceil(np.log2(2 * t)))
    f = np.fft.rfft(x, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:t].real
    acov /= np.arange(t, 0, -1)[:, None]  # unbiased lag normalization
    acov = acov.mean(axis=1)
    if acov[0] <= 0:
        raise InsufficientDataError("constant series has no autocorrelation")
    c = acov / acov[0]

    floor = 2.0 / np.sqrt(t * r)
    below = c**2 < floor
    cut = t
    run = 0
    for n in range(1, t):
        run = run + 1 if below[n] else 0
        if run >= 10:
            cut = n - 9
            break
    n_corr = 2.0 * float(np.sum(c[:cut] ** 2))
    return c, n_corr


def pathwise_error_order(
    traj_family: list[np.ndarray],
    reference: np.ndarray,
    param_list: list[float],
) -> tuple[float, np.ndarray]:
    """Log-log slope of the discrete-L2 trajectory error versus a parameter.

    Trajectories must share the reference's time grid.  Raises
    :class:`FitError` for fewer than three parameters or a vanishing error.
    """
    if len(traj_family) != len(param_list):
        raise ValueError("one trajectory per parameter")
    if len(param_list) < 3:
        raise FitError("need at least three parameters for a slope fit")
    ref = np.asarray(reference, dtype=float)
    errors = np.empty(len(param_list))
    for i, traj in enumerate(traj_family):
        d = np.asarray(traj, dtype=float) - ref
        errors[i] = np.sqrt(np.mean(d**2))
    if np.any(errors == 0.0):
        raise FitError("zero pathwise error; slope undefined")
    slope = float(np.polyfit(np.log(np.asarray(param_list, dtype=float)), np.log(errors), 1)[0])
    return slope, errors


# ---------------------------------------------------------------------------
# harmonic-chain closed forms
# ---------------------------------------------------------------------------

def chain_eigenvalues(n: int) -> np.ndarray:
    """Eigenvalues of minus the discrete Neumann Laplacian, ascending."""
    return neumann_eigenvalues(n)


def chain_cfl_dt(n: int, nubar: float) -> float:
    """Largest spectrally stable leapfrog step of the penalized chain."""
    if n < 2:
        raise ValueError("need at least two particles")
    edge = n**2 * np.sin((n - 1) * np.pi / (2 * n)) ** 2
    return float(np.sqrt(4.0 * nubar**2 + 1.0 / edge))


def chain_mode_matrices(n: int, nubar: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode one-step 2x2 matrices L_k and the reduced steps h_k (k>=1)."""
    delta = neumann_eigenvalues(n)[1:]
    h = dt * np.sqrt(delta) / np.sqrt(1.0 + nubar**2 * delta)
    lmat = np.empty((n - 1, 2, 2))
    lmat[:, 0, 0] = 1.0 - h**2 / 2.0
    lmat[:, 0, 1] = -h + h**3 / 4.0
    lmat[:, 1, 0] = h
    lmat[:, 1, 1] = 1.0 - h**2 / 2.0
    return lmat, h


@dataclass
class ChainDhStats:
    """One-step energy-change statistics of the chain leapfrog.

    Exact spectral sums next to Monte Carlo estimates from canonical
    draws, plus the ratios against the large-size asymptotic constants.
    """

    m_exact: float
    var_exact: float
    m_mc: float
    var_mc: float
    m_mc_stderr: float
    var_mc_stderr: float
    normality_p: float
    m_ratio_asymptotic: float
    var_ratio_asymptotic: float


def chain_dh_stats(
    n: int, nubar: float, dt: float, mc_samples: int, rng: np.random.Generator
) -> ChainDhStats:
    """Exact and sampled statistics of the scaled one-step energy change.

    In scaled mode coordinates the change is a sum of independent quadratic
    forms 0.5 X^T (L_k^T L_k - Id) X with standard Gaussian X, giving the
    exact mean sum h_k^6/2^5 and variance sum (h_k^6/2^4 + h_k^12/2^9).
    """
    lmat, h = chain_mode_matrices(n, nubar, dt)
    m_exact = float(np.sum(h**6) / 2**5)
    var_exact = float(np.sum(h**6 / 2**4 + h**12 / 2**9))

    x = rng.standard_normal((mc_samples, n - 1, 2))
    y = np.einsum("kab,skb->ska", lmat, x)
    dh = 0.5 * (np.sum(y**2, axis=(-1, -2)) - np.sum(x**2, axis=(-1, -2)))
    m_mc = float(dh.mean())
    var_mc = float(dh.var(ddof=1))
    m_se = float(dh.std(ddof=1) / np.sqrt(mc_samples))
    # stderr of the variance from the fourth central moment
    c = dh - dh.mean()
    var_se = float(np.sqrt(max((np.mean(c**4) - var_mc**2), 0.0) / mc_samples))
    normality_p = float(sps.normaltest((dh - m_exact) / np.sqrt(var_exact)).pvalue)

    if nubar > 0:
        m_ref = n * dt**6 / (32.0 * nubar**6)
        var_ref = n * dt**6 / (16.0 * nubar**6)
    else:
        m_ref = 5.0 / 8.0 * n**7 * dt**6
        var_ref = 5.0 / 4.0 * n**7 * dt**6
    return ChainDhStats(
        m_exact=m_exact,
        var_exact=var_exact,
        m_mc=m_mc,
        var_mc=var_mc,
        m_mc_stderr=m_se,
        var_mc_stderr=var_se,
        normality_p=normality_p,
        m_ratio_asymptotic=m_exact / m_ref,
        var_ratio_asymptotic=var_exact / var_ref,
    )


def chain_dh_mean_dense(n: int, nubar: float, dt: float) -> float:
    """Mean scaled energy change from the dense 2N-dimensional quadratic form.

    Small-size oracle: builds the full one-step leapfrog matrix on (p, q),
    expresses the energy change as a quadratic form and takes its canonical
    expectation mode by mode.
    """
    chain = HarmonicChain(n=n, nubar=nubar, beta_n=1.0)
    kmat = -chain.lap_d
    minv = np.linalg.inv(chain.pen_mass)
    # one step: p1/2 = p - dt/2 K q ; q' = q + dt Minv p1/2 ; p' = p1/2 - dt/2 K q'
    a_pp = np.eye(n) - 0.5 * dt**2 * kmat @ minv
    a_pq = -dt * kmat + 0.25 * dt**3 * kmat @ minv @ kmat
    a_qp = dt * minv
    a_qq = np.eye(n) - 0.5 * dt**2 * minv @ kmat
    phi = np.block([[a_pp, a_pq], [a_qp, a_qq]])
    hmat = np.block([[minv, np.zeros((n, n))], [np.zeros((n, n)), kmat]])
    amat = phi.T @ hmat @ phi - hmat
    # canonical covariance at beta_n = 1: momenta ~ pen_mass, positions ~ K^+
    cov = np.block(
        [[chain.pen_mass, np.zeros((n, n))], [np.zeros((n, n)), np.linalg.pinv(kmat)]]
    )
    return float(0.5 * np.trace(amat @ cov))


def chain_blowup_dt(
    chain_factory: Callable[[], HarmonicChain],
    dt_bracket: tuple[float, float],
    *,
    n_steps: int = 10_000,
    threshold: float = 1e6,
    seed: int = 0,
    rel_width: float = 0.005,
) -> float:
    """Empirical spectral stability edge of the chain leapfrog by bisection.

    A run blows up when the state norm exceeds the threshold within the
    given number of steps (checked in blocks); the initial state is a
    canonical draw, which excites every mode.
    """
    lo, hi = dt_bracket

    def blows_up(dt: float) -> bool:
        chain = chain_factory()
        rng = np.random.default_rng(seed)
        q, p = chain.sample_canonical(rng)
        with np.errstate(all="ignore"):
            for i in range(n_steps):
                q, p = chain.leapfrog_step(q, p, dt)
                if i % 50 == 0:
                    s = np.abs(q).max() + np.abs(p).max()
                    if not np.isfinite(s) or s > threshold:
                        return True
            s = np.abs(q).max() + np.abs(p).max()
        return bool(not np.isfinite(s) or s > threshold)

    if blows_up(lo) or not blows_up(hi):
        raise BracketError("bracket does not straddle the stability edge")
    while (hi - lo) > rel_width * 0.5 * (hi + lo):
        mid = 0.5 * (lo + hi)
        if blows_up(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def macroscopic_convergence_experiment(
    n_list: list[int],
    nubar_list: list[float],
    t_final: float,
    *,
    replicas: int = 8,
    gamma: float = 1.0,
    beta: float = 1.0,
    seed: int = 0,
    steps_per_unit_factor: float = 4.0,
) -> np.ndarray:
    """Scaled-L2 distance of penalized chain paths to the unpenalized ones.

    For each size the penalized runs share the unpenalized run's noise
    increments and start from the mass-rescaled initial momenta; the table
    entry is the maximum over the time grid of the mean squared distance in
    the scaled position norm.  Entries decrease with the penalty at fixed
    large size.
    """
    table = np.empty((len(n_list), len(nubar_list)))
    for i, n in enumerate(n_list):
        rng = np.random.default_rng(seed + i)
        dt = 1.0 / (steps_per_unit_factor * n)
        n_steps = int(np.ceil(t_final / dt))
        base = HarmonicChain(n=n, nubar=0.0, beta_n=beta / n, gamma=gamma)
        base.v_ext_prime = lambda q: -np.sin(q)  # exterior potential cos(q)
        q0, p0 = base.sample_canonical(np.random.default_rng(seed + 1000 + i), (replicas,))
        noises = rng.standard_normal((n_steps, replicas, n))
        qb = q0.copy()
        pb = p0.copy()
        base_traj = np.empty((n_steps, replicas, n))
        for k in range(n_steps):
            qb, pb = base.step(qb, pb, dt, noise=noises[k])
            base_traj[k] = qb
        for j, nubar in enumerate(nubar_list):
            chain = HarmonicChain(n=n, nubar=nubar, beta_n=beta / n, gamma=gamma)
            chain.v_ext_prime = lambda q: -np.sin(q)
            q = q0.copy()
            p = chain.mass_power_apply(p0, -0.5)
            err = 0.0
            for k in range(n_steps):
                q, p = chain.step(q, p, dt, noise=noises[k])
                d2 = np.mean(np.sum((q - base_traj[k]) ** 2, axis=-1) / n)
                err = max(err, d2)
            table[i, j] = err
    return table
