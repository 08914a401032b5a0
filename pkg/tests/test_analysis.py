import numpy as np
import numpy.testing as npt
import pytest

from immp.analysis import (
    BracketError,
    FitError,
    InsufficientDataError,
    autocorr_and_decorrelation,
    calibrate_level,
    chain_blowup_dt,
    chain_cfl_dt,
    chain_dh_mean_dense,
    chain_dh_stats,
    chain_eigenvalues,
    critical_dt,
    macroscopic_convergence_experiment,
    pathwise_error_order,
    spectral_density,
)
from immp.models.chain import HarmonicChain


class TestSpectralDensity:
    def test_sinusoid_jump(self):
        dt = 0.01
        t = np.arange(8192) * dt
        omega0 = 4.0
        spec = spectral_density(np.sin(omega0 * t), dt)
        below = spec.omega < 0.8 * omega0
        above = spec.omega > 1.2 * omega0
        assert spec.cumulative[below].max() < 0.02
        assert spec.cumulative[above.argmax()] > 0.98

    def test_constant_series_degenerate(self):
        spec = spectral_density(np.full(128, 3.7), 0.1)
        assert spec.degenerate
        npt.assert_allclose(spec.density, 0.0)
        npt.assert_allclose(spec.cumulative, 0.0)

    def test_parseval_normalization(self):
        rng = np.random.default_rng(0)
        spec = spectral_density(rng.standard_normal(4096), 0.05)
        total = np.trapezoid(spec.density, spec.omega)
        assert abs(total - 1.0) < 1e-9
        assert abs(spec.cumulative[-1] - 1.0) < 1e-9
        assert (np.diff(spec.cumulative) >= -1e-15).all()


class TestAutocorr:
    def test_iid_series(self):
        rng = np.random.default_rng(1)
        _, n_corr = autocorr_and_decorrelation(rng.standard_normal(200_000))
        assert abs(n_corr - 2.0) < 0.1

    def test_ar1_closed_form(self):
        a = 0.9
        rng = np.random.default_rng(2)
        n = 1_000_000
        x = np.empty(n)
        x[0] = 0.0
        eps = rng.standard_normal(n)
        for i in range(1, n):
            x[i] = a * x[i - 1] + eps[i]
        _, n_corr = autocorr_and_decorrelation(x)
        expect = 2.0 / (1.0 - a**2)
        assert abs(n_corr - expect) / expect < 0.05

    def test_short_series_raises(self):
        with pytest.raises(InsufficientDataError):
            autocorr_and_decorrelation(np.arange(5.0))


class TestPathwiseOrder:
    def test_slope_recovery(self):
        params = [0.1, 0.2, 0.4, 0.8]
        ref = np.zeros(50)
        fam = [np.full(50, p**2) for p in params]
        slope, errs = pathwise_error_order(fam, ref, params)
        assert slope == pytest.approx(2.0, abs=1e-10)
        npt.assert_allclose(errs, [p**2 for p in params])

    def test_identical_trajectories_fit_error(self):
        ref = np.ones(10)
        with pytest.raises(FitError):
            pathwise_error_order([ref.copy(), ref.copy(), ref.copy()], ref, [1.0, 2.0, 4.0])

    def test_too_few_parameters(self):
        with pytest.raises(FitError):
            pathwise_error_order([np.ones(4), np.ones(4)], np.zeros(4), [1.0, 2.0])


class TestCriticalDt:
    @staticmethod
    def _quadratic_trials(dt):
        # deterministic monotone surrogate: dH ~ dt^3 with spread
        rng = np.random.default_rng(12)
        return dt**3 * (1.0 + 0.3 * rng.standard_normal(4000))

    def test_bisection_hits_level(self):
        level = calibrate_level(self._quadratic_trials, "dyn", 0.02)
        res = critical_dt(self._quadratic_trials, "dyn", level, (0.001, 0.4),
                          stderr_rng=np.random.default_rng(0))
        assert res.dt_c == pytest.approx(0.02, rel=0.02)
        assert res.stderr > 0

    def test_bracket_error(self):
        with pytest.raises(BracketError):
            critical_dt(self._quadratic_trials, "dyn", 1e9, (0.001, 0.01))

    def test_sampl_mode_level(self):
        level = calibrate_level(self._quadratic_trials, "sampl", 0.05)
        res = critical_dt(self._quadratic_trials, "sampl", level, (0.001, 0.4))
        assert res.dt_c == pytest.approx(0.05, rel=0.02)

    def test_chain_blowup_cross_check(self):
        # bisection on the empirical stability indicator matches the closed form
        n, nubar = 16, 0.25
        ref = chain_cfl_dt(n, nubar)
        emp = chain_blowup_dt(
            lambda: HarmonicChain(n=n, nubar=nubar, beta_n=1.0 / n),
            (0.3 * ref, 1.4 * ref),
            n_steps=10_000,
        )
        assert abs(emp - ref) / ref < 0.02


class TestChainTheory:
    def test_eigenvalue_examples(self):
        npt.assert_allclose(chain_eigenvalues(2), [0.0, 8.0])
        assert chain_eigenvalues(4)[3] == pytest.approx(54.62741699796952)

    def test_dense_quadratic_form_oracle(self):
        for n in (4, 6, 8):
            stats = chain_dh_stats(n, 0.4, 0.17, 100, np.random.default_rng(0))
            dense = chain_dh_mean_dense(n, 0.4, 0.17)
            assert stats.m_exact == pytest.approx(dense, rel=1e-10)

    def test_reindexing_invariance(self):
        # the exact sums depend on the h_k multiset only
        from immp.analysis import chain_mode_matrices

        _, h = chain_mode_matrices(12, 0.3, 0.08)
        m = np.sum(h**6) / 2**5
        rng = np.random.default_rng(1)
        npt.assert_allclose(np.sum(rng.permutation(h) ** 6) / 2**5, m, rtol=1e-12)

    def test_mc_matches_exact(self):
        stats = chain_dh_stats(64, 0.5, 0.1, 100_000, np.random.default_rng(3))
        assert abs(stats.m_mc - stats.m_exact) < 3 * stats.m_mc_stderr
        assert abs(stats.var_mc - stats.var_exact) < 3 * stats.var_mc_stderr

    def test_asymptotic_ratios(self):
        s = chain_dh_stats(512, 0.5, 0.3 * 512 ** (-1 / 6), 100, np.random.default_rng(4))
        assert abs(s.m_ratio_asymptotic - 1.0) < 0.1
        assert abs(s.var_ratio_asymptotic - 1.0) < 0.1
        s0 = chain_dh_stats(512, 0.0, 0.1 * 512 ** (-7 / 6), 100, np.random.default_rng(5))
        assert abs(s0.m_ratio_asymptotic - 1.0) < 0.1
        assert abs(s0.var_ratio_asymptotic - 1.0) < 0.1

    def test_normality_at_large_size(self):
        s = chain_dh_stats(512, 0.5, 0.2, 10_000, np.random.default_rng(6))
        assert s.normality_p > 1e-3


class TestMacroscopicConvergence:
    def test_zero_penalty_zero_error(self):
        table = macroscopic_convergence_experiment([32], [0.0], 0.5, replicas=4, seed=3)
        assert table[0, 0] == pytest.approx(0.0, abs=1e-24)

    def test_monotone_in_penalty(self):
        table = macroscopic_convergence_experiment(
            [64], [0.2, 0.1, 0.05], 1.0, replicas=6, seed=4
        )
        assert table[0, 0] > table[0, 1] > table[0, 2]

    def test_initial_momentum_transform_vs_dense(self):
        from scipy.linalg import sqrtm

        chain = HarmonicChain(n=16, nubar=0.25)
        rng = np.random.default_rng(5)
        p0 = rng.standard_normal(16)
        dense = np.linalg.solve(sqrtm(chain.pen_mass).real, p0)
        npt.assert_allclose(chain.mass_power_apply(p0, -0.5), dense, atol=1e-10)


class TestButaneSpectrumShift:
    def test_penalty_moves_fast_frequency_down(self):
        # conservative length trajectories show a slow torsion line and a
        # fast bending line; the penalty lowers the fast one
        from immp.integrators import IntegratorConfig, rattle_immp_step, project_state, PhaseState
        from immp.models.alkane import butane_system

        def length_traj(nu, n_steps=6000, dt=0.004):
            system = butane_system(nu)
            rng = np.random.default_rng(19)
            q0 = system.model.zigzag_positions()
            st = project_state(system, system.extend_state(q0, np.zeros(system.dim)))
            p, pz = system.sample_momenta(st.q, rng)
            p *= np.sqrt(6.0 / (0.5 * np.sum(p * p)))
            st = project_state(system, PhaseState(st.q, p, st.z, pz))
            cfg = IntegratorConfig(dt=dt)
            out_series = np.empty(n_steps)
            cache = None
            state = st
            for i in range(n_steps):
                out = rattle_immp_step(system, cfg, state, cache)
                state, cache = out.state, out.cache
                out_series[i] = system.model.end_to_end(state.q)
            return out_series, dt

        def fast_line(nu):
            series, dt = length_traj(nu)
            spec = spectral_density(series, dt)
            dens = spec.density.copy()
            dens[spec.omega < 13.0] = 0.0  # ignore the slow torsion band
            return spec.omega[np.argmax(dens)]

        series0, dt = length_traj(1e-6)
        spec0 = spectral_density(series0, dt)
        slow_mass = spec0.cumulative[np.searchsorted(spec0.omega, 13.0)]
        assert 0.05 < slow_mass < 0.95  # both bands carry visible weight

        w_free = fast_line(1e-6)
        w_pen = fast_line(1.0)
        assert w_free > 25.0
        assert w_pen < 0.75 * w_free
