import numpy as np
import numpy.testing as npt
import pytest

import immp.geometry as geo
from immp.geometry import (
    ConstraintMap,
    MassSpec,
    PenaltySpec,
    SingularGeometryError,
    cotangent_projector,
    fd_jacobian,
    fixman_gradient,
    fixman_penalized,
    gram_matrix,
    linear_map,
    penalized_mass,
    radial_map,
    wrap_angle,
)
from immp.models.alkane import AlkaneModel


def random_spd(n, rng, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


@pytest.fixture
def butane():
    return AlkaneModel(4)


@pytest.fixture
def butane_q(butane):
    rng = np.random.default_rng(42)
    return butane.zigzag_positions() + 0.05 * rng.standard_normal(butane.dim)


def test_wrap_angle_representative():
    npt.assert_allclose(wrap_angle(np.pi + 0.1), -np.pi + 0.1, atol=1e-14)
    assert wrap_angle(np.array(-np.pi)) == np.pi
    npt.assert_allclose(wrap_angle(0.3), 0.3)


class TestGram:
    def test_single_particle_radial(self):
        # unit gradient, unit mass
        cm = radial_map(3, 0.0)
        g = gram_matrix(cm, geo.identity_mass(3), np.array([1.0, 0.0, 0.0]))
        npt.assert_allclose(g, [[1.0]], atol=1e-14)

    def test_two_particle_distance(self):
        # grad = (-u, u) with u a unit vector, so G = u.u + u.u = 2
        def value(q):
            d = q[..., 3:] - q[..., :3]
            return np.sqrt(np.sum(d * d, axis=-1, keepdims=True))

        def jacobian(q):
            d = q[..., 3:] - q[..., :3]
            u = d / np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
            return np.concatenate([-u, u], axis=-1)[..., None, :]

        cm = ConstraintMap(6, 1, value, jacobian)
        q = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 2.0])
        g = gram_matrix(cm, geo.identity_mass(6), q)
        npt.assert_allclose(g, [[2.0]], atol=1e-12)

    def test_butane_bond_set_vs_fd(self, butane, butane_q):
        cm = butane.bond_map()
        ms = geo.identity_mass(butane.dim)
        jac_fd = fd_jacobian(cm, butane_q)
        g_fd = jac_fd @ jac_fd.T
        npt.assert_allclose(gram_matrix(cm, ms, butane_q), g_fd, atol=1e-8)

    def test_rank_deficient_raises(self):
        cm = linear_map(np.array([[1.0, 0.0], [2.0, 0.0]]))
        with pytest.raises(SingularGeometryError):
            gram_matrix(cm, geo.identity_mass(2), np.array([0.3, 0.4]))


class TestPenalizedMass:
    def test_zero_penalty_is_mass(self, butane, butane_q):
        rng = np.random.default_rng(0)
        ms = MassSpec(np.diag(rng.uniform(0.5, 2.0, butane.dim)))
        cm = butane.bond_map()
        ps = PenaltySpec(0.0, np.eye(butane.n_bonds))
        npt.assert_allclose(penalized_mass(cm, ms, ps, butane_q), ms.matrix)

    def test_scalar_case(self):
        cm = linear_map(np.array([[1.0]]))
        ps = PenaltySpec(2.0, np.eye(1))
        m = penalized_mass(cm, geo.identity_mass(1), ps, np.array([0.7]))
        npt.assert_allclose(m, [[5.0]], atol=1e-14)

    def test_determinant_identity(self, butane, butane_q):
        # det(M_nu) = det(M) det(nu^2 Mz) det(G + Mz^{-1}/nu^2)
        rng = np.random.default_rng(3)
        maps = [butane.bond_map(), butane.angle_map()]
        cm = geo.concat_maps(maps)
        ms = MassSpec(np.diag(rng.uniform(0.5, 2.0, butane.dim)))
        mz = random_spd(cm.dim_xi, rng, 0.5)
        nu = 1.7
        ps = PenaltySpec(nu, mz)
        lhs = np.linalg.det(penalized_mass(cm, ms, ps, butane_q))
        g = gram_matrix(cm, ms, butane_q)
        rhs = (
            np.linalg.det(ms.matrix)
            * np.linalg.det(nu**2 * mz)
            * np.linalg.det(g + np.linalg.inv(mz) / nu**2)
        )
        assert abs(lhs - rhs) / abs(rhs) < 1e-8

    def test_det_id_plus_outer(self):
        rng = np.random.default_rng(8)
        for n1, n2 in ((3, 7), (5, 2), (4, 4)):
            j = rng.standard_normal((n1, n2))
            lhs = np.linalg.det(np.eye(n1) + j @ j.T)
            rhs = np.linalg.det(np.eye(n2) + j.T @ j)
            npt.assert_allclose(lhs, rhs, rtol=1e-10)


class TestFixman:
    def test_linear_map_constant(self):
        cm = linear_map(np.array([[1.0, 2.0], [0.5, -1.0]]))
        ms = geo.identity_mass(2)
        ps = PenaltySpec(1.5, np.eye(2))
        rng = np.random.default_rng(1)
        vals = [fixman_penalized(cm, ms, ps, rng.standard_normal(2), 2.0) for _ in range(5)]
        npt.assert_allclose(vals, vals[0], atol=1e-14)
        g = fixman_gradient(cm, ms, ps, rng.standard_normal(2), 2.0)
        npt.assert_allclose(g, 0.0, atol=1e-9)

    def test_scalar_determinant(self):
        cm = radial_map(2, 0.0)
        ms = geo.identity_mass(2)
        beta, nu = 1.3, 0.8
        ps = PenaltySpec(nu, np.eye(1))
        q = np.array([0.6, 0.8])
        expect = np.log(1.0 + nu**-2) / (2 * beta)
        npt.assert_allclose(fixman_penalized(cm, ms, ps, q, beta), expect, rtol=1e-12)

    def test_rigid_limit_rate(self, butane, butane_q):
        # V_fix,nu -> rigid corrector at rate nu^{-2}
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map()])
        ms = geo.identity_mass(butane.dim)
        beta = 1.0
        g = gram_matrix(cm, ms, butane_q)
        v_rigid = np.linalg.slogdet(g)[1] / (2 * beta)
        nus = np.array([4.0, 8.0, 16.0, 32.0])
        errs = [
            abs(fixman_penalized(cm, ms, PenaltySpec(nu, np.eye(cm.dim_xi)), butane_q, beta) - v_rigid)
            for nu in nus
        ]
        slope = np.polyfit(np.log(nus), np.log(errs), 1)[0]
        assert abs(slope + 2.0) < 0.1

    def test_gradient_vs_fd(self, butane, butane_q):
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map()])
        ms = geo.identity_mass(butane.dim)
        beta = 1.0
        for nu in (0.1, 1.0, 10.0, 100.0):
            ps = PenaltySpec(nu, np.eye(cm.dim_xi))
            grad = fixman_gradient(cm, ms, ps, butane_q, beta)
            h = 1e-5
            fd = np.empty_like(grad)
            for i in range(butane.dim):
                e = np.zeros(butane.dim)
                e[i] = h
                fd[i] = (
                    fixman_penalized(cm, ms, ps, butane_q + e, beta)
                    - fixman_penalized(cm, ms, ps, butane_q - e, beta)
                ) / (2 * h)
            scale = max(np.abs(fd).max(), 1e-12)
            assert np.abs(grad - fd).max() / scale < 1e-4

    def test_gradient_rigid_rate(self, butane, butane_q):
        # gradient converges to the rigid corrector gradient at rate nu^{-2}
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map()])
        ms = geo.identity_mass(butane.dim)
        g_rigid = geo.fixman_gradient_from_bmat(
            cm, ms, np.zeros((cm.dim_xi, cm.dim_xi)), butane_q, 1.0
        )
        nus = np.array([8.0, 16.0, 32.0])
        errs = [
            np.abs(
                fixman_gradient(cm, ms, PenaltySpec(nu, np.eye(cm.dim_xi)), butane_q, 1.0)
                - g_rigid
            ).max()
            for nu in nus
        ]
        slope = np.polyfit(np.log(nus), np.log(errs), 1)[0]
        assert abs(slope + 2.0) < 0.15

    def test_additive_constant_consistency(self, butane):
        # the d-dimensional determinant form differs by a q-independent shift
        rng = np.random.default_rng(5)
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map()])
        ms = MassSpec(np.diag(rng.uniform(0.5, 2.0, butane.dim)))
        mz = random_spd(cm.dim_xi, rng, 0.3)
        ps = PenaltySpec(1.3, mz)
        beta = 0.7

        def v_dense(q):
            return np.linalg.slogdet(penalized_mass(cm, ms, ps, q))[1] / (2 * beta)

        qs = [butane.zigzag_positions() + 0.05 * rng.standard_normal(butane.dim) for _ in range(4)]
        diffs = [v_dense(q) - fixman_penalized(cm, ms, ps, q, beta) for q in qs]
        npt.assert_allclose(diffs, diffs[0], atol=1e-10)
        # gradients of the two forms agree
        q = qs[0]
        h = 1e-5
        grad_dense = np.array(
            [
                (v_dense(q + h * e) - v_dense(q - h * e)) / (2 * h)
                for e in np.eye(butane.dim)
            ]
        )
        grad = fixman_gradient(cm, ms, ps, q, beta)
        assert np.abs(grad - grad_dense).max() < 1e-8 + 1e-4 * np.abs(grad_dense).max()


class TestProjector:
    def test_no_constraints_identity(self):
        p = cotangent_projector(None, geo.identity_mass(3), np.zeros((2, 3)))
        npt.assert_allclose(p, np.broadcast_to(np.eye(3), (2, 3, 3)))

    def test_axis_constraint(self):
        cm = linear_map(np.array([[1.0, 0.0]]))
        p = cotangent_projector(cm, geo.identity_mass(2), np.array([0.2, 0.4]))
        npt.assert_allclose(p, [[0.0, 0.0], [0.0, 1.0]], atol=1e-14)

    def test_butane_idempotent_and_annihilating(self, butane, butane_q):
        rng = np.random.default_rng(9)
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map()])
        ms = MassSpec(np.diag(rng.uniform(0.5, 2.0, butane.dim)))
        p = cotangent_projector(cm, ms, butane_q)
        assert np.abs(p @ p - p).max() < 1e-10
        jac = cm.jacobian(butane_q)
        for _ in range(100):
            mom = rng.standard_normal(butane.dim)
            res = jac @ ms.inv_apply(p @ mom)
            assert np.abs(res).max() < 1e-10


class TestInvariances:
    def test_rigid_translation(self, butane, butane_q):
        cm = geo.concat_maps([butane.bond_map(), butane.angle_map(), butane.torsion_map()])
        ms = geo.identity_mass(butane.dim)
        ps = PenaltySpec(1.2, np.eye(cm.dim_xi))
        shift = np.tile(np.array([0.3, -1.2, 0.8]), butane.n_atoms)
        npt.assert_allclose(
            gram_matrix(cm, ms, butane_q),
            gram_matrix(cm, ms, butane_q + shift),
            atol=1e-10,
        )
        npt.assert_allclose(
            penalized_mass(cm, ms, ps, butane_q),
            penalized_mass(cm, ms, ps, butane_q + shift),
            atol=1e-10,
        )

    def test_jacobians_match_fd(self, butane, butane_q):
        for cm in (butane.bond_map(), butane.angle_map(), butane.torsion_map()):
            jac = cm.jacobian(butane_q)
            fd = fd_jacobian(cm, butane_q)
            scale = max(np.abs(fd).max(), 1.0)
            assert np.abs(jac - fd).max() / scale < 1e-6


class TestSpecValidation:
    def test_mass_spec_rejects_non_spd(self):
        with pytest.raises(ValueError):
            MassSpec(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_penalty_rejects_negative_nu(self):
        with pytest.raises(ValueError):
            PenaltySpec(-1.0, np.eye(2))

    def test_penalty_cholesky_check(self):
        with pytest.raises(ValueError):
            PenaltySpec(1.0, np.array([[0.0, 0.0], [0.0, 1.0]]))

    def test_fixman_requires_positive_nu(self):
        cm = radial_map(2, 0.0)
        with pytest.raises(ValueError):
            fixman_penalized(cm, geo.identity_mass(2), PenaltySpec(0.0, np.eye(1)), np.array([1.0, 0.0]), 1.0)
