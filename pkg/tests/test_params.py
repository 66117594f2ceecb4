import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demandcf import params
from demandcf.errors import DecompositionError, DimensionError, RankError

from conftest import rel_err


def random_spd(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim))


def make_blp_theta(rng, dx=1, r=1):
    return params.StructuralParams(
        family="blp-aggregate",
        alpha_mean=rng.normal(),
        alpha_scale=float(rng.uniform(0.2, 1.5)),
        beta_xbar_mean=rng.normal(size=dx),
        beta_e_mean=rng.normal(size=r),
        chol_xbar=params.chol_stack(random_spd(rng, dx)) if dx else np.zeros(0),
        chol_e=params.chol_stack(random_spd(rng, r)),
    )


class TestCholStack:
    def test_identity_2x2(self):
        np.testing.assert_array_equal(params.chol_stack(np.eye(2)), [1.0, 0.0, 1.0])

    def test_diagonal(self):
        np.testing.assert_array_equal(params.chol_stack(np.diag([4.0, 9.0])), [2.0, 0.0, 3.0])

    def test_round_trip_random_spd(self, rng):
        for _ in range(20):
            cov = random_spd(rng, 3)
            stacked = params.chol_stack(cov)
            factor = params.chol_unstack(stacked, 3)
            assert rel_err(factor @ factor.T, cov) < 1e-12

    def test_non_pd_names_leading_minor(self):
        bad = np.array([[1.0, 0.0], [0.0, -2.0]])
        with pytest.raises(DecompositionError, match="order 2"):
            params.chol_stack(bad)

    @given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, dim, seed):
        rng = np.random.default_rng(seed)
        cov = random_spd(rng, dim)
        factor = params.chol_unstack(params.chol_stack(cov), dim)
        assert rel_err(factor @ factor.T, cov) < 1e-12


class TestRankRChol:
    def test_rank_one_positive_column(self):
        e = np.array([1.0, 2.0])
        np.testing.assert_allclose(params.rank_r_chol(np.outer(e, e), 1).ravel(), e, atol=1e-12)

    def test_negative_first_entry_sign_convention(self, rng):
        # gram of sigma_e * e with e1 < 0 gives (sigma_e |e1|, sigma_e e2 sign(e1))
        for _ in range(10):
            e = np.array([-abs(rng.normal()) - 0.1, rng.normal()])
            sigma_e = abs(rng.normal()) + 0.1
            gram = np.outer(sigma_e * e, sigma_e * e)
            got = params.rank_r_chol(gram, 1).ravel()
            expected = np.array([sigma_e * abs(e[0]), sigma_e * e[1] * np.sign(e[0])])
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_reconstruction_j6_r2(self, rng):
        for _ in range(10):
            a = rng.normal(size=(6, 2))
            gram = a @ a.T
            factor = params.rank_r_chol(gram, 2)
            assert np.abs(factor @ factor.T - gram).max() <= 1e-10
            # above-diagonal zeros and positive diagonal
            assert factor[0, 1] == 0.0
            assert factor[0, 0] > 0 and factor[1, 1] > 0

    def test_uniqueness_across_factorizations(self, rng):
        a = rng.normal(size=(5, 2))
        gram = a @ a.T
        first = params.rank_r_chol(gram, 2)
        # same gram through a rotated factor
        q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        second = params.lower_trapezoid(a @ q)
        assert np.abs(first - second).max() <= 1e-10

    def test_rank_deficient_rejected(self, rng):
        a = rng.normal(size=(4, 1))
        with pytest.raises(RankError, match="rank 1"):
            params.rank_r_chol(a @ a.T, 2)

    def test_rank_excess_rejected(self, rng):
        a = rng.normal(size=(4, 3))
        with pytest.raises(RankError, match="rank 3"):
            params.rank_r_chol(a @ a.T, 2)

    def test_non_psd_rejected(self):
        gram = np.array([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises((DecompositionError, RankError)):
            params.rank_r_chol(gram, 1)


class TestGammaOf:
    def test_example_closed_form_j2_scalar_e(self, rng):
        # gamma = (abar, s_alpha, bxbar, e1 be, e2 be, s_xbar, s_e |e1|, s_e e2 sign(e1))
        for _ in range(100):
            abar, be, bx = rng.normal(size=3)
            s_alpha, s_x, s_e = rng.uniform(0.1, 2.0, size=3)
            e = rng.normal(size=(2, 1))
            if abs(e[0, 0]) < 1e-3:
                e[0, 0] = 0.5
            theta = params.StructuralParams(
                family="blp-aggregate",
                alpha_mean=abar,
                alpha_scale=s_alpha,
                beta_xbar_mean=np.array([bx]),
                beta_e_mean=np.array([be]),
                chol_xbar=np.array([s_x]),
                chol_e=np.array([s_e]),
            )
            gamma = params.gamma_of(theta, params.AttributeMatrix(e))
            expected = np.array(
                [
                    abar,
                    s_alpha,
                    bx,
                    e[0, 0] * be,
                    e[1, 0] * be,
                    s_x,
                    s_e * abs(e[0, 0]),
                    s_e * e[1, 0] * np.sign(e[0, 0]),
                ]
            )
            np.testing.assert_allclose(gamma.values, expected, atol=1e-12)

    def test_identity_embedded_basis(self):
        # e = first r columns of I_J with unit coefficient variance: factor equals e
        j_dim, r = 4, 2
        e = np.eye(j_dim)[:, :r]
        theta = params.StructuralParams(
            family="blp-aggregate",
            alpha_mean=0.0,
            alpha_scale=1.0,
            beta_e_mean=np.zeros(r),
            chol_e=params.chol_stack(np.eye(r)),
        )
        gamma = params.gamma_of(theta, params.AttributeMatrix(e))
        factor = params.trapezoid_unstack(gamma.block("attr_factor"), j_dim, r)
        np.testing.assert_allclose(factor, e, atol=1e-12)

    def test_rotation_invariance(self, rng):
        # replacing (e, beta_e, Sigma_e) by (eQ, Q'beta_e, Q'Sigma_e Q) leaves gamma unchanged
        j_dim, r = 5, 2
        for _ in range(10):
            e = rng.normal(size=(j_dim, r))
            theta = make_blp_theta(rng, dx=1, r=r)
            q, _ = np.linalg.qr(rng.normal(size=(r, r)))
            sigma_e = params.chol_unstack(theta.chol_e, r)
            cov_e = sigma_e @ sigma_e.T
            theta_rot = params.StructuralParams(
                family="blp-aggregate",
                alpha_mean=theta.alpha_mean,
                alpha_scale=theta.alpha_scale,
                beta_xbar_mean=theta.beta_xbar_mean,
                beta_e_mean=q.T @ theta.beta_e_mean,
                chol_xbar=theta.chol_xbar,
                chol_e=params.chol_stack(q.T @ cov_e @ q),
            )
            g1 = params.gamma_of(theta, params.AttributeMatrix(e))
            g2 = params.gamma_of(theta_rot, params.AttributeMatrix(e @ q))
            assert rel_err(g1.values, g2.values) < 1e-10

    def test_depends_on_products_only(self, rng):
        # mixed-logit-fe: scaling e and undoing it in Pi_e / Sigma_e keeps gamma fixed
        j_dim, r, dy = 4, 2, 1
        e = rng.normal(size=(j_dim, r))
        sigma_e = random_spd(rng, r)
        theta = params.StructuralParams(
            family="mixed-logit-fe",
            alpha_mean=-1.0,
            alpha_cov_chol=np.array([0.3]),
            fixed_effects=rng.normal(size=j_dim),
            pi_e=rng.normal(size=(r, dy)),
            chol_e=params.chol_stack(sigma_e),
        )
        scale = np.diag([2.0, 0.5])
        theta_scaled = params.StructuralParams(
            family="mixed-logit-fe",
            alpha_mean=theta.alpha_mean,
            alpha_cov_chol=theta.alpha_cov_chol,
            fixed_effects=theta.fixed_effects,
            pi_e=np.linalg.solve(scale, theta.pi_e),
            chol_e=params.chol_stack(np.linalg.solve(scale, np.linalg.solve(scale, sigma_e.T).T)),
        )
        g1 = params.gamma_of(theta, params.AttributeMatrix(e))
        g2 = params.gamma_of(theta_scaled, params.AttributeMatrix(e @ scale))
        assert rel_err(g1.values, g2.values) < 1e-12

    def test_gamma_positivity_invariant(self, rng):
        for _ in range(20):
            theta = make_blp_theta(rng, dx=2, r=2)
            e = rng.normal(size=(6, 2))
            gamma = params.gamma_of(theta, params.AttributeMatrix(e))
            mask = gamma.layout.positive_mask()
            assert np.all(gamma.values[mask] > 0)

    def test_dimension_mismatch(self, rng):
        theta = make_blp_theta(rng, dx=1, r=2)
        with pytest.raises(DimensionError):
            params.gamma_of(theta, params.AttributeMatrix(np.random.default_rng(0).normal(size=(4, 1))))


class TestGammaJacobians:
    def setup_theta(self, rng):
        return make_blp_theta(rng, dx=1, r=1), params.AttributeMatrix(
            np.array([[0.7], [-1.2], [0.4]])
        )

    def test_alpha_row_is_unit_vector(self, rng):
        theta, e = self.setup_theta(rng)
        jac = params.gamma_jacobians(theta, e)
        alpha_row = jac.g_theta[0]
        expected = np.zeros(jac.g_theta.shape[1])
        expected[0] = 1.0
        np.testing.assert_allclose(alpha_row, expected, atol=1e-9)
        # alpha block untouched by attribute perturbations
        np.testing.assert_allclose(jac.g_e[:, 0], 0.0, atol=1e-9)

    def test_e_beta_block_linear_map(self, rng):
        theta, e = self.setup_theta(rng)
        jac = params.gamma_jacobians(theta, e)
        gamma = params.gamma_of(theta, e)
        sl = gamma.layout.slices()["e_beta_e"]
        beta_row = jac.g_theta[3, sl]  # order: alpha, scale, bxbar, beta_e
        np.testing.assert_allclose(beta_row, e.values[:, 0], atol=1e-8)

    def test_richardson_step_halving(self, rng):
        theta, e = self.setup_theta(rng)
        coarse = params.gamma_jacobians(theta, e, step=1e-5)
        fine = params.gamma_jacobians(theta, e, step=5e-6)
        assert rel_err(coarse.g_theta, fine.g_theta) < 1e-6
        assert rel_err(coarse.g_e, fine.g_e) < 1e-6

    def test_step_must_be_positive(self, rng):
        theta, e = self.setup_theta(rng)
        with pytest.raises(ValueError):
            params.gamma_jacobians(theta, e, step=0.0)

    def test_boundary_warning(self, rng):
        theta, e = self.setup_theta(rng)
        tiny = params.StructuralParams(
            family=theta.family,
            alpha_mean=theta.alpha_mean,
            alpha_scale=1e-8,
            beta_xbar_mean=theta.beta_xbar_mean,
            beta_e_mean=theta.beta_e_mean,
            chol_xbar=theta.chol_xbar,
            chol_e=theta.chol_e,
        )
        assert params.gamma_jacobians(tiny, e, step=1e-6).boundary_warning


class TestAttributeMatrix:
    def test_rank_deficient_rejected(self):
        vals = np.ones((4, 2))
        with pytest.raises(RankError):
            params.AttributeMatrix(vals)

    def test_non_finite_rejected(self):
        vals = np.array([[1.0], [np.nan]])
        with pytest.raises(ValueError):
            params.AttributeMatrix(vals)


class TestVectorPacking:
    @pytest.mark.parametrize("family", ["blp-aggregate", "mixed-logit-fe", "micro-blp"])
    def test_round_trip(self, rng, family):
        if family == "blp-aggregate":
            theta = make_blp_theta(rng, dx=2, r=2)
        elif family == "mixed-logit-fe":
            theta = params.StructuralParams(
                family=family,
                alpha_mean=-1.0,
                alpha_cov_chol=np.array([0.3]),
                fixed_effects=rng.normal(size=5),
                pi_xbar=rng.normal(size=(1, 2)),
                pi_e=rng.normal(size=(2, 2)),
                chol_xbar=params.chol_stack(random_spd(rng, 1)),
                chol_e=params.chol_stack(random_spd(rng, 2)),
            )
        else:
            theta = params.StructuralParams(
                family=family,
                alpha_mean=1.0,
                alpha_scale=0.5,
                beta_xbar_mean=rng.normal(size=1),
                beta_e_mean=rng.normal(size=2),
                pi_ybar=rng.normal(size=1),
                pi_xbar=rng.normal(size=(1, 1)),
                pi_p=rng.normal(size=1),
                pi_e=rng.normal(size=(2, 1)),
                chol_xbar=params.chol_stack(random_spd(rng, 1)),
                chol_e=params.chol_stack(random_spd(rng, 2)),
            )
        vec = theta.to_vector()
        back = theta.from_vector(vec)
        np.testing.assert_allclose(back.to_vector(), vec)
