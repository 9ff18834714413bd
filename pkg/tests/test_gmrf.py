import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from hybridst.gmrf import (
    Ar1Effect,
    FixedEffects,
    IidEffect,
    RandomWalkEffect,
    SeparableStEffect,
    SpdeEffect,
    ar1_precision,
    difference_matrix,
    from_corr,
    loggamma_logdensity,
    matern_covariance,
    matern_kappa,
    pc_prior_matern_logdensity,
    rw1_precision,
    rw2_precision,
    spde_matern_precision,
    st_separable_precision,
    to_corr,
)
from hybridst.mesh import build_grid_mesh, fem_matrices
from hybridst.sparse import cholesky, log_det


@pytest.fixture(scope="module")
def small_fem():
    return fem_matrices(build_grid_mesh((0, 2), (0, 2), 6, 6, margin=0.0))


class TestMatern:
    def test_kappa(self):
        assert matern_kappa(3.627) == pytest.approx(math.sqrt(8) / 3.627)

    def test_covariance_at_range_is_about_013(self):
        # sqrt(8) K1(sqrt(8)) = 0.13967 (tabulated Bessel value)
        assert matern_covariance(3.627, 1.0, 3.627) == pytest.approx(0.13967, abs=1e-5)

    def test_covariance_limits(self):
        np.testing.assert_allclose(matern_covariance([0.0, 1e-8], 2.0, 1.0), [2.0, 2.0], rtol=1e-6)
        assert matern_covariance(np.inf, 1.0, 1.0) == 0.0
        h = np.linspace(0, 5, 50)
        assert np.all(np.diff(matern_covariance(h, 1.0, 1.5)) < 0)

    def test_spde_precision_is_spd_and_scales_with_sigma(self, small_fem):
        Q1 = spde_matern_precision(small_fem, 1.0, 1.0)
        Q2 = spde_matern_precision(small_fem, 1.0, 2.0)
        np.testing.assert_allclose(Q2.toarray(), Q1.toarray() / 4.0)
        np.testing.assert_allclose(Q1.toarray(), Q1.toarray().T)
        assert np.linalg.eigvalsh(Q1.toarray()).min() > 0

    def test_spde_rejects_nonpositive(self, small_fem):
        with pytest.raises(ValueError):
            spde_matern_precision(small_fem, 0.0, 1.0)


class TestAr1:
    def test_inverse_is_stationary_covariance(self):
        # Cov(x_i, x_j) = a^|i-j| / (1 - a^2) for unit innovations
        a, T = 0.7, 8
        S = np.linalg.inv(ar1_precision(T, a).toarray())
        i, j = np.indices((T, T))
        np.testing.assert_allclose(S, a ** np.abs(i - j) / (1 - a * a), rtol=1e-12)

    def test_log_det_matches_dense(self):
        eff = Ar1Effect("a", 12)
        theta = np.array([0.3, from_corr(-0.4)])
        dense = np.linalg.slogdet(eff.precision(theta).toarray())[1]
        assert eff.log_det(theta) == pytest.approx(dense, rel=1e-12)

    def test_rejects_unit_root(self):
        with pytest.raises(ValueError):
            ar1_precision(5, 1.0)


class TestRandomWalk:
    def test_difference_matrix(self):
        np.testing.assert_array_equal(difference_matrix(4, 2).toarray(), [[1, -2, 1, 0], [0, 1, -2, 1]])

    def test_null_spaces(self):
        n = 30
        t = np.arange(n, dtype=float)
        Q1 = rw1_precision(n, 3.0, jitter=0.0)
        Q2 = rw2_precision(n, 3.0, jitter=0.0)
        np.testing.assert_allclose(Q1 @ np.ones(n), 0.0, atol=1e-12)
        np.testing.assert_allclose(Q2 @ np.ones(n), 0.0, atol=1e-12)
        np.testing.assert_allclose(Q2 @ t, 0.0, atol=1e-10)
        assert np.abs(Q1 @ t).max() > 0

    def test_jitter_makes_factorizable(self):
        F = cholesky(rw2_precision(50, 1.0))
        assert np.isfinite(log_det(F))

    def test_size_guard(self):
        with pytest.raises(ValueError):
            rw2_precision(3, 1.0)


class TestPriors:
    def test_loggamma_integrates_to_one(self):
        val, _ = integrate.quad(lambda x: math.exp(loggamma_logdensity(x, 2.0, 1.5)), -30, 10)
        assert val == pytest.approx(1.0, abs=1e-8)

    def test_pc_prior_medians(self):
        # P(rho < rho0) = 0.5 and P(sigma > sigma0) = 0.5
        rho0, sigma0 = 1.45, 1.0

        def dens(r, s):
            return math.exp(pc_prior_matern_logdensity(r, s, rho0, sigma0))

        lam_s = math.log(2) / sigma0
        p_rho, _ = integrate.quad(lambda r: dens(r, 1.0) / (lam_s * math.exp(-lam_s)), 0, rho0)
        assert p_rho == pytest.approx(0.5, abs=1e-8)
        lam_r = math.log(2) * rho0
        norm_r = lam_r * rho0 ** -2 * math.exp(-lam_r / rho0)
        p_sig, _ = integrate.quad(lambda s: dens(rho0, s) / norm_r, sigma0, np.inf)
        assert p_sig == pytest.approx(0.5, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-0.999, 0.999))
    def test_corr_roundtrip(self, a):
        assert to_corr(from_corr(a)) == pytest.approx(a, abs=1e-12)


class TestEffects:
    def test_separable_ordering_is_time_major(self, small_fem):
        Qs = spde_matern_precision(small_fem, 1.0, 1.0)
        Q = st_separable_precision(Qs, 0.5, 3).toarray()
        G = Qs.dim
        np.testing.assert_allclose(Q[G:2 * G, G:2 * G], 1.25 * Qs.toarray())
        np.testing.assert_allclose(Q[:G, G:2 * G], -0.5 * Qs.toarray())

    def test_separable_log_det_matches_dense(self, small_fem):
        eff = SeparableStEffect("w", small_fem, 3, rho0=1.0)
        theta = np.array([0.1, -0.2, from_corr(0.6)])
        dense = np.linalg.slogdet(eff.precision(theta).toarray())[1]
        assert eff.log_det(theta) == pytest.approx(dense, rel=1e-10)
        assert eff.size == 3 * small_fem.C.dim
        assert len(eff.initial()) == eff.n_hyper == 3

    def test_spde_log_prior_finite(self, small_fem):
        eff = SpdeEffect("s", small_fem, rho0=1.0)
        assert np.isfinite(eff.log_prior(eff.initial()))
        assert set(eff.describe(eff.initial())) == {"rho_s", "sigma_s"}

    def test_fixed_and_iid(self):
        fx = FixedEffects("beta", 3)
        assert fx.n_hyper == 0
        np.testing.assert_allclose(fx.precision(np.array([])).toarray(), 0.001 * np.eye(3))
        iid_fixed = IidEffect("c", 4, tau=2.0)
        assert iid_fixed.n_hyper == 0
        assert iid_fixed.log_det(np.array([])) == pytest.approx(4 * math.log(2.0))
        iid_free = IidEffect("c", 4)
        assert iid_free.n_hyper == 1
        np.testing.assert_allclose(iid_free.precision(np.array([math.log(3.0)])).toarray(), 3 * np.eye(4))

    def test_random_walk_effect(self):
        eff = RandomWalkEffect("u", 20, order=1)
        theta = np.array([math.log(5.0)])
        dense = np.linalg.slogdet(eff.precision(theta).toarray())[1]
        assert eff.log_det(theta) == pytest.approx(dense, rel=1e-9)


@pytest.mark.parametrize("make, theta", [
    (lambda fem: FixedEffects("b", 4), []),
    (lambda fem: IidEffect("i", 5), [0.7]),
    (lambda fem: RandomWalkEffect("r1", 9, order=1), [1.2]),
    (lambda fem: RandomWalkEffect("r2", 9, order=2), [-0.4]),
    (lambda fem: Ar1Effect("a", 7), [0.3, from_corr(0.8)]),
    (lambda fem: SpdeEffect("s", fem, rho0=1.0), [0.2, -0.3]),
    (lambda fem: SeparableStEffect("w", fem, 3, rho0=1.0), [0.2, -0.3, from_corr(-0.5)]),
    (lambda fem: SeparableStEffect("w1", fem, 1, rho0=1.0), [0.2, -0.3, 0.0]),
])
def test_basis_expansion_reproduces_precision(small_fem, make, theta):
    eff = make(small_fem)
    theta = np.asarray(theta, dtype=float)
    expanded = sum(c * B for c, B in zip(eff.coefs(theta), eff.basis()))
    np.testing.assert_allclose(expanded.toarray(), eff.precision(theta).toarray(), rtol=1e-12, atol=1e-12)
    dense = np.linalg.slogdet(eff.precision(theta).toarray())[1]
    assert eff.log_det(theta) == pytest.approx(dense, rel=1e-9)
