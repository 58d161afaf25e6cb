import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsim.stochastic import (InvalidParameterError, RngStream, corr_cholesky_from_cpcs,
                               sample_dirichlet, sample_lkj_cholesky, sample_mvnormal,
                               sample_poisson_min1)


class TestRngStream:
    def test_same_key_same_draws(self):
        a, b = RngStream(7, 3), RngStream(7, 3)
        assert np.array_equal(a.normal(10), b.normal(10))

    def test_streams_differ(self):
        assert not np.array_equal(RngStream(7, 3).normal(5), RngStream(7, 4).normal(5))
        assert not np.array_equal(RngStream(7, 3).normal(5), RngStream(8, 3).normal(5))

    def test_domain_separates_id_space(self):
        assert not np.array_equal(RngStream(7, 3, domain=1).normal(5), RngStream(7, 3).normal(5))
        assert np.array_equal(RngStream(7, 3, domain=0).normal(5), RngStream(7, 3).normal(5))

    @pytest.mark.parametrize("kw", [dict(seed=-1), dict(seed=1 << 64), dict(seed=0, stream_id=-2),
                                    dict(seed=0, domain=-1)])
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ValueError):
            RngStream(**kw)

    def test_integers_closed_range(self):
        v = RngStream(1).integers(30, 32, size=2000)
        assert set(np.unique(v)) == {30, 31, 32}


class TestDirichlet:
    @given(st.lists(st.floats(0.05, 20.0), min_size=2, max_size=6), st.integers(0, 2**32))
    @settings(max_examples=50, deadline=None)
    def test_on_open_simplex(self, alpha, seed):
        p = sample_dirichlet(alpha, RngStream(seed))
        assert p.shape == (len(alpha),)
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_mean(self):
        rng = RngStream(3)
        draws = np.array([sample_dirichlet([1.0, 2.0, 3.0], rng) for _ in range(4000)])
        assert np.allclose(draws.mean(0), [1 / 6, 2 / 6, 3 / 6], atol=0.015)

    @pytest.mark.parametrize("alpha", [[1.0], [1.0, 0.0], [1.0, -1.0], [1.0, np.inf]])
    def test_invalid(self, alpha):
        with pytest.raises(InvalidParameterError):
            sample_dirichlet(alpha, RngStream(0))


class TestLkj:
    @given(st.lists(st.floats(-0.999, 0.999), min_size=6, max_size=6))
    def test_cpc_rows_have_unit_norm(self, cpcs):
        L = corr_cholesky_from_cpcs(np.array(cpcs), 4)
        assert np.allclose((L * L).sum(1), 1.0)
        assert np.all(np.diag(L) >= 0)
        assert np.allclose(np.triu(L, 1), 0.0)

    def test_marginal_variance(self):
        # under LKJ(eta) in dimension d each correlation is 2*Beta(a, a) - 1 with a = eta - 1 + d/2
        rng = RngStream(11)
        rs = []
        for _ in range(3000):
            R = sample_lkj_cholesky(4, 1.0, rng).corr()
            rs.extend(R[np.tril_indices(4, -1)])
        rs = np.array(rs)
        assert abs(rs.mean()) < 0.02
        assert abs(rs.var() - 1 / 5) < 0.01

    def test_dim_one(self):
        assert sample_lkj_cholesky(1, 2.0, RngStream(0)).corr().tolist() == [[1.0]]

    @pytest.mark.parametrize("dim, eta", [(0, 1.0), (2.5, 1.0), (3, 0.0)])
    def test_invalid(self, dim, eta):
        with pytest.raises(InvalidParameterError):
            sample_lkj_cholesky(dim, eta, RngStream(0))


class TestOther:
    def test_mvnormal_covariance(self):
        rng = RngStream(5)
        C = np.array([[1.0, 0.0], [0.6, 0.8]])
        x = np.array([sample_mvnormal(np.zeros(2), C, rng) for _ in range(5000)])
        assert np.allclose(np.cov(x.T), C @ C.T, atol=0.06)

    def test_mvnormal_shape_mismatch(self):
        with pytest.raises(ValueError):
            sample_mvnormal(np.zeros(3), np.eye(2), RngStream(0))

    def test_poisson_min1(self):
        rng = RngStream(9)
        k = np.array([sample_poisson_min1(25.0, rng) for _ in range(4000)])
        assert k.min() >= 1
        assert abs(k.mean() - 25.0) < 0.3
        small = [sample_poisson_min1(0.01, rng) for _ in range(200)]
        assert set(small) == {1}

    def test_poisson_invalid(self):
        with pytest.raises(InvalidParameterError):
            sample_poisson_min1(0.0, RngStream(0))
