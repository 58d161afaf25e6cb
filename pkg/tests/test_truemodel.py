import numpy as np
import pytest

from mixsim.design import ItemManipulation, model_matrices, gen_complex_design
from mixsim.stochastic import RngStream
from mixsim.truemodel import (EXTREME_LOGODDS, Family, extreme_fraction, generate_response, realize,
                              sample_true_complex, sample_true_simple, standardize_truth)
from conftest import make_complex


class TestSampling:
    def test_complex_ranges(self):
        rng = RngStream(1)
        for _ in range(200):
            t = sample_true_complex("gaussian", rng)
            assert -2 <= t.beta[0] <= 2 and np.all(np.abs(t.beta[1:]) <= 1)
            s = t.sigma["subject"]
            assert 0 <= s[0] <= 1 and np.all(s[1:] <= 0.5)
            assert 0 <= t.sigma_eps <= 1
            assert np.allclose(np.diag(t.omega["subject"] @ t.omega["subject"].T), 1.0)

    def test_logistic_has_no_residual(self):
        assert sample_true_complex("logistic", RngStream(1)).sigma_eps is None

    @pytest.mark.parametrize("h0", [False, True])
    def test_simple_slope(self, h0):
        t = sample_true_simple("logistic", h0, "within_item", RngStream(2))
        assert t.beta[1] == (0.0 if h0 else 0.8)

    def test_between_item_has_intercept_only(self):
        t = sample_true_simple("gaussian", False, ItemManipulation.BETWEEN, RngStream(3))
        assert t.sigma["item"].shape == (1,) and t.sigma["subject"].shape == (2,)

    def test_cov(self):
        t = sample_true_complex("gaussian", RngStream(4))
        C = t.cov_cholesky("subject")
        assert np.allclose(C @ C.T, t.cov("subject"))
        assert np.allclose(np.sqrt(np.diag(t.cov("subject"))), t.sigma["subject"])


class TestRealize:
    def test_eta_identity(self):
        ds, mm, truth, y = make_complex("gaussian")
        assert np.allclose(truth.eta, mm.X @ truth.beta + mm.Z @ truth.gamma)
        assert y.shape == (mm.n,)

    def test_logistic_binary(self):
        _, _, _, y = make_complex("logistic")
        assert set(np.unique(y)) <= {0.0, 1.0}

    def test_unrealized(self):
        mm = model_matrices(gen_complex_design(RngStream(1)))
        with pytest.raises(ValueError):
            generate_response(mm, sample_true_complex("gaussian", RngStream(1)), RngStream(1))

    def test_dimension_mismatch(self):
        rng = RngStream(1)
        mm = model_matrices(gen_complex_design(rng))
        t = sample_true_simple("gaussian", False, "within_item", rng)
        with pytest.raises(ValueError):
            realize(t, mm, rng)


class TestSummaries:
    def test_extreme_fraction(self):
        assert extreme_fraction([0.0, EXTREME_LOGODDS, -5.01, 6.0]) == 0.5
        with pytest.raises(ValueError):
            extreme_fraction([])

    def test_standardize_truth(self):
        _, mm, truth, y = make_complex("gaussian")
        st = standardize_truth(truth, y)
        mu, sd = y.mean(), y.std(ddof=1)
        assert np.allclose(st.eta, (truth.eta - mu) / sd)
        assert np.allclose(mm.X @ st.beta + mm.Z @ st.gamma, st.eta)
        assert st.sigma_eps == pytest.approx(truth.sigma_eps / sd)

    def test_standardize_logistic_is_identity(self):
        _, _, truth, y = make_complex("logistic")
        assert standardize_truth(truth, y) is truth
