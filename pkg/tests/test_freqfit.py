import json

import numpy as np
import pytest

from mixsim.design import ModelMatrices, gen_simple_design, model_matrices, SimpleDesignConfig
from mixsim.freqfit import (BOUNDARY_TOL, CollinearityError, LmmProblem, NelderMeadControl, SeparationError, ThetaParam,
                            fit_glm_logistic, fit_glmm_logistic, fit_lmm, profiled_reml_deviance,
                            theta_size)
from mixsim.stochastic import RngStream
from conftest import make_simple
from oracles import anova_reml, glm_oracle, one_way_matrices, two_cell_logistic

TIGHT = NelderMeadControl(ftol_abs=1e-15, xtol_rel=1e-12)


class TestTheta:
    def test_sizes(self):
        assert [theta_size(k) for k in (1, 2, 4)] == [1, 3, 10]

    def test_column_major_round_trip(self):
        tp = ThetaParam((2, 1))
        theta = np.array([1.0, 2.0, 3.0, 4.0])
        lams = tp.lambdas(theta)
        assert lams[0].tolist() == [[1.0, 0.0], [2.0, 3.0]]
        assert lams[1].tolist() == [[4.0]]
        assert np.array_equal(tp.from_lambdas(lams), theta)
        assert tp.diag_mask().tolist() == [True, False, True, True]
        assert tp.initial().tolist() == [1.0, 0.0, 1.0, 1.0]


class TestLmm:
    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_balanced_one_way_matches_anova(self, seed):
        G, m = 12, 6
        rng = np.random.default_rng(seed)
        y = 3.0 + np.repeat(rng.normal(0, 1.5, G), m) + rng.normal(0, 1.0, G * m)
        mm = one_way_matrices(G, m)
        ys = (y - y.mean()) / y.std(ddof=1)
        mu, sa, se = anova_reml(ys, G, m)
        assert sa > 0
        fit = fit_lmm(mm, y)
        assert fit.beta_hat[0] == pytest.approx(mu, abs=1e-10)
        assert fit.sigma_hat["subject"][0] == pytest.approx(sa, rel=1e-4)
        assert fit.sigma_eps_hat == pytest.approx(se, rel=1e-4)

    def test_negative_anova_component_hits_boundary(self):
        G, m = 10, 5
        rng = np.random.default_rng(4)
        y = rng.normal(size=G * m)
        Y = y.reshape(G, m)
        y = (Y - Y.mean(1, keepdims=True) + Y.mean()).ravel() + rng.normal(0, 1e-3, G * m)
        fit = fit_lmm(one_way_matrices(G, m), y)
        assert fit.boundary and fit.theta[0] < BOUNDARY_TOL

    def test_dense_and_block_agree(self, complex_gaussian):
        _, mm, _, y = complex_gaussian
        ys = (y - y.mean()) / y.std(ddof=1)
        theta = ThetaParam((4,)).initial() * 0.7 + 0.05
        a = LmmProblem(mm, ys, dense=True).deviance(theta)
        b = LmmProblem(mm, ys, dense=False).deviance(theta)
        assert a == pytest.approx(b, rel=1e-10)

    def test_optimum_is_local_minimum(self, complex_gaussian):
        _, mm, _, y = complex_gaussian
        fit = fit_lmm(mm, y)
        ys = (y - y.mean()) / y.std(ddof=1)
        f0 = profiled_reml_deviance(fit.theta, mm, ys)
        assert f0 == pytest.approx(fit.objective)
        rng = np.random.default_rng(0)
        for _ in range(10):
            t = np.abs(fit.theta + rng.normal(0, 1e-3, fit.theta.size))
            assert profiled_reml_deviance(t, mm, ys) >= f0 - 1e-8

    def test_outcome_serializable(self):
        _, mm, _, y = make_simple("gaussian")
        fit = fit_lmm(mm, y)
        d = json.loads(json.dumps(fit.to_dict()))
        assert set(d["sigma_hat"]) == {"subject", "item"}
        assert fit.sigma_hat["subject"].shape == (2,)
        for f in ("subject", "item"):
            C = np.array(d["chol_hat"][f])
            assert np.allclose(np.sqrt(np.diag(C @ C.T)), d["sigma_hat"][f])

    def test_constant_response(self, complex_gaussian):
        _, mm, _, _ = complex_gaussian
        with pytest.raises(ValueError):
            fit_lmm(mm, np.ones(mm.n))


class TestCollinearity:
    @pytest.mark.parametrize("family", ["gaussian", "logistic"])
    def test_missing_level_raises(self, family):
        _, mm, _, y = make_simple(family)
        X = mm.X.copy()
        X[:, 1] = 2.0 * X[:, 0]
        bad = ModelMatrices(X, mm.re)
        fit = fit_lmm if family == "gaussian" else fit_glmm_logistic
        with pytest.raises(CollinearityError):
            fit(bad, y)

    def test_glm(self):
        with pytest.raises(CollinearityError):
            fit_glm_logistic(np.ones((4, 2)), np.array([0, 1, 0, 1.0]))


class TestGlm:
    def test_two_cell_slope_is_log3(self):
        X, y = two_cell_logistic()
        coef, se = fit_glm_logistic(X, y)
        assert coef[1] == pytest.approx(np.log(3.0), abs=1e-8)
        assert coef[0] == pytest.approx(0.0, abs=1e-8)
        # Var(logit) for a cell = 1/(n p (1-p))
        assert se[1] == pytest.approx(np.sqrt(1 / (2 * 0.25) + 1 / (4 * 0.1875)), rel=1e-6)

    def test_matches_newton_oracle(self):
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])
        y = (rng.uniform(size=300) < 1 / (1 + np.exp(-X @ [0.3, 1.0, -0.5]))).astype(float)
        assert np.allclose(fit_glm_logistic(X, y)[0], glm_oracle(X, y), atol=1e-9)

    def test_separation(self):
        X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
        with pytest.raises(SeparationError):
            fit_glm_logistic(X, np.array([0, 0, 0, 1, 1, 1.0]))

    @pytest.mark.parametrize("y", [[0, 0, 0, 0], [0, 1, 2, 1]])
    def test_bad_response(self, y):
        with pytest.raises(ValueError):
            fit_glm_logistic(np.ones((4, 1)), np.array(y, dtype=float))


class TestGlmm:
    def test_theta_zero_matches_glm(self, complex_logistic):
        _, mm, _, y = complex_logistic
        fit = fit_glmm_logistic(mm, y, control=TIGHT, theta_fixed=np.zeros(10), hessian=False)
        assert np.allclose(fit.beta_hat, glm_oracle(mm.X, y), atol=1e-6)

    def test_dense_and_block_agree(self, complex_logistic):
        from mixsim.freqfit import GlmmProblem
        _, mm, _, y = complex_logistic
        x = np.concatenate([ThetaParam((4,)).initial() * 0.5 + 0.1, [0.2, 0.1, -0.1, 0.0]])
        a = GlmmProblem(mm, y, dense=True).deviance(x)
        b = GlmmProblem(mm, y, dense=False).deviance(x)
        assert a == pytest.approx(b, rel=1e-8)

    def test_simple_design_fit(self):
        _, mm, truth, y = make_simple("logistic", sim_id=3)
        fit = fit_glmm_logistic(mm, y)
        assert fit.family == "logistic" and fit.sigma_eps_hat is None
        assert np.all(np.isfinite(fit.beta_hat))
        assert fit.max_grad >= 0 and fit.iterations > 0
        assert abs(fit.beta_hat[0] - truth.beta[0]) < 1.0
