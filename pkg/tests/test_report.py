import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixsim import report
from mixsim.freqfit import SeparationError


def record(family="gaussian", design="complex", converged=True, rank="full", balance=0.5, min_variance=0.1,
           total_correlation=0.3, bayes=None, max_grad=None, sq=None):
    freq = {"regression": "frequentist",
            "convergence": {"converged": converged, "reasons": [] if converged else ["gradient_tolerance"]},
            "rank": {"status": rank, "components_needed": 4 if rank == "full" else 2},
            "squared_errors": sq or {"b0": 0.01, "b1": 0.03, "s0": 0.04, "r01": 0.2}}
    if max_grad is not None:
        freq["fit"] = {"max_grad": max_grad, "psd_ok": True, "hessian_min_eig": 1.0, "unidentifiable": False,
                       "optimizer_status": "ftol", "pirls_ok": True, "separation": False}
    return {"design": design, "family": family, "balance": balance, "min_variance": min_variance,
            "total_correlation": total_correlation,
            "fits": {"freq": freq, "bayes": bayes}}


def reference_rank_records():
    recs = []
    for fam, full, deficient in (("gaussian", 395, 469), ("logistic", 4, 173)):
        recs += [record(fam, rank="full") for _ in range(full)]
        recs += [record(fam, rank="deficient") for _ in range(deficient)]
        recs += [record(fam, converged=False, rank="deficient") for _ in range(11)]
    return recs


class TestRates:
    def test_counts(self):
        bayes = {"regression": "bayes", "convergence": {"converged": True, "reasons": []}}
        recs = [record(converged=False, bayes=bayes), record(bayes=bayes), record("logistic", converged=False)]
        t = report.nonconvergence_rates(recs)
        assert t.rate("complex", "gaussian", "freq") == 0.5
        assert t.rate("complex", "gaussian", "bayes") == 0.0
        assert t.rate("complex", "logistic", "freq") == 1.0
        with pytest.raises(KeyError):
            t.rate("complex", "logistic", "bayes")

    def test_reclassify(self):
        recs = [record(max_grad=g) for g in (0.001, 0.005, 0.02)]
        assert report.nonconvergence_rates(recs, 0.01).rate("complex", "gaussian", "freq") == pytest.approx(1 / 3)
        assert report.nonconvergence_rates(recs, 0.002).rate("complex", "gaussian", "freq") == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            report.nonconvergence_rates([])


class TestRank:
    def test_reference_counts_replay(self):
        t = report.rank_deficiency_table(reference_rank_records())
        assert t == {"gaussian": {"full": 395, "deficient": 469}, "logistic": {"full": 4, "deficient": 173}}
        rows = {r["family"]: r for r in report.rank_table_rows(t)}
        assert rows["gaussian"]["deficient_share"] == pytest.approx(469 / 864)
        assert rows["logistic"]["deficient_share"] == pytest.approx(173 / 177)

    def test_regression_recovers_signs(self):
        rng = np.random.default_rng(0)
        recs = []
        for _ in range(3000):
            mv, bal, tc = rng.uniform(0, 1), rng.uniform(0.1, 1), rng.uniform(0, 2)
            fam = rng.choice(["gaussian", "logistic"])
            eta = 1.0 - 3.0 * mv - 2.0 * bal + 1.0 * tc - 1.0 * (fam == "gaussian")
            rank = "deficient" if rng.uniform() < 1 / (1 + np.exp(-eta)) else "full"
            recs.append(record(fam, rank=rank, balance=bal, min_variance=mv, total_correlation=tc))
        res = report.rank_logistic_regression(recs)
        assert res.names == ["intercept", "family_gaussian", "min_variance_scaled", "balance_scaled",
                             "total_correlation_scaled"]
        assert res.coef("min_variance_scaled") < 0 and res.coef("balance_scaled") < 0
        assert res.coef("total_correlation_scaled") > 0 and res.coef("family_gaussian") < 0
        sd_mv = np.std([r["min_variance"] for r in recs], ddof=1)
        assert res.coef("min_variance_scaled") == pytest.approx(-3.0 * sd_mv, rel=0.2)
        assert all(0 <= r["p_value"] <= 1 for r in res.rows())

    def test_regression_separation(self):
        recs = [record(rank="deficient", min_variance=v, balance=v, total_correlation=1 - v) for v in (0.1, 0.2, 0.3)]
        recs += [record(rank="full", min_variance=v, balance=v / 2, total_correlation=v) for v in (0.7, 0.8, 0.9)]
        with pytest.raises(SeparationError):
            report.rank_logistic_regression(recs)

    def test_zscore(self):
        z = report.zscore([1.0, 2.0, 3.0])
        assert z.tolist() == [-1.0, 0.0, 1.0]
        with pytest.raises(ValueError):
            report.zscore([2.0, 2.0])


class TestErrorByBalance:
    @given(st.floats(1e-9, 1.0), st.integers(2, 20))
    def test_bin_contains_value(self, b, n):
        i = report.bin_index(b, n)
        edges = report.bin_edges(n)
        assert edges[i] < b <= edges[i + 1] + 1e-12

    def test_bin_edges_inclusive_upper(self):
        assert report.bin_index(0.1, 10) == 0 and report.bin_index(1.0, 10) == 9
        with pytest.raises(ValueError):
            report.bin_index(0.0, 10)

    def test_rows(self):
        recs = [record(balance=0.95, sq={"b0": 1.0, "b1": 3.0, "s0": 2.0}),
                record(balance=0.92, converged=False, sq={"b0": 3.0, "b1": 3.0, "s0": 4.0}),
                record(balance=0.15)]
        rows = report.error_by_balance(recs, n_bins=10)
        top = {r["parameter_class"]: r for r in rows if r["bin_low"] == 0.9}
        assert top["fixed"]["n"] == 2 and top["fixed"]["mean_squared_error"] == pytest.approx(2.5)
        assert top["sd"]["mean_squared_error"] == pytest.approx(3.0)
        assert top["fixed"]["nonconvergence"] == 0.5
        empty = [r for r in rows if r["bin_low"] == 0.5]
        assert all(r["n"] == 0 and r["mean_squared_error"] is None for r in empty)

    def test_param_class(self):
        assert [report.param_class(n) for n in ("b2", "s0", "si1", "r03", "sigma_eps")] == \
            ["fixed", "sd", "sd", "correlation", "residual"]


class TestOutput:
    def test_csv_and_json(self):
        rows = [{"a": 1, "b": None}, {"a": 2.5, "b": "x"}]
        assert report.to_csv(rows) == "a,b\n1,\n2.5,x\n"
        assert json.loads(report.to_json(rows)) == rows
        assert report.to_csv([]) == ""
