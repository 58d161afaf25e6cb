"""Aggregate simulation records into result tables.

Every table is a single pass over an iterable of records (the dicts written
by :mod:`mixsim.runner`), so streaming a file and passing a list give the
same result.  Frequentist fits can be re-classified at another gradient
tolerance through ``tol``; by default the classification stored in the
record is used.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.stats import norm

from mixsim.diagnostics import classify_frequentist_convergence
from mixsim.freqfit import fit_glm_logistic

FITTERS = ("freq", "bayes")
FAMILIES = ("gaussian", "logistic")


def fit_converged(block: dict | None, tol: float | None = None) -> bool | None:
    """Convergence of one stored fit block; ``None`` when the fit was not run."""
    if block is None:
        return None
    if tol is not None and block.get("regression") == "frequentist" and "fit" in block:
        return classify_frequentist_convergence(block["fit"], tol).converged
    return bool(block["convergence"]["converged"])


# ---------------------------------------------------------------------------
# non-convergence rates


@dataclass
class RatesTable:
    rows: list[dict]

    def rate(self, design: str, family: str, fitter: str) -> float:
        for r in self.rows:
            if (r["design"], r["family"], r["fitter"]) == (design, family, fitter):
                return r["nonconvergence"]
        raise KeyError((design, family, fitter))


def nonconvergence_rates(records: Iterable[dict], tol: float | None = None) -> RatesTable:
    counts: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
    seen = False
    for rec in records:
        seen = True
        for fitter in FITTERS:
            ok = fit_converged(rec["fits"].get(fitter), tol)
            if ok is None:
                continue
            c = counts[(rec["design"], rec["family"], fitter)]
            c[0] += 1
            c[1] += not ok
    if not seen:
        raise ValueError("no records")
    rows = [{"design": d, "family": f, "fitter": t, "n": n, "unconverged": u, "nonconvergence": u / n}
            for (d, f, t), (n, u) in sorted(counts.items())]
    return RatesTable(rows)


# ---------------------------------------------------------------------------
# rank deficiency


def rank_deficiency_table(records: Iterable[dict], tol: float | None = None) -> dict[str, dict[str, int]]:
    """Counts of full / deficient covariance estimates among converged frequentist fits."""
    table = {f: {"full": 0, "deficient": 0} for f in FAMILIES}
    for rec in records:
        block = rec["fits"].get("freq")
        if not fit_converged(block, tol) or block.get("rank") is None:
            continue
        table[rec["family"]][block["rank"]["status"]] += 1
    return table


def rank_table_rows(table: dict[str, dict[str, int]]) -> list[dict]:
    return [{"family": f, "full": c["full"], "deficient": c["deficient"],
             "deficient_share": (c["deficient"] / (c["full"] + c["deficient"])) if c["full"] + c["deficient"] else None}
            for f, c in table.items()]


@dataclass
class RankRegressionResult:
    names: list[str]
    estimate: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p_value: np.ndarray
    n: int

    def rows(self) -> list[dict]:
        return [{"term": t, "estimate": float(e), "se": float(s), "z": float(z), "p_value": float(p)}
                for t, e, s, z, p in zip(self.names, self.estimate, self.se, self.z, self.p_value)]

    def coef(self, name: str) -> float:
        return float(self.estimate[self.names.index(name)])


def zscore(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    sd = v.std(ddof=1)
    if not sd > 0:
        raise ValueError("cannot scale a constant predictor")
    return (v - v.mean()) / sd


def rank_logistic_regression(records: Iterable[dict], tol: float | None = None) -> RankRegressionResult:
    """Logistic regression of rank deficiency on family and scaled truth/balance summaries.

    Uses converged frequentist fits that carry a rank status and a balance
    value.  Predictors: intercept, a Gaussian-family indicator, and z-scored
    min_variance, balance and total_correlation.  Raises
    :class:`mixsim.freqfit.SeparationError` when the maximum likelihood
    estimate does not exist.
    """
    y, fam, mv, bal, tc = [], [], [], [], []
    for rec in records:
        block = rec["fits"].get("freq")
        if not fit_converged(block, tol) or block.get("rank") is None or rec.get("balance") is None:
            continue
        y.append(1.0 if block["rank"]["status"] == "deficient" else 0.0)
        fam.append(1.0 if rec["family"] == "gaussian" else 0.0)
        mv.append(rec["min_variance"])
        bal.append(rec["balance"])
        tc.append(rec["total_correlation"])
    if len(y) < 2:
        raise ValueError("need at least two converged fits")
    cols = [np.ones(len(y))]
    names = ["intercept"]
    if 0 < sum(fam) < len(fam):
        cols.append(np.asarray(fam))
        names.append("family_gaussian")
    cols += [zscore(mv), zscore(bal), zscore(tc)]
    names += ["min_variance_scaled", "balance_scaled", "total_correlation_scaled"]
    X = np.column_stack(cols)
    coef, se = fit_glm_logistic(X, np.asarray(y))
    z = coef / se
    return RankRegressionResult(names, coef, se, z, 2.0 * norm.sf(np.abs(z)), len(y))


# ---------------------------------------------------------------------------
# error by balance


def param_class(name: str) -> str:
    if name == "sigma_eps":
        return "residual"
    return {"b": "fixed", "s": "sd", "r": "correlation"}[name[0]]


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    return np.linspace(0.0, 1.0, n_bins + 1)


def bin_index(b: float, n_bins: int) -> int:
    """Bin ``i`` covers ``(i/n, (i+1)/n]``."""
    if not 0.0 < b <= 1.0:
        raise ValueError("balance must lie in (0, 1]")
    return min(n_bins - 1, max(0, math.ceil(b * n_bins) - 1))


def error_by_balance(records: Iterable[dict], n_bins: int = 10, tol: float | None = None) -> list[dict]:
    """Mean squared error and non-convergence per balance bin, family, fitter and parameter class."""
    edges = bin_edges(n_bins)
    err = defaultdict(lambda: [0.0, 0])     # (bin, family, fitter, class) -> [sum, count]
    conv = defaultdict(lambda: [0, 0])      # (bin, family, fitter) -> [unconverged, count]
    keys = set()
    for rec in records:
        b = rec.get("balance")
        if b is None:
            continue
        i = bin_index(b, n_bins)
        for fitter in FITTERS:
            block = rec["fits"].get(fitter)
            ok = fit_converged(block, tol)
            if ok is None:
                continue
            c = conv[(i, rec["family"], fitter)]
            c[0] += not ok
            c[1] += 1
            by_class = defaultdict(list)
            for name, v in (block.get("squared_errors") or {}).items():
                by_class[param_class(name)].append(v)
            for cls, vals in by_class.items():
                keys.add((rec["family"], fitter, cls))
                e = err[(i, rec["family"], fitter, cls)]
                e[0] += float(np.mean(vals))
                e[1] += 1
    rows = []
    for i in range(n_bins):
        for fam, fitter, cls in sorted(keys):
            s, n = err.get((i, fam, fitter, cls), (0.0, 0))
            u, m = conv.get((i, fam, fitter), (0, 0))
            rows.append({
                "bin_low": float(edges[i]), "bin_high": float(edges[i + 1]),
                "bin_mid": float((edges[i] + edges[i + 1]) / 2), "family": fam, "fitter": fitter,
                "parameter_class": cls, "n": n,
                "mean_squared_error": s / n if n else None,
                "nonconvergence": u / m if m else None,
            })
    return rows


# ---------------------------------------------------------------------------
# output


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2) + "\n"
