"""Convergence classification, rank checks and estimation errors."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from mixsim.freqfit import FitOutcome
from mixsim.truemodel import TrueModel

DEFAULT_TOL = 0.002
PAPER_TOL = 0.01
HESSIAN_NEG_TOL = 1e-6
RANK_SHARE = 1.0 - 1e-9


class Reason(str, Enum):
    GRADIENT_TOLERANCE = "gradient_tolerance"
    NON_PSD = "non_psd"
    DEGENERATE_HESSIAN = "degenerate_hessian"
    UNIDENTIFIABLE = "unidentifiable"
    OPTIMIZER_FAILURE = "optimizer_failure"
    # sampler-side reasons
    DIVERGENT_TRANSITIONS = "divergent_transitions"
    RHAT = "rhat"


@dataclass
class ConvergenceStatus:
    reasons: list[Reason] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict:
        return {"converged": self.converged, "reasons": [r.value for r in self.reasons]}


def classify_frequentist_convergence(fit, tol: float = DEFAULT_TOL) -> ConvergenceStatus:
    """Label a fit unconverged on any failed check; gradient failures are ``max_grad >= tol``.

    ``fit`` may be a :class:`FitOutcome` or its ``to_dict()`` form, so stored
    records can be re-classified at another tolerance.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    get = fit.get if isinstance(fit, dict) else (lambda k, d=None: getattr(fit, k, d))
    reasons = []
    max_grad = get("max_grad")
    if max_grad is None or not max_grad < tol:
        reasons.append(Reason.GRADIENT_TOLERANCE)
    if not get("psd_ok", True):
        reasons.append(Reason.NON_PSD)
    hmin = get("hessian_min_eig")
    if hmin is not None and not hmin >= -HESSIAN_NEG_TOL:
        reasons.append(Reason.DEGENERATE_HESSIAN)
    if get("unidentifiable", False):
        reasons.append(Reason.UNIDENTIFIABLE)
    status = get("optimizer_status", "ftol")
    if status == "maxfun" or not get("pirls_ok", True) or get("separation", False):
        reasons.append(Reason.OPTIMIZER_FAILURE)
    return ConvergenceStatus(reasons)


class Rank(str, Enum):
    FULL = "full"
    DEFICIENT = "deficient"


@dataclass
class RankStatus:
    status: Rank
    components_needed: int

    def to_dict(self) -> dict:
        return {"status": self.status.value, "components_needed": self.components_needed}


def rank_of_covariance(chol) -> RankStatus:
    """Principal components of a covariance given its Cholesky factor.

    Component variances are the squared singular values of the factor; the
    matrix is deficient when fewer components than its dimension carry a
    cumulative share of at least ``1 - 1e-9`` of the total variance.
    """
    chol = np.atleast_2d(np.asarray(chol, dtype=float))
    if chol.shape[0] != chol.shape[1]:
        raise ValueError("Cholesky factor must be square")
    k = chol.shape[0]
    var = np.linalg.svd(chol, compute_uv=False) ** 2
    total = var.sum()
    if not total > 0:
        return RankStatus(Rank.DEFICIENT, 0)
    share = np.cumsum(np.sort(var)[::-1]) / total
    m = int(np.searchsorted(share, RANK_SHARE) + 1)
    m = min(m, k)
    return RankStatus(Rank.FULL if m == k else Rank.DEFICIENT, m)


def _lower(mat):
    mat = np.asarray(mat, dtype=float)
    return mat[np.tril_indices(mat.shape[0], -1)]


def estimate_vector(beta, sigma: dict, omega: dict, sigma_eps=None) -> dict[str, float]:
    """Flatten parameters into named scalars: b0.., s<factor>0.., r<factor>ij, sigma_eps."""
    out = {f"b{j}": float(v) for j, v in enumerate(beta)}
    for name in sigma:
        tag = "" if name == "subject" else name[0]
        for j, v in enumerate(sigma[name]):
            out[f"s{tag}{j}"] = float(v)
        R = np.asarray(omega[name], dtype=float)
        for i in range(R.shape[0]):
            for j in range(i):
                out[f"r{tag}{j}{i}"] = float(R[i, j])
    if sigma_eps is not None:
        out["sigma_eps"] = float(sigma_eps)
    return out


def truth_vector(truth: TrueModel) -> dict[str, float]:
    omega = {k: L @ L.T for k, L in truth.omega.items()}
    return estimate_vector(truth.beta, truth.sigma, omega, truth.sigma_eps)


def fit_vector(fit: FitOutcome) -> dict[str, float]:
    return estimate_vector(fit.beta_hat, fit.sigma_hat, fit.omega_hat, fit.sigma_eps_hat)


def parameter_errors(truth, fit) -> dict[str, float]:
    """Squared error per parameter.

    Both arguments may be :class:`TrueModel`/:class:`FitOutcome` objects or
    already-flattened ``{name: value}`` dicts.  Gaussian truths must already
    be on the standardized-response scale (see
    :func:`mixsim.truemodel.standardize_truth`).
    """
    t = truth if isinstance(truth, dict) else truth_vector(truth)
    e = fit if isinstance(fit, dict) else fit_vector(fit)
    if set(t) != set(e):
        raise ValueError(f"parameter structure mismatch: {sorted(set(t) ^ set(e))}")
    return {k: (e[k] - t[k]) ** 2 for k in t}


def summarize_true_model(truth: TrueModel) -> tuple[float, float]:
    """``(smallest random-effect variance, sum of squared lower-triangle correlations)``."""
    sig = np.concatenate([np.asarray(s, dtype=float) for s in truth.sigma.values()])
    if sig.size == 0:
        raise ValueError("true model has no random effects")
    total = 0.0
    for L in truth.omega.values():
        total += float(np.sum(_lower(L @ L.T) ** 2))
    return float(np.min(sig**2)), total
