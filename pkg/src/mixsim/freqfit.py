"""Frequentist mixed-model fitting in the style of lme4.

Covariance parameters are the lower-triangular relative Cholesky factors
``lam_f`` of each grouping factor (``theta`` stacks their lower triangles
column by column, diagonals constrained >= 0).  Linear models minimize the
profiled REML criterion; logistic models minimize the Laplace approximation
to the deviance jointly over ``(theta, beta)``, with PIRLS solving for the
conditional modes of the spherical random effects at every evaluation.

Single-factor designs use the per-group kernels in :mod:`mixsim.kernels`;
crossed designs fall back to dense linear algebra.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from mixsim import kernels
from mixsim.design import ModelMatrices
from mixsim.optimize import NelderMeadControl, fd_gradient, fd_hessian, nelder_mead

PIRLS_TOL = 1e-8
PIRLS_MAX_ITER = 50
PIRLS_MAX_HALVINGS = 10
BOUNDARY_TOL = 1e-4
SEPARATION_ETA = 30.0

# Outer-optimizer stopping rules.  The REML criterion is cheap and smooth, so
# it is optimized tightly; the joint (theta, beta) Laplace search is stopped
# earlier, in the spirit of glmer's final Nelder-Mead stage.
LMM_CONTROL = NelderMeadControl(ftol_abs=1e-8, xtol_rel=1e-10)
GLMM_CONTROL = NelderMeadControl(ftol_abs=1e-6, xtol_rel=1e-7)


class SeparationError(ValueError):
    """Logistic ML estimate does not exist: a predictor pattern perfectly separates the outcome (knockout)."""


class CollinearityError(ValueError):
    """The fixed-effects design matrix is not of full column rank (e.g. a factor level never observed)."""


def _check_full_rank(X):
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise CollinearityError("fixed-effects design matrix is not of full column rank")


# -- theta bookkeeping ---------------------------------------------------------

def theta_size(k: int) -> int:
    return k * (k + 1) // 2


def _tril_colmajor(k: int):
    rows, cols = [], []
    for j in range(k):
        for i in range(j, k):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


@dataclass
class ThetaParam:
    """Layout of theta over grouping factors with ``ks[f]`` effects each."""

    ks: tuple[int, ...]

    @property
    def size(self) -> int:
        return sum(theta_size(k) for k in self.ks)

    def diag_mask(self) -> np.ndarray:
        out = []
        for k in self.ks:
            r, c = _tril_colmajor(k)
            out.append(r == c)
        return np.concatenate(out) if out else np.zeros(0, dtype=bool)

    def initial(self) -> np.ndarray:
        return self.diag_mask().astype(float)

    def lambdas(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        out, pos = [], 0
        for k in self.ks:
            m = theta_size(k)
            lam = np.zeros((k, k))
            r, c = _tril_colmajor(k)
            lam[r, c] = theta[pos:pos + m]
            out.append(lam)
            pos += m
        return out

    def from_lambdas(self, lams) -> np.ndarray:
        parts = []
        for lam in lams:
            r, c = _tril_colmajor(lam.shape[0])
            parts.append(lam[r, c])
        return np.concatenate(parts) if parts else np.zeros(0)


def _block_lambda(re, lams) -> np.ndarray:
    """Dense q x q block-diagonal Lambda for the given per-factor factors."""
    blocks = []
    for f, lam in zip(re.factors, lams):
        blocks.extend([lam] * f.n_groups)
    return sla.block_diag(*blocks) if blocks else np.zeros((0, 0))


def _group_layout(group: np.ndarray, n_groups: int):
    order = np.argsort(group, kind="stable").astype(np.int64)
    ptr = np.zeros(n_groups + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(group, minlength=n_groups))
    return order, ptr


# -- results -----------------------------------------------------------------

@dataclass
class FitOutcome:
    family: str
    beta_hat: np.ndarray
    sigma_hat: dict[str, np.ndarray]
    omega_hat: dict[str, np.ndarray]
    chol_hat: dict[str, np.ndarray]
    sigma_eps_hat: float | None
    theta: np.ndarray
    objective: float
    max_grad: float
    psd_ok: bool
    boundary: bool
    iterations: int
    wall_time: float
    optimizer_status: str = "ftol"
    hessian_min_eig: float | None = None
    unidentifiable: bool = False
    separation: bool = False
    pirls_ok: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def optimizer_ok(self) -> bool:
        return self.optimizer_status != "maxfun" and self.pirls_ok and not self.separation

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "beta_hat": self.beta_hat.tolist(),
            "sigma_hat": {k: v.tolist() for k, v in self.sigma_hat.items()},
            "omega_hat": {k: v.tolist() for k, v in self.omega_hat.items()},
            "chol_hat": {k: v.tolist() for k, v in self.chol_hat.items()},
            "sigma_eps_hat": self.sigma_eps_hat,
            "theta": self.theta.tolist(),
            "objective": self.objective,
            "max_grad": self.max_grad,
            "psd_ok": self.psd_ok,
            "boundary": self.boundary,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "optimizer_status": self.optimizer_status,
            "hessian_min_eig": self.hessian_min_eig,
            "unidentifiable": self.unidentifiable,
            "separation": self.separation,
            "pirls_ok": self.pirls_ok,
        }


def _cov_summaries(re, lams, scale: float):
    sig, omg, chol = {}, {}, {}
    for f, lam in zip(re.factors, lams):
        C = scale * lam
        V = C @ C.T
        sd = np.sqrt(np.clip(np.diag(V), 0.0, None))
        with np.errstate(invalid="ignore", divide="ignore"):
            R = V / np.outer(sd, sd)
        # correlations involving a zero-variance effect are undefined; report 0
        R[~np.isfinite(R)] = 0.0
        np.fill_diagonal(R, 1.0)
        sig[f.name], omg[f.name], chol[f.name] = sd, R, C
    return sig, omg, chol


# -- linear mixed models -----------------------------------------------------------

class LmmProblem:
    """Profiled REML criterion for ``y = X beta + Z Lambda u + eps``."""

    def __init__(self, matrices: ModelMatrices, y, dense: bool | None = None):
        self.mm = matrices
        self.y = np.asarray(y, dtype=float)
        self.tp = ThetaParam(tuple(f.k for f in matrices.re.factors))
        X = matrices.X
        self.n, self.p = X.shape
        self.XtX = X.T @ X
        self.Xty = X.T @ self.y
        self.yty = float(self.y @ self.y)
        nf = len(matrices.re.factors)
        self.dense = (nf != 1) if dense is None else dense
        if self.dense:
            Z = matrices.Z.toarray()
            self.ZtZ, self.ZtX, self.Zty = Z.T @ Z, Z.T @ X, Z.T @ self.y
        else:
            f = matrices.re.factors[0]
            Zr = X[:, list(f.cols)]
            G, k = f.n_groups, f.k
            self.bZtZ = np.zeros((G, k, k))
            np.add.at(self.bZtZ, f.group, Zr[:, :, None] * Zr[:, None, :])
            self.bZtX = np.zeros((G, k, self.p))
            np.add.at(self.bZtX, f.group, Zr[:, :, None] * X[:, None, :])
            self.bZty = np.zeros((G, k))
            np.add.at(self.bZty, f.group, Zr * self.y[:, None])

    def _pls(self, theta):
        lams = self.tp.lambdas(theta)
        if self.dense:
            Lam = _block_lambda(self.mm.re, lams)
            A = Lam.T @ self.ZtZ @ Lam + np.eye(Lam.shape[0])
            L = np.linalg.cholesky(A)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            RZX = sla.solve_triangular(L, Lam.T @ self.ZtX, lower=True)
            cu = sla.solve_triangular(L, Lam.T @ self.Zty, lower=True)
            RtR, Rtc, ctc = RZX.T @ RZX, RZX.T @ cu, float(cu @ cu)
        else:
            logdet, RtR, Rtc, ctc = kernels.block_reml_terms(
                np.ascontiguousarray(lams[0]), self.bZtZ, self.bZtX, self.bZty)
        LX = np.linalg.cholesky(self.XtX - RtR)
        cb = sla.solve_triangular(LX, self.Xty - Rtc, lower=True)
        beta = sla.solve_triangular(LX.T, cb, lower=False)
        pwrss = self.yty - ctc - float(cb @ cb)
        logdet_x = 2.0 * np.log(np.diag(LX)).sum()
        return logdet, logdet_x, pwrss, beta

    def deviance(self, theta) -> float:
        """REML criterion; raises ``LinAlgError`` when the augmented system is singular."""
        logdet, logdet_x, pwrss, _ = self._pls(theta)
        dof = self.n - self.p
        if not pwrss > 0:
            raise np.linalg.LinAlgError("non-positive penalized residual sum of squares")
        return logdet + logdet_x + dof * (1.0 + np.log(2.0 * np.pi * pwrss / dof))

    def safe_deviance(self, theta) -> float:
        try:
            return self.deviance(theta)
        except np.linalg.LinAlgError:
            return np.inf

    def estimates(self, theta):
        _, _, pwrss, beta = self._pls(theta)
        sigma2 = pwrss / (self.n - self.p)
        return beta, float(np.sqrt(sigma2))


def profiled_reml_deviance(theta, matrices: ModelMatrices, y) -> float:
    return LmmProblem(matrices, y).deviance(theta)


def _standardize(y):
    y = np.asarray(y, dtype=float)
    sd = float(np.std(y, ddof=1)) if y.shape[0] > 1 else 0.0
    if not sd > 0:
        raise ValueError("response is constant")
    return (y - y.mean()) / sd


def _finish(fit_kwargs, f, x, hessian: bool):
    grad = fd_gradient(f, x)
    max_grad = float(np.max(np.abs(grad))) if grad.size else 0.0
    if not np.isfinite(max_grad):
        max_grad = float("inf")
    hmin = None
    if hessian and x.size:
        H = fd_hessian(f, x, f0=fit_kwargs["objective"])
        if np.all(np.isfinite(H)):
            hmin = float(np.linalg.eigvalsh(0.5 * (H + H.T)).min())
        else:
            hmin = float("nan")
    return max_grad, hmin


def fit_lmm(matrices: ModelMatrices, y, control: NelderMeadControl | None = None,
            hessian: bool = True, dense: bool | None = None) -> FitOutcome:
    """REML fit of a linear mixed model on the standardized response."""
    t0 = time.perf_counter()
    ys = _standardize(y)
    _check_full_rank(matrices.X)
    prob = LmmProblem(matrices, ys, dense=dense)
    tp = prob.tp
    mask = tp.diag_mask()
    res = nelder_mead(prob.safe_deviance, tp.initial(), np.full(tp.size, 0.1), mask, control or LMM_CONTROL)
    theta = res.x
    beta, sigma = prob.estimates(theta)
    lams = tp.lambdas(theta)
    sig, omg, chol = _cov_summaries(matrices.re, lams, sigma)
    fit = dict(objective=float(res.fun))
    max_grad, hmin = _finish(fit, prob.safe_deviance, theta, hessian)
    psd_ok = all(np.all(np.isfinite(c)) for c in chol.values()) and np.isfinite(sigma)
    n_params = tp.size + matrices.p + 1
    return FitOutcome(
        family="gaussian",
        beta_hat=beta,
        sigma_hat=sig,
        omega_hat=omg,
        chol_hat=chol,
        sigma_eps_hat=sigma,
        theta=theta,
        objective=float(res.fun),
        max_grad=max_grad,
        psd_ok=bool(psd_ok),
        boundary=bool(np.any(theta[mask] < BOUNDARY_TOL)),
        iterations=res.nfev,
        wall_time=time.perf_counter() - t0,
        optimizer_status=res.status,
        hessian_min_eig=hmin,
        unidentifiable=bool(matrices.n <= matrices.q or n_params > matrices.n),
    )


# -- logistic GLM ----------------------------------------------------------------

def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _log1pexp(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _check_binary(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be 0/1")
    if y.min() == y.max():
        raise ValueError("response has a single class")
    return y


def fit_glm_logistic(X, y, tol: float = 1e-10, max_iter: int = 100):
    """Logistic regression by iteratively reweighted least squares.

    Returns ``(coef, se)``.  Raises :class:`SeparationError` when the
    likelihood has no finite maximizer.
    """
    X = np.asarray(X, dtype=float)
    y = _check_binary(y)
    n, p = X.shape
    _check_full_rank(X)
    beta = np.zeros(p)
    eta = np.zeros(n)
    dev = -2.0 * float(y @ eta - _log1pexp(eta).sum())
    for _ in range(max_iter):
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        XtWX = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(XtWX, X.T @ (y - mu))
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular (knockout)") from None
        t = 1.0
        for _ in range(30):
            nb = beta + t * step
            neta = X @ nb
            ndev = -2.0 * float(y @ neta - _log1pexp(neta).sum())
            if ndev <= dev + 1e-12:
                break
            t *= 0.5
        beta, eta, old, dev = nb, neta, dev, ndev
        if np.max(np.abs(eta)) > SEPARATION_ETA:
            raise SeparationError("fitted log-odds diverge: perfect separation (knockout)")
        # under separation the deviance flattens while the coefficients keep
        # drifting, so a small deviance change alone is not convergence
        moved = t * float(np.max(np.abs(step)))
        if abs(old - dev) <= tol * (abs(dev) + 0.1) and moved <= 1e-6 * max(1.0, float(np.max(np.abs(beta)))):
            break
    else:
        raise SeparationError("IRLS did not converge; likely separation (knockout)")
    mu = _sigmoid(eta)
    w = mu * (1.0 - mu)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    return beta, np.sqrt(np.diag(cov))


# -- logistic mixed models ---------------------------------------------------------

class GlmmProblem:
    """Laplace-approximated deviance of a Bernoulli-logit mixed model over (theta, beta)."""

    def __init__(self, matrices: ModelMatrices, y, dense: bool | None = None):
        self.mm = matrices
        self.y = _check_binary(y)
        self.tp = ThetaParam(tuple(f.k for f in matrices.re.factors))
        nf = len(matrices.re.factors)
        self.dense = (nf != 1) if dense is None else dense
        X = matrices.X
        if self.dense:
            self.Z = matrices.Z.toarray()
        else:
            f = matrices.re.factors[0]
            self.zr = np.ascontiguousarray(X[:, list(f.cols)])
            self.order, self.ptr = _group_layout(f.group, f.n_groups)
        self.last_pirls_ok = True
        self.last_max_eta = 0.0

    def split(self, x):
        m = self.tp.size
        return x[:m], x[m:]

    def _pirls_dense(self, offset, lams):
        Lam = _block_lambda(self.mm.re, lams)
        A = self.Z @ Lam
        q = A.shape[1]
        u = np.zeros(q)
        y = self.y

        def pdev(u):
            eta = offset + A @ u
            return -2.0 * float(y @ eta - _log1pexp(eta).sum()) + float(u @ u), eta

        cur, eta = pdev(u)
        ok = True
        for _ in range(PIRLS_MAX_ITER):
            mu = _sigmoid(eta)
            w = mu * (1.0 - mu)
            H = A.T @ (w[:, None] * A) + np.eye(q)
            step = sla.cho_solve(sla.cho_factor(H, lower=True), A.T @ (y - mu) - u)
            t = 1.0
            for _ in range(PIRLS_MAX_HALVINGS + 1):
                nu = u + t * step
                new, neta = pdev(nu)
                if not new > cur * (1.0 + 1e-15) + 1e-12:
                    break
                t *= 0.5
            else:
                ok = False
                break
            assert new <= cur * (1.0 + 1e-15) + 1e-12
            change = abs(cur - new) / (abs(new) + 0.1)
            u, cur, eta = nu, new, neta
            if change < PIRLS_TOL:
                break
        else:
            ok = False
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        H = A.T @ (w[:, None] * A) + np.eye(q)
        logdet = 2.0 * np.log(np.diag(np.linalg.cholesky(H))).sum()
        usq = float(u @ u)
        return u, cur - usq, usq, logdet, ok, eta

    def laplace(self, theta, beta):
        """Return ``(deviance, u, pirls_ok, max|eta|)``."""
        lams = self.tp.lambdas(theta)
        offset = self.mm.X @ beta
        if self.dense:
            u, dev, usq, logdet, ok, eta = self._pirls_dense(offset, lams)
            max_eta = float(np.max(np.abs(eta)))
        else:
            u, dev, usq, logdet, _, ok = kernels.block_pirls_logistic(
                offset, self.zr, self.y, self.order, self.ptr,
                np.ascontiguousarray(lams[0]), PIRLS_TOL, PIRLS_MAX_ITER, PIRLS_MAX_HALVINGS)
            eta = offset + np.einsum("ik,ik->i", self.zr @ lams[0], u[self.mm.re.factors[0].group])
            max_eta = float(np.max(np.abs(eta)))
        return dev + usq + logdet, u, ok, max_eta

    def deviance(self, x) -> float:
        theta, beta = self.split(np.asarray(x, dtype=float))
        try:
            val, _, ok, max_eta = self.laplace(theta, beta)
        except np.linalg.LinAlgError:
            return np.inf
        self.last_pirls_ok, self.last_max_eta = ok, max_eta
        return val


def fit_glmm_logistic(matrices: ModelMatrices, y, control: NelderMeadControl | None = None,
                      hessian: bool = True, dense: bool | None = None,
                      theta_fixed: np.ndarray | None = None) -> FitOutcome:
    """Laplace ML fit of a logistic mixed model.

    With ``theta_fixed`` only beta is optimized (used for checks against the
    plain GLM at theta = 0).
    """
    t0 = time.perf_counter()
    _check_full_rank(matrices.X)
    prob = GlmmProblem(matrices, y, dense=dense)
    tp = prob.tp
    X = matrices.X
    try:
        beta0, se0 = fit_glm_logistic(X, prob.y)
    except SeparationError:
        beta0, se0 = np.zeros(X.shape[1]), np.ones(X.shape[1])
    bstep = np.clip(0.2 * se0, 1e-3, 1.0)
    if theta_fixed is not None:
        theta_fixed = np.asarray(theta_fixed, dtype=float)

        def obj(b):
            return prob.deviance(np.concatenate([theta_fixed, b]))

        res = nelder_mead(obj, beta0, bstep, None, control or GLMM_CONTROL)
        x = np.concatenate([theta_fixed, res.x])
        free = slice(tp.size, None)
    else:
        mask = np.concatenate([tp.diag_mask(), np.zeros(X.shape[1], dtype=bool)])
        x0 = np.concatenate([tp.initial(), beta0])
        step = np.concatenate([np.full(tp.size, 0.1), bstep])
        res = nelder_mead(prob.deviance, x0, step, mask, control or GLMM_CONTROL)
        x = res.x
        free = slice(None)
    objective = prob.deviance(x)
    pirls_ok, max_eta = prob.last_pirls_ok, prob.last_max_eta
    theta, beta = prob.split(x)
    lams = tp.lambdas(theta)
    sig, omg, chol = _cov_summaries(matrices.re, lams, 1.0)

    def fx(v):
        full = x.copy()
        full[free] = v
        return prob.deviance(full)

    max_grad, hmin = _finish(dict(objective=objective), fx, x[free], hessian)
    mask = tp.diag_mask()
    return FitOutcome(
        family="logistic",
        beta_hat=beta,
        sigma_hat=sig,
        omega_hat=omg,
        chol_hat=chol,
        sigma_eps_hat=None,
        theta=theta,
        objective=float(objective),
        max_grad=max_grad,
        psd_ok=bool(all(np.all(np.isfinite(c)) for c in chol.values())),
        boundary=bool(np.any(theta[mask] < BOUNDARY_TOL)),
        iterations=res.nfev,
        wall_time=time.perf_counter() - t0,
        optimizer_status=res.status,
        hessian_min_eig=hmin,
        unidentifiable=bool(tp.size + X.shape[1] > matrices.n),
        separation=bool(max_eta > SEPARATION_ETA),
        pirls_ok=bool(pirls_ok),
    )
