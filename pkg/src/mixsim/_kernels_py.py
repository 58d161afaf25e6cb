"""Pure-numpy reference implementations of the hot kernels.

Signatures match the compiled ``_kernels`` module exactly; see
:mod:`mixsim.kernels` for backend selection.
"""
import math

import numpy as np

GAUSSIAN = 0
LOGISTIC = 1
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _log1pexp(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mixed_loglik_grad(X, beta, zind, zval, gamma, y, family, sigma_eps):
    """Log-likelihood of a Gaussian or Bernoulli-logit mixed model and its gradient.

    Returns ``(ll, grad_beta, grad_gamma, grad_log_sigma_eps)``; the last is
    0 for the logistic family.
    """
    eta = X @ beta
    if zind.shape[1]:
        eta += np.einsum("im,im->i", zval, gamma[zind])
    if family == GAUSSIAN:
        r = y - eta
        inv_var = 1.0 / (sigma_eps * sigma_eps)
        rss = float(r @ r)
        ll = -0.5 * rss * inv_var - y.shape[0] * (np.log(sigma_eps) + _HALF_LOG_2PI)
        d = r * inv_var
        g_ls = rss * inv_var - y.shape[0]
    else:
        ll = float(y @ eta - _log1pexp(eta).sum())
        d = y - _sigmoid(eta)
        g_ls = 0.0
    g_beta = X.T @ d
    g_gamma = np.bincount(zind.ravel(), weights=(zval * d[:, None]).ravel(), minlength=gamma.shape[0])
    return float(ll), g_beta, g_gamma, float(g_ls)


def block_reml_terms(lam, ZtZ, ZtX, Zty):
    """Per-group penalized least-squares pieces for a single grouping factor.

    For every group ``g``: ``A_g = lam' ZtZ_g lam + I = L_g L_g'``,
    ``R_g = L_g^{-1} lam' ZtX_g`` and ``c_g = L_g^{-1} lam' Zty_g``.
    Returns ``(sum log|A_g|, sum R_g'R_g, sum R_g'c_g, sum c_g'c_g)``.
    """
    k = lam.shape[0]
    A = np.einsum("ji,gjl,lm->gim", lam, ZtZ, lam) + np.eye(k)
    L = np.linalg.cholesky(A)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
    lZtX = np.einsum("ji,gjp->gip", lam, ZtX)
    lZty = np.einsum("ji,gj->gi", lam, Zty)
    rhs = np.concatenate([lZtX, lZty[:, :, None]], axis=2)
    sol = np.linalg.solve(L, rhs)
    R, c = sol[:, :, :-1], sol[:, :, -1]
    return (float(logdet), np.einsum("gip,giq->pq", R, R), np.einsum("gip,gi->p", R, c),
            float(np.einsum("gi,gi->", c, c)))


def block_pirls_logistic(offset, zr, y, order, ptr, lam, tol, max_iter, max_halvings):
    """Conditional modes of spherical random effects for one grouping factor.

    Rows of group ``g`` are ``order[ptr[g]:ptr[g+1]]``.  Each group solves
    ``min_u  -2 loglik(offset + zr lam u) + u'u`` by Newton steps with step
    halving, starting from ``u = 0``.

    Returns ``(u, deviance, u'u, logdet, max_iterations_used, ok)`` where the
    log-determinant is of ``lam' zr' W zr lam + I`` at the mode, summed over
    groups, and ``ok`` is False if any group hit the iteration or halving
    limit.
    """
    G = ptr.shape[0] - 1
    k = lam.shape[0]
    gidx = np.empty(offset.shape[0], dtype=np.int64)
    for g in range(G):
        gidx[order[ptr[g]:ptr[g + 1]]] = g
    A = zr @ lam  # rows are a_i' = z_i' lam
    u = np.zeros((G, k))
    eye = np.eye(k)

    def group_pdev(u):
        eta = offset + np.einsum("ik,ik->i", A, u[gidx])
        dev = -2.0 * (y * eta - _log1pexp(eta))
        return np.bincount(gidx, weights=dev, minlength=G) + np.einsum("gk,gk->g", u, u), eta

    pdev, eta = group_pdev(u)
    active = np.ones(G, dtype=bool)
    ok = True
    it = 0
    while active.any():
        if it >= max_iter:
            ok = False
            break
        it += 1
        mu = _sigmoid(eta)
        w = mu * (1.0 - mu)
        H = np.zeros((G, k, k))
        np.add.at(H, gidx, w[:, None, None] * A[:, :, None] * A[:, None, :])
        H += eye
        grad = np.zeros((G, k))
        np.add.at(grad, gidx, (y - mu)[:, None] * A)
        grad -= u
        step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        step[~active] = 0.0
        t = np.ones(G)
        new_u = u + step
        new_pdev, new_eta = group_pdev(new_u)
        for _ in range(max_halvings):
            worse = active & (new_pdev > pdev * (1.0 + 1e-15) + 1e-12)
            if not worse.any():
                break
            t[worse] *= 0.5
            new_u = u + t[:, None] * step
            new_pdev, new_eta = group_pdev(new_u)
        else:
            if (active & (new_pdev > pdev * (1.0 + 1e-15) + 1e-12)).any():
                ok = False
                break
        change = np.abs(pdev - new_pdev) / (np.abs(new_pdev) + 0.1)
        u, pdev, eta = new_u, new_pdev, new_eta
        active &= change >= tol
    mu = _sigmoid(eta)
    w = mu * (1.0 - mu)
    H = np.zeros((G, k, k))
    np.add.at(H, gidx, w[:, None, None] * A[:, :, None] * A[:, None, :])
    H += eye
    logdet = 2.0 * np.log(np.diagonal(np.linalg.cholesky(H), axis1=1, axis2=2)).sum()
    usq = float(np.einsum("gk,gk->", u, u))
    dev = float(pdev.sum() - usq)
    return u, dev, usq, float(logdet), it, ok


def corr_cholesky_transform(raw, dim, eta):
    """Unconstrained values to a correlation Cholesky factor, with unnormalized LKJ log density.

    ``raw`` runs row by row over the strict lower triangle; each value maps
    through ``tanh`` to a canonical partial correlation.  Returns
    ``(L, dL, lp, dlp)`` where ``dL[m]`` is the derivative of ``L`` with
    respect to ``raw[m]`` and ``lp`` is the unnormalized LKJ(eta) log density
    of ``L L'`` plus the log-Jacobian of the map.
    """
    m = dim * (dim - 1) // 2
    L = np.zeros((dim, dim))
    dL = np.zeros((m, dim, dim))
    dlp = np.zeros(m)
    L[0, 0] = 1.0
    lp = 0.0
    pos = 0
    for i in range(1, dim):
        ss = 0.0
        dss = np.zeros(m)
        for j in range(i):
            w = np.tanh(raw[pos])
            dw = 1.0 - w * w
            lp += np.log(dw)
            dlp[pos] -= 2.0 * w
            if j == 0:
                L[i, 0] = w
                dL[pos, i, 0] = dw
            else:
                s = np.sqrt(1.0 - ss)
                lp += 0.5 * np.log(1.0 - ss)
                dlp -= 0.5 * dss / (1.0 - ss)
                L[i, j] = w * s
                dL[:, i, j] = w * (-0.5 / s) * dss
                dL[pos, i, j] += dw * s
            ss += L[i, j] ** 2
            dss += 2.0 * L[i, j] * dL[:, i, j]
            pos += 1
        L[i, i] = np.sqrt(1.0 - ss)
        dL[:, i, i] = -0.5 * dss / L[i, i]
        coef = dim - (i + 1) + 2.0 * eta - 2.0
        lp += coef * np.log(L[i, i])
        dlp += coef * dL[:, i, i] / L[i, i]
    return L, dL, float(lp), dlp


def bayes_logpost_grad(x, X, zind, zval, y, family, layout, eta, beta_sd, sigma_sd, sigma_eps_sd):
    """Unnormalized log posterior of the non-centered mixed model and its gradient.

    ``layout`` has one row per grouping factor:
    ``(k, n_groups, log_sigma_offset, cpc_offset, z_offset, gamma_offset)``.
    For the gaussian family ``x[-1]`` is ``log sigma_eps``.  Returns
    ``(lp, grad, terms)`` with ``terms`` the six components
    (beta prior, sigma prior, correlation prior, z prior, sigma_eps prior,
    likelihood); additive constants are left out.
    """
    dim = x.shape[0]
    p = X.shape[1]
    q = int(sum(r[0] * r[1] for r in layout))
    terms = np.zeros(6)
    grad = np.zeros(dim)
    beta = x[:p]
    terms[0] = -0.5 * float(beta @ beta) / beta_sd**2
    grad[:p] = -beta / beta_sd**2
    gamma = np.empty(q)
    saved = []
    for k, G, lso, cpo, zo, go in layout:
        ls = x[lso:lso + k]
        sigma = np.exp(ls)
        terms[1] += float(np.sum(ls - 0.5 * (sigma / sigma_sd) ** 2))
        grad[lso:lso + k] = 1.0 - (sigma / sigma_sd) ** 2
        m = k * (k - 1) // 2
        L, dL, lp, dlp = corr_cholesky_transform(x[cpo:cpo + m], k, eta)
        terms[2] += lp
        grad[cpo:cpo + m] = dlp
        zb = x[zo:zo + G * k].reshape(G, k)
        terms[3] -= 0.5 * float(np.sum(zb * zb))
        grad[zo:zo + G * k] = -zb.ravel()
        M = sigma[:, None] * L
        gamma[go:go + G * k] = (zb @ M.T).ravel()
        saved.append((k, G, lso, cpo, zo, go, sigma, L, dL, M, zb))
    sigma_eps = 1.0
    if family == GAUSSIAN:
        lse = x[-1]
        sigma_eps = np.exp(lse)
        terms[4] = lse - 0.5 * (sigma_eps / sigma_eps_sd) ** 2
        grad[-1] = 1.0 - (sigma_eps / sigma_eps_sd) ** 2
    ll, g_beta, g_gamma, g_lse = mixed_loglik_grad(X, beta, zind, zval, gamma, y, family, sigma_eps)
    terms[5] = ll
    grad[:p] += g_beta
    if family == GAUSSIAN:
        grad[-1] += g_lse
    for k, G, lso, cpo, zo, go, sigma, L, dL, M, zb in saved:
        dg = g_gamma[go:go + G * k].reshape(G, k)
        dM = dg.T @ zb
        grad[lso:lso + k] += np.sum(dM * L, axis=1) * sigma
        if dL.shape[0]:
            grad[cpo:cpo + dL.shape[0]] += np.einsum("mij,ij->m", dL, sigma[:, None] * dM)
        grad[zo:zo + G * k] += (dg @ M).ravel()
    return float(terms.sum()), grad, terms


class MixedModelTarget:
    """Callable ``x -> (log density, gradient)`` over fixed model arrays, plus ``constant``."""

    def __init__(self, dim, X, zind, zval, y, family, layout, eta, beta_sd, sigma_sd,
                 sigma_eps_sd, constant=0.0):
        self.dim = dim
        self.constant = constant
        self._args = (X, zind, zval, y, family, layout, eta, beta_sd, sigma_sd, sigma_eps_sd)

    def __call__(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError("wrong parameter length")
        with np.errstate(all="ignore"):
            lp, grad, _ = bayes_logpost_grad(x, *self._args)
        return lp + self.constant, grad


def _logaddexp(a, b):
    return float(np.logaddexp(a, b))


class NutsEngine:
    """NUTS chain state (multinomial sampling, three-way U-turn check).

    ``target(x) -> (lp, grad)``.  Non-finite densities or gradients count as
    ``lp = -inf``, which makes the step diverge.
    """

    def __init__(self, target, gen, q, lp, g, inv_metric, eps, max_depth, max_delta_h=1000.0):
        self.f = target
        self.gen = gen
        self.q = np.array(q, dtype=float)
        self.lp = lp
        self.g = np.array(g, dtype=float)
        self.inv_metric = np.array(inv_metric, dtype=float)
        self.eps = eps
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h
        # per-transition scratch
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def _target(self, q):
        try:
            return self.f(q)
        except Exception:
            return -math.inf, np.zeros_like(q)

    def hamiltonian(self, lp, p) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            h = -lp + 0.5 * float(np.sum(self.inv_metric * p * p))
        return math.inf if math.isnan(h) else h

    def leapfrog(self, q, p, g, eps):
        p = p + 0.5 * eps * g
        q = q + eps * self.inv_metric * p
        lp, g = self._target(q)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return q, p, -math.inf, np.zeros_like(q)
        p = p + 0.5 * eps * g
        return q, p, lp, g

    def sample_momentum(self):
        return self.gen.standard_normal(self.q.shape[0]) / np.sqrt(self.inv_metric)

    def init_stepsize(self):
        """Double or halve the step until one leapfrog step's acceptance crosses 0.8."""
        if self.eps == 0 or self.eps > 1e7 or not math.isfinite(self.eps):
            return
        log08 = math.log(0.8)

        def delta_h():
            p = self.sample_momentum()
            h0 = self.hamiltonian(self.lp, p)
            _, p1, lp1, _ = self.leapfrog(self.q, p, self.g, self.eps)
            h = self.hamiltonian(lp1, p1) if np.isfinite(lp1) else math.inf
            return h0 - h

        direction = 1 if delta_h() > log08 else -1
        while True:
            dh = delta_h()
            if direction == 1 and not dh > log08:
                break
            if direction == -1 and not dh < log08:
                break
            self.eps = self.eps * 2.0 if direction == 1 else self.eps * 0.5
            if self.eps > 1e7:
                raise RuntimeError("step size diverged to infinity during initialization")
            if self.eps == 0:
                raise RuntimeError("step size collapsed to zero during initialization")

    @staticmethod
    def _criterion(ps_minus, ps_plus, rho) -> bool:
        return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0

    def _build(self, depth, state, sign, h0):
        """Grow a subtree of ``2**depth`` leapfrog steps from ``state``.

        Returns ``(valid, end_state, proposal, ps_beg, ps_end, rho, p_beg, p_end, log_weight)``.
        """
        if depth == 0:
            q, p, lp, g = state
            q, p, lp, g = self.leapfrog(q, p, g, sign * self.eps)
            self.n_leapfrog += 1
            h = self.hamiltonian(lp, p) if np.isfinite(lp) else math.inf
            if h - h0 > self.max_delta_h:
                self.divergent = True
            lw = h0 - h
            self.sum_metro += 1.0 if lw > 0 else math.exp(lw)
            new = (q, p, lp, g)
            ps = self.inv_metric * p
            return not self.divergent, new, new, ps, ps, p, p, p, lw
        ok, state, z_init, ps_beg, ps_init_end, rho_init, p_beg, p_init_end, lw_init = \
            self._build(depth - 1, state, sign, h0)
        if not ok:
            return (False,) + (None,) * 8
        ok, state, z_final, ps_final_beg, ps_end, rho_final, p_final_beg, p_end, lw_final = \
            self._build(depth - 1, state, sign, h0)
        if not ok:
            return (False,) + (None,) * 8
        lw = _logaddexp(lw_init, lw_final)
        if lw_final > lw:
            z = z_final
        else:
            z = z_final if self.gen.uniform() < math.exp(lw_final - lw) else z_init
        rho = rho_init + rho_final
        persist = (self._criterion(ps_beg, ps_end, rho)
                   and self._criterion(ps_beg, ps_final_beg, rho_init + p_final_beg)
                   and self._criterion(ps_init_end, ps_end, rho_final + p_init_end))
        return persist, state, z, ps_beg, ps_end, rho, p_beg, p_end, lw

    def transition(self):
        """One NUTS transition with multinomial sampling; updates the chain position."""
        p0 = self.sample_momentum()
        z0 = (self.q, p0, self.lp, self.g)
        h0 = self.hamiltonian(self.lp, p0)
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False
        z_fwd = z_bck = z_sample = z0
        ps0 = self.inv_metric * p0
        ps_fwd_fwd = ps_fwd_bck = ps_bck_fwd = ps_bck_bck = ps0
        p_fwd_fwd = p_fwd_bck = p_bck_fwd = p_bck_bck = p0
        rho = p0.copy()
        lw = 0.0
        depth = 0
        while depth < self.max_depth:
            if self.gen.uniform() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_bck, ps_fwd_bck
                (ok, z_fwd, z_prop, ps_fwd_bck, ps_fwd_fwd, rho_fwd,
                 p_fwd_bck, p_fwd_fwd, lw_sub) = self._build(depth, z_fwd, 1.0, h0)
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_fwd, ps_bck_fwd
                (ok, z_bck, z_prop, ps_bck_fwd, ps_bck_bck, rho_bck,
                 p_bck_fwd, p_bck_bck, lw_sub) = self._build(depth, z_bck, -1.0, h0)
            if not ok:
                break
            depth += 1
            if lw_sub > lw:
                z_sample = z_prop
            elif self.gen.uniform() < math.exp(lw_sub - lw):
                z_sample = z_prop
            lw = _logaddexp(lw, lw_sub)
            rho = rho_bck + rho_fwd
            persist = (self._criterion(ps_bck_bck, ps_fwd_fwd, rho)
                       and self._criterion(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
                       and self._criterion(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd))
            if not persist:
                break
        self.q, p, self.lp, self.g = z_sample
        accept = self.sum_metro / self.n_leapfrog
        return accept, self.hamiltonian(self.lp, p), depth
