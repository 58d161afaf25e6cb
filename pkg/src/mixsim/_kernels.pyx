# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Same signatures and semantics as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, fabs, tanh, isnan, INFINITY
from libc.string cimport memcpy, memset
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF MAXK = 16

cdef double HALF_LOG_2PI = 0.9189385332046727


cdef inline double log1pexp(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def mixed_loglik_grad(const double[:, ::1] X, const double[::1] beta,
                      const long[:, ::1] zind, const double[:, ::1] zval,
                      const double[::1] gamma, const double[::1] y,
                      int family, double sigma_eps):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], m = zind.shape[1]
    cdef Py_ssize_t i, j
    cdef double eta, d, r, ll = 0.0, rss = 0.0, inv_var = 0.0
    g_beta_arr = np.zeros(p)
    g_gamma_arr = np.zeros(gamma.shape[0])
    cdef double[::1] g_beta = g_beta_arr
    cdef double[::1] g_gamma = g_gamma_arr
    if family == 0:
        inv_var = 1.0 / (sigma_eps * sigma_eps)
    with nogil:
        for i in range(n):
            eta = 0.0
            for j in range(p):
                eta += X[i, j] * beta[j]
            for j in range(m):
                eta += zval[i, j] * gamma[zind[i, j]]
            if family == 0:
                r = y[i] - eta
                rss += r * r
                d = r * inv_var
            else:
                ll += y[i] * eta - log1pexp(eta)
                d = y[i] - sigmoid(eta)
            for j in range(p):
                g_beta[j] += X[i, j] * d
            for j in range(m):
                g_gamma[zind[i, j]] += zval[i, j] * d
    if family == 0:
        ll = -0.5 * rss * inv_var - n * (log(sigma_eps) + HALF_LOG_2PI)
        return ll, g_beta_arr, g_gamma_arr, rss * inv_var - n
    return ll, g_beta_arr, g_gamma_arr, 0.0


cdef int chol_inplace(double* A, Py_ssize_t k) nogil:
    """Lower Cholesky of a row-major k x k SPD matrix, in place.  Returns 0 on success."""
    cdef Py_ssize_t i, j, l
    cdef double s
    for j in range(k):
        s = A[j * k + j]
        for l in range(j):
            s -= A[j * k + l] * A[j * k + l]
        if not s > 0:
            return 1
        A[j * k + j] = sqrt(s)
        for i in range(j + 1, k):
            s = A[i * k + j]
            for l in range(j):
                s -= A[i * k + l] * A[j * k + l]
            A[i * k + j] = s / A[j * k + j]
        for i in range(j):
            A[i * k + j] = 0.0
    return 0


cdef void fwd_solve(const double* L, double* b, Py_ssize_t k) nogil:
    cdef Py_ssize_t i, l
    cdef double s
    for i in range(k):
        s = b[i]
        for l in range(i):
            s -= L[i * k + l] * b[l]
        b[i] = s / L[i * k + i]


cdef void bwd_solve(const double* L, double* b, Py_ssize_t k) nogil:
    """Solve L' x = b in place."""
    cdef Py_ssize_t i, l
    cdef double s
    for i in range(k - 1, -1, -1):
        s = b[i]
        for l in range(i + 1, k):
            s -= L[l * k + i] * b[l]
        b[i] = s / L[i * k + i]


def block_reml_terms(const double[:, ::1] lam, const double[:, :, ::1] ZtZ,
                     const double[:, :, ::1] ZtX, const double[:, ::1] Zty):
    cdef Py_ssize_t G = ZtZ.shape[0], k = lam.shape[0], p = ZtX.shape[2]
    cdef Py_ssize_t g, i, j, a, b
    cdef double s, logdet = 0.0, ctc = 0.0
    cdef double A[MAXK * MAXK]
    cdef double T[MAXK * MAXK]
    cdef double col[MAXK]
    if k > MAXK:
        raise ValueError("too many random effects per group")
    RtR_arr = np.zeros((p, p))
    Rtc_arr = np.zeros(p)
    R_arr = np.zeros((k, p))
    cdef double[:, ::1] RtR = RtR_arr
    cdef double[::1] Rtc = Rtc_arr
    cdef double[:, ::1] R = R_arr
    cdef int fail = 0
    with nogil:
        for g in range(G):
            # T = ZtZ_g lam
            for i in range(k):
                for j in range(k):
                    s = 0.0
                    for a in range(j, k):
                        s += ZtZ[g, i, a] * lam[a, j]
                    T[i * k + j] = s
            # A = lam' T + I
            for i in range(k):
                for j in range(k):
                    s = 0.0
                    for a in range(i, k):
                        s += lam[a, i] * T[a * k + j]
                    A[i * k + j] = s + (1.0 if i == j else 0.0)
            if chol_inplace(A, k):
                fail = 1
                break
            for i in range(k):
                logdet += 2.0 * log(A[i * k + i])
            # R = L^{-1} lam' ZtX_g, column by column
            for b in range(p):
                for i in range(k):
                    s = 0.0
                    for a in range(i, k):
                        s += lam[a, i] * ZtX[g, a, b]
                    col[i] = s
                fwd_solve(A, col, k)
                for i in range(k):
                    R[i, b] = col[i]
            for i in range(k):
                s = 0.0
                for a in range(i, k):
                    s += lam[a, i] * Zty[g, a]
                col[i] = s
            fwd_solve(A, col, k)
            for i in range(k):
                ctc += col[i] * col[i]
            for a in range(p):
                s = 0.0
                for i in range(k):
                    s += R[i, a] * col[i]
                Rtc[a] += s
                for b in range(a, p):
                    s = 0.0
                    for i in range(k):
                        s += R[i, a] * R[i, b]
                    RtR[a, b] += s
    if fail:
        raise np.linalg.LinAlgError("penalized cross-product block is not positive definite")
    for a in range(p):
        for b in range(a):
            RtR[a, b] = RtR[b, a]
    return logdet, RtR_arr, Rtc_arr, ctc


cdef double group_pdev(const double[::1] offset, const double[:, ::1] A,
                       const double[::1] y, const long[::1] order,
                       Py_ssize_t start, Py_ssize_t stop, const double* u,
                       Py_ssize_t k) nogil:
    cdef Py_ssize_t r, i, j
    cdef double eta, dev = 0.0
    for r in range(start, stop):
        i = order[r]
        eta = offset[i]
        for j in range(k):
            eta += A[i, j] * u[j]
        dev += -2.0 * (y[i] * eta - log1pexp(eta))
    for j in range(k):
        dev += u[j] * u[j]
    return dev


def block_pirls_logistic(const double[::1] offset, const double[:, ::1] zr,
                         const double[::1] y, const long[::1] order,
                         const long[::1] ptr, const double[:, ::1] lam,
                         double tol, int max_iter, int max_halvings):
    cdef Py_ssize_t n = offset.shape[0], k = lam.shape[0], G = ptr.shape[0] - 1
    cdef Py_ssize_t g, r, i, j, a, it, h
    cdef double s, eta, mu, w, pdev, new_pdev, t, change
    cdef double dev_total = 0.0, usq_total = 0.0, logdet = 0.0
    cdef double H[MAXK * MAXK]
    cdef double grad[MAXK]
    cdef double ucur[MAXK]
    cdef double unew[MAXK]
    cdef int ok = 1, max_it_used = 0, accepted
    if k > MAXK:
        raise ValueError("too many random effects per group")
    A_arr = np.asarray(zr) @ np.asarray(lam)
    cdef double[:, ::1] A = A_arr
    u_arr = np.zeros((G, k))
    cdef double[:, ::1] U = u_arr
    with nogil:
        for g in range(G):
            for j in range(k):
                ucur[j] = 0.0
            pdev = group_pdev(offset, A, y, order, ptr[g], ptr[g + 1], ucur, k)
            it = 0
            while True:
                if it >= max_iter:
                    ok = 0
                    break
                it += 1
                for j in range(k * k):
                    H[j] = 0.0
                for j in range(k):
                    grad[j] = -ucur[j]
                for r in range(ptr[g], ptr[g + 1]):
                    i = order[r]
                    eta = offset[i]
                    for j in range(k):
                        eta += A[i, j] * ucur[j]
                    mu = sigmoid(eta)
                    w = mu * (1.0 - mu)
                    for j in range(k):
                        grad[j] += (y[i] - mu) * A[i, j]
                        for a in range(j + 1):
                            H[j * k + a] += w * A[i, j] * A[i, a]
                for j in range(k):
                    H[j * k + j] += 1.0
                    for a in range(j + 1, k):
                        H[j * k + a] = H[a * k + j]
                if chol_inplace(H, k):
                    ok = 0
                    break
                fwd_solve(H, grad, k)
                bwd_solve(H, grad, k)
                t = 1.0
                accepted = 0
                for h in range(max_halvings + 1):
                    for j in range(k):
                        unew[j] = ucur[j] + t * grad[j]
                    new_pdev = group_pdev(offset, A, y, order, ptr[g], ptr[g + 1], unew, k)
                    if not (new_pdev > pdev * (1.0 + 1e-15) + 1e-12):
                        accepted = 1
                        break
                    t *= 0.5
                if not accepted:
                    ok = 0
                    break
                change = fabs(pdev - new_pdev) / (fabs(new_pdev) + 0.1)
                for j in range(k):
                    ucur[j] = unew[j]
                pdev = new_pdev
                if change < tol:
                    break
            if it > max_it_used:
                max_it_used = it
            # Laplace terms at the mode
            for j in range(k * k):
                H[j] = 0.0
            for r in range(ptr[g], ptr[g + 1]):
                i = order[r]
                eta = offset[i]
                for j in range(k):
                    eta += A[i, j] * ucur[j]
                mu = sigmoid(eta)
                w = mu * (1.0 - mu)
                for j in range(k):
                    for a in range(j + 1):
                        H[j * k + a] += w * A[i, j] * A[i, a]
            for j in range(k):
                H[j * k + j] += 1.0
                for a in range(j + 1, k):
                    H[j * k + a] = H[a * k + j]
            chol_inplace(H, k)
            s = 0.0
            for j in range(k):
                logdet += 2.0 * log(H[j * k + j])
                s += ucur[j] * ucur[j]
                U[g, j] = ucur[j]
            usq_total += s
            dev_total += pdev - s
    return u_arr, dev_total, usq_total, logdet, max_it_used, bool(ok)
# ---------------------------------------------------------------------------
# Bayesian mixed model: log posterior, gradient and a NUTS engine

DEF MAXC = 8
DEF MAXM = 28


cdef struct BayesData:
    const double* X
    const long* zind
    const double* zval
    const double* y
    const long* layout
    Py_ssize_t n, p, mz, nf, q, dim
    int family
    double eta, beta_sd, sigma_sd, sigma_eps_sd
    double* gamma
    double* g_gamma


cdef int corr_transform(const double* raw, Py_ssize_t k, double eta, double* L,
                        double* dL, double* lp, double* dlp) noexcept nogil:
    """Forward-mode tanh/CPC map; dL is m x k x k, row-major.  Returns 1 on a degenerate row."""
    cdef Py_ssize_t m = k * (k - 1) // 2
    cdef Py_ssize_t i, j, a, pos = 0
    cdef double ss, s, w, dw, coef
    cdef double dss[MAXM]
    for a in range(k * k):
        L[a] = 0.0
    for a in range(m * k * k):
        dL[a] = 0.0
    for a in range(m):
        dlp[a] = 0.0
    L[0] = 1.0
    lp[0] = 0.0
    for i in range(1, k):
        ss = 0.0
        for a in range(m):
            dss[a] = 0.0
        for j in range(i):
            w = tanh(raw[pos])
            dw = 1.0 - w * w
            lp[0] += log(dw)
            dlp[pos] -= 2.0 * w
            if j == 0:
                L[i * k] = w
                dL[pos * k * k + i * k] = dw
            else:
                s = sqrt(1.0 - ss)
                lp[0] += 0.5 * log(1.0 - ss)
                for a in range(m):
                    dlp[a] -= 0.5 * dss[a] / (1.0 - ss)
                    dL[a * k * k + i * k + j] = w * (-0.5 / s) * dss[a]
                L[i * k + j] = w * s
                dL[pos * k * k + i * k + j] += dw * s
            ss += L[i * k + j] * L[i * k + j]
            for a in range(m):
                dss[a] += 2.0 * L[i * k + j] * dL[a * k * k + i * k + j]
            pos += 1
        if not ss < 1.0:
            return 1
        L[i * k + i] = sqrt(1.0 - ss)
        coef = k - (i + 1) + 2.0 * eta - 2.0
        lp[0] += coef * log(L[i * k + i])
        for a in range(m):
            dL[a * k * k + i * k + i] = -0.5 * dss[a] / L[i * k + i]
            dlp[a] += coef * dL[a * k * k + i * k + i] / L[i * k + i]
    return 0


cdef int bayes_core(BayesData* d, const double* x, double* grad, double* terms) noexcept nogil:
    """Fill grad (dim) and terms (6); returns 1 if the correlation transform degenerates."""
    cdef Py_ssize_t dim = d.dim, n = d.n, p = d.p, mz = d.mz
    cdef Py_ssize_t f, i, j, a, b, g, k, G, lso, cpo, zo, go, m
    cdef double s, eta_i, r, dd, e, sigma_eps = 1.0, inv_var = 0.0, rss = 0.0, ll = 0.0, lp_c
    cdef double bsd2 = d.beta_sd * d.beta_sd
    cdef double L[MAXC * MAXC]
    cdef double dL[MAXM * MAXC * MAXC]
    cdef double dlp[MAXM]
    cdef double M[MAXC * MAXC]
    cdef double dM[MAXC * MAXC]
    cdef double sigma[MAXC]
    cdef const double* xr
    cdef const long* zr
    cdef const double* vr
    cdef double* gamma = d.gamma
    cdef double* g_gamma = d.g_gamma
    for j in range(6):
        terms[j] = 0.0
    for j in range(dim):
        grad[j] = 0.0
    for j in range(d.q):
        g_gamma[j] = 0.0
    for j in range(p):
        terms[0] -= 0.5 * x[j] * x[j] / bsd2
        grad[j] = -x[j] / bsd2
    for f in range(d.nf):
        k = d.layout[6 * f]; G = d.layout[6 * f + 1]; lso = d.layout[6 * f + 2]
        cpo = d.layout[6 * f + 3]; zo = d.layout[6 * f + 4]; go = d.layout[6 * f + 5]
        m = k * (k - 1) // 2
        for a in range(k):
            sigma[a] = exp(x[lso + a])
            s = sigma[a] / d.sigma_sd
            terms[1] += x[lso + a] - 0.5 * s * s
            grad[lso + a] = 1.0 - s * s
        if corr_transform(&x[cpo], k, d.eta, L, dL, &lp_c, dlp):
            return 1
        terms[2] += lp_c
        for a in range(m):
            grad[cpo + a] = dlp[a]
        for a in range(k):
            for b in range(k):
                M[a * k + b] = sigma[a] * L[a * k + b]
        for g in range(G):
            for a in range(k):
                s = 0.0
                for b in range(a + 1):
                    s += M[a * k + b] * x[zo + g * k + b]
                gamma[go + g * k + a] = s
                terms[3] -= 0.5 * x[zo + g * k + a] * x[zo + g * k + a]
                grad[zo + g * k + a] = -x[zo + g * k + a]
    if d.family == 0:
        sigma_eps = exp(x[dim - 1])
        s = sigma_eps / d.sigma_eps_sd
        terms[4] = x[dim - 1] - 0.5 * s * s
        grad[dim - 1] = 1.0 - s * s
        inv_var = 1.0 / (sigma_eps * sigma_eps)
    for i in range(n):
        xr = d.X + i * p
        zr = d.zind + i * mz
        vr = d.zval + i * mz
        eta_i = 0.0
        for j in range(p):
            eta_i += xr[j] * x[j]
        for j in range(mz):
            eta_i += vr[j] * gamma[zr[j]]
        if d.family == 0:
            r = d.y[i] - eta_i
            rss += r * r
            dd = r * inv_var
        else:
            # one exponential serves both log(1 + e^eta) and the logistic mean
            e = exp(-fabs(eta_i))
            if eta_i >= 0:
                ll += d.y[i] * eta_i - eta_i - log1p(e)
                dd = d.y[i] - 1.0 / (1.0 + e)
            else:
                ll += d.y[i] * eta_i - log1p(e)
                dd = d.y[i] - e / (1.0 + e)
        for j in range(p):
            grad[j] += xr[j] * dd
        for j in range(mz):
            g_gamma[zr[j]] += vr[j] * dd
    if d.family == 0:
        ll = -0.5 * rss * inv_var - n * (log(sigma_eps) + HALF_LOG_2PI)
        grad[dim - 1] += rss * inv_var - n
    terms[5] = ll
    for f in range(d.nf):
        k = d.layout[6 * f]; G = d.layout[6 * f + 1]; lso = d.layout[6 * f + 2]
        cpo = d.layout[6 * f + 3]; zo = d.layout[6 * f + 4]; go = d.layout[6 * f + 5]
        m = k * (k - 1) // 2
        for a in range(k):
            sigma[a] = exp(x[lso + a])
        corr_transform(&x[cpo], k, d.eta, L, dL, &lp_c, dlp)
        for a in range(k):
            for b in range(k):
                M[a * k + b] = sigma[a] * L[a * k + b]
                dM[a * k + b] = 0.0
        for g in range(G):
            for a in range(k):
                dd = g_gamma[go + g * k + a]
                for b in range(a + 1):
                    dM[a * k + b] += dd * x[zo + g * k + b]
                    grad[zo + g * k + b] += dd * M[a * k + b]
        for a in range(k):
            s = 0.0
            for b in range(a + 1):
                s += dM[a * k + b] * L[a * k + b]
            grad[lso + a] += s * sigma[a]
        for j in range(m):
            s = 0.0
            for a in range(k):
                for b in range(a + 1):
                    s += dL[j * k * k + a * k + b] * sigma[a] * dM[a * k + b]
            grad[cpo + j] += s
    return 0


cdef class MixedModelTarget:
    """Holds the model arrays and workspaces for repeated log-posterior evaluations."""

    cdef BayesData d
    cdef object _keep
    cdef double[::1] _gamma
    cdef double[::1] _g_gamma
    cdef double[::1] _terms
    cdef public double constant
    cdef public Py_ssize_t dim

    def __init__(self, Py_ssize_t dim, const double[:, ::1] X, const long[:, ::1] zind,
                 const double[:, ::1] zval, const double[::1] y, int family,
                 const long[:, ::1] layout, double eta, double beta_sd, double sigma_sd,
                 double sigma_eps_sd, double constant=0.0):
        cdef Py_ssize_t f, q = 0
        for f in range(layout.shape[0]):
            if layout[f, 0] > MAXC:
                raise ValueError("too many correlated effects per factor")
            q += layout[f, 0] * layout[f, 1]
        self._keep = (X, zind, zval, y, layout)
        self._gamma = np.empty(max(q, 1))
        self._g_gamma = np.empty(max(q, 1))
        self._terms = np.empty(6)
        self.dim = dim
        self.constant = constant
        self.d.n = X.shape[0]
        self.d.p = X.shape[1]
        self.d.mz = zind.shape[1]
        self.d.nf = layout.shape[0]
        self.d.q = q
        self.d.dim = dim
        self.d.family = family
        self.d.eta = eta
        self.d.beta_sd = beta_sd
        self.d.sigma_sd = sigma_sd
        self.d.sigma_eps_sd = sigma_eps_sd
        self.d.X = &X[0, 0] if X.shape[0] * X.shape[1] else NULL
        self.d.zind = &zind[0, 0] if zind.shape[0] * zind.shape[1] else NULL
        self.d.zval = &zval[0, 0] if zval.shape[0] * zval.shape[1] else NULL
        self.d.y = &y[0] if y.shape[0] else NULL
        self.d.layout = &layout[0, 0] if layout.shape[0] else NULL
        self.d.gamma = &self._gamma[0]
        self.d.g_gamma = &self._g_gamma[0]

    cdef double eval(self, const double* x, double* grad) noexcept nogil:
        cdef int j
        cdef double s = self.constant
        if bayes_core(&self.d, x, grad, &self._terms[0]):
            return INFINITY * 0.0
        for j in range(6):
            s += self._terms[j]
        return s

    def __call__(self, const double[::1] x):
        if x.shape[0] != self.dim:
            raise ValueError("wrong parameter length")
        g = np.empty(self.dim)
        cdef double[::1] gv = g
        cdef double lp = self.eval(&x[0], &gv[0])
        return lp, g


def bayes_logpost_grad(const double[::1] x, const double[:, ::1] X,
                       const long[:, ::1] zind, const double[:, ::1] zval,
                       const double[::1] y, int family, const long[:, ::1] layout,
                       double eta, double beta_sd, double sigma_sd, double sigma_eps_sd):
    cdef MixedModelTarget t = MixedModelTarget(x.shape[0], X, zind, zval, y, family, layout,
                                               eta, beta_sd, sigma_sd, sigma_eps_sd)
    grad = np.empty(x.shape[0])
    cdef double[::1] gv = grad
    cdef int bad = bayes_core(&t.d, &x[0], &gv[0], &t._terms[0])
    terms = np.asarray(t._terms).copy()
    if bad:
        nan = float("nan")
        terms[2] = nan
        return nan, np.full(x.shape[0], nan), terms
    return float(terms.sum()), grad, terms


cdef inline double logaddexp(double a, double b) noexcept nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef class NutsEngine:
    """Compiled NUTS chain state; same interface and random-number usage as the Python engine.

    The target is either a :class:`MixedModelTarget` (evaluated without
    entering Python) or any callable ``f(x) -> (lp, grad)``.
    """

    cdef object target_py
    cdef MixedModelTarget target_c
    cdef public object gen
    cdef public double eps
    cdef public int max_depth
    cdef public long n_leapfrog
    cdef public double sum_metro
    cdef public bint divergent
    cdef public double max_delta_h
    cdef public double lp
    cdef Py_ssize_t dim
    cdef double[::1] _q, _g, _im
    cdef double[::1] cq, cp, cg
    cdef double clp
    # transition buffers
    cdef double[:, ::1] W
    # per-level recursion buffers: [level, slot, dim]
    cdef double[:, :, ::1] R
    cdef double[::1] Rlp

    def __init__(self, target, gen, q, double lp, g, inv_metric, double eps, int max_depth,
                 double max_delta_h=1000.0):
        if isinstance(target, MixedModelTarget):
            self.target_c = target
            self.target_py = None
        else:
            self.target_c = None
            self.target_py = target
        self.gen = gen
        self.dim = len(q)
        self._q = np.array(q, dtype=float)
        self._g = np.array(g, dtype=float)
        self._im = np.array(inv_metric, dtype=float)
        self.lp = lp
        self.eps = eps
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h
        self.cq = np.empty(self.dim)
        self.cp = np.empty(self.dim)
        self.cg = np.empty(self.dim)
        self.W = np.zeros((24, self.dim))
        self.R = np.zeros((max_depth + 1, 12, self.dim))
        self.Rlp = np.zeros(max_depth + 1)

    property q:
        def __get__(self):
            return np.asarray(self._q).copy()

    property g:
        def __get__(self):
            return np.asarray(self._g).copy()

    property inv_metric:
        def __get__(self):
            return np.asarray(self._im).copy()

        def __set__(self, value):
            self._im = np.array(value, dtype=float)

    cdef double evaluate(self, double* q, double* g):
        cdef Py_ssize_t i
        cdef double lp
        if self.target_c is not None:
            lp = self.target_c.eval(q, g)
        else:
            arr = np.asarray(<double[:self.dim]> q).copy()
            try:
                res = self.target_py(arr)
                lp = float(res[0])
                gg = np.asarray(res[1], dtype=float)
                for i in range(self.dim):
                    g[i] = gg[i]
            except Exception:
                lp = -INFINITY
        if not (lp > -INFINITY and lp < INFINITY):
            lp = -INFINITY
        else:
            for i in range(self.dim):
                if not (g[i] > -INFINITY and g[i] < INFINITY):
                    lp = -INFINITY
                    break
        if lp == -INFINITY:
            for i in range(self.dim):
                g[i] = 0.0
        return lp

    cdef void leapfrog(self, double eps):
        """Advance the current point (cq, cp, cg, clp) by one step."""
        cdef Py_ssize_t i
        for i in range(self.dim):
            self.cp[i] += 0.5 * eps * self.cg[i]
        for i in range(self.dim):
            self.cq[i] += eps * self._im[i] * self.cp[i]
        self.clp = self.evaluate(&self.cq[0], &self.cg[0])
        for i in range(self.dim):
            self.cp[i] += 0.5 * eps * self.cg[i]

    cdef double hamiltonian(self, double lp, double* p):
        cdef Py_ssize_t i
        cdef double k = 0.0, h
        for i in range(self.dim):
            k += self._im[i] * p[i] * p[i]
        h = -lp + 0.5 * k
        return INFINITY if isnan(h) else h

    cdef void sample_momentum(self, double* p):
        z = self.gen.standard_normal(self.dim) / np.sqrt(np.asarray(self._im))
        cdef double[::1] zv = z
        cdef Py_ssize_t i
        for i in range(self.dim):
            p[i] = zv[i]

    cdef inline void copy(self, double* dst, const double* src):
        memcpy(dst, src, self.dim * sizeof(double))

    cdef bint criterion(self, const double* ps_minus, const double* ps_plus, const double* rho):
        cdef Py_ssize_t i
        cdef double a = 0.0, b = 0.0
        for i in range(self.dim):
            a += ps_plus[i] * rho[i]
            b += ps_minus[i] * rho[i]
        return a > 0 and b > 0

    cdef double delta_h(self):
        self.copy(&self.cq[0], &self._q[0])
        self.copy(&self.cg[0], &self._g[0])
        self.clp = self.lp
        self.sample_momentum(&self.cp[0])
        cdef double h0 = self.hamiltonian(self.lp, &self.cp[0])
        self.leapfrog(self.eps)
        cdef double h = self.hamiltonian(self.clp, &self.cp[0]) if self.clp > -INFINITY else INFINITY
        return h0 - h

    def init_stepsize(self):
        """Double or halve the step until one leapfrog step's acceptance crosses 0.8."""
        if self.eps == 0 or self.eps > 1e7 or not (self.eps < INFINITY):
            return
        cdef double log08 = log(0.8), dh
        cdef int direction = 1 if self.delta_h() > log08 else -1
        while True:
            dh = self.delta_h()
            if direction == 1 and not dh > log08:
                break
            if direction == -1 and not dh < log08:
                break
            self.eps = self.eps * 2.0 if direction == 1 else self.eps * 0.5
            if self.eps > 1e7:
                raise RuntimeError("step size diverged to infinity during initialization")
            if self.eps == 0:
                raise RuntimeError("step size collapsed to zero during initialization")

    cdef bint build(self, int depth, double* zq, double* zp, double* zg, double* zlp,
                    double* ps_beg, double* ps_end, double* rho, double* p_beg, double* p_end,
                    double h0, double sign, double* lw):
        cdef Py_ssize_t i
        cdef double h, w
        if depth == 0:
            self.leapfrog(sign * self.eps)
            self.n_leapfrog += 1
            h = self.hamiltonian(self.clp, &self.cp[0]) if self.clp > -INFINITY else INFINITY
            if h - h0 > self.max_delta_h:
                self.divergent = True
            w = h0 - h
            lw[0] = logaddexp(lw[0], w)
            self.sum_metro += 1.0 if w > 0 else exp(w)
            self.copy(zq, &self.cq[0])
            self.copy(zp, &self.cp[0])
            self.copy(zg, &self.cg[0])
            zlp[0] = self.clp
            for i in range(self.dim):
                ps_beg[i] = self._im[i] * self.cp[i]
                ps_end[i] = ps_beg[i]
                rho[i] += self.cp[i]
                p_beg[i] = self.cp[i]
                p_end[i] = self.cp[i]
            return not self.divergent
        cdef double* ps_init_end = &self.R[depth, 0, 0]
        cdef double* p_init_end = &self.R[depth, 1, 0]
        cdef double* rho_init = &self.R[depth, 2, 0]
        cdef double* fq = &self.R[depth, 3, 0]
        cdef double* fp = &self.R[depth, 4, 0]
        cdef double* fg = &self.R[depth, 5, 0]
        cdef double* ps_final_beg = &self.R[depth, 6, 0]
        cdef double* p_final_beg = &self.R[depth, 7, 0]
        cdef double* rho_final = &self.R[depth, 8, 0]
        cdef double* tmp = &self.R[depth, 9, 0]
        cdef double lw_init = -INFINITY, lw_final = -INFINITY, lw_sub
        memset(rho_init, 0, self.dim * sizeof(double))
        if not self.build(depth - 1, zq, zp, zg, zlp, ps_beg, ps_init_end, rho_init, p_beg,
                          p_init_end, h0, sign, &lw_init):
            return False
        memset(rho_final, 0, self.dim * sizeof(double))
        if not self.build(depth - 1, fq, fp, fg, &self.Rlp[depth], ps_final_beg, ps_end, rho_final,
                          p_final_beg, p_end, h0, sign, &lw_final):
            return False
        lw_sub = logaddexp(lw_init, lw_final)
        lw[0] = logaddexp(lw[0], lw_sub)
        if lw_final > lw_sub or self.gen.uniform() < exp(lw_final - lw_sub):
            self.copy(zq, fq)
            self.copy(zp, fp)
            self.copy(zg, fg)
            zlp[0] = self.Rlp[depth]
        for i in range(self.dim):
            tmp[i] = rho_init[i] + rho_final[i]
            rho[i] += tmp[i]
        if not self.criterion(ps_beg, ps_end, tmp):
            return False
        for i in range(self.dim):
            tmp[i] = rho_init[i] + p_final_beg[i]
        if not self.criterion(ps_beg, ps_final_beg, tmp):
            return False
        for i in range(self.dim):
            tmp[i] = rho_final[i] + p_init_end[i]
        return self.criterion(ps_init_end, ps_end, tmp)

    def transition(self):
        """One NUTS transition with multinomial sampling; returns (accept_stat, energy, depth)."""
        cdef Py_ssize_t i, dim = self.dim
        cdef double* fwd_q = &self.W[0, 0]
        cdef double* fwd_p = &self.W[1, 0]
        cdef double* fwd_g = &self.W[2, 0]
        cdef double* bck_q = &self.W[3, 0]
        cdef double* bck_p = &self.W[4, 0]
        cdef double* bck_g = &self.W[5, 0]
        cdef double* s_q = &self.W[6, 0]
        cdef double* s_p = &self.W[7, 0]
        cdef double* s_g = &self.W[8, 0]
        cdef double* pr_q = &self.W[9, 0]
        cdef double* pr_p = &self.W[10, 0]
        cdef double* pr_g = &self.W[11, 0]
        cdef double* ps_fwd_fwd = &self.W[12, 0]
        cdef double* ps_fwd_bck = &self.W[13, 0]
        cdef double* ps_bck_fwd = &self.W[14, 0]
        cdef double* ps_bck_bck = &self.W[15, 0]
        cdef double* p_fwd_fwd = &self.W[16, 0]
        cdef double* p_fwd_bck = &self.W[17, 0]
        cdef double* p_bck_fwd = &self.W[18, 0]
        cdef double* p_bck_bck = &self.W[19, 0]
        cdef double* rho = &self.W[20, 0]
        cdef double* rho_fwd = &self.W[21, 0]
        cdef double* rho_bck = &self.W[22, 0]
        cdef double* tmp = &self.W[23, 0]
        cdef double fwd_lp, bck_lp, s_lp, pr_lp, h0, lw, lw_sub
        cdef int depth = 0
        cdef bint ok, persist
        self.sample_momentum(s_p)
        self.copy(s_q, &self._q[0])
        self.copy(s_g, &self._g[0])
        s_lp = self.lp
        h0 = self.hamiltonian(s_lp, s_p)
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False
        self.copy(fwd_q, s_q); self.copy(fwd_p, s_p); self.copy(fwd_g, s_g); fwd_lp = s_lp
        self.copy(bck_q, s_q); self.copy(bck_p, s_p); self.copy(bck_g, s_g); bck_lp = s_lp
        for i in range(dim):
            ps_fwd_fwd[i] = self._im[i] * s_p[i]
            ps_fwd_bck[i] = ps_fwd_fwd[i]
            ps_bck_fwd[i] = ps_fwd_fwd[i]
            ps_bck_bck[i] = ps_fwd_fwd[i]
            p_fwd_fwd[i] = s_p[i]
            p_fwd_bck[i] = s_p[i]
            p_bck_fwd[i] = s_p[i]
            p_bck_bck[i] = s_p[i]
            rho[i] = s_p[i]
        lw = 0.0
        while depth < self.max_depth:
            lw_sub = -INFINITY
            if self.gen.uniform() > 0.5:
                self.copy(rho_bck, rho)
                self.copy(p_bck_fwd, p_fwd_bck)
                self.copy(ps_bck_fwd, ps_fwd_bck)
                memset(rho_fwd, 0, dim * sizeof(double))
                self.copy(&self.cq[0], fwd_q); self.copy(&self.cp[0], fwd_p)
                self.copy(&self.cg[0], fwd_g); self.clp = fwd_lp
                ok = self.build(depth, pr_q, pr_p, pr_g, &pr_lp, ps_fwd_bck, ps_fwd_fwd, rho_fwd,
                                p_fwd_bck, p_fwd_fwd, h0, 1.0, &lw_sub)
                self.copy(fwd_q, &self.cq[0]); self.copy(fwd_p, &self.cp[0])
                self.copy(fwd_g, &self.cg[0]); fwd_lp = self.clp
            else:
                self.copy(rho_fwd, rho)
                self.copy(p_fwd_bck, p_bck_fwd)
                self.copy(ps_fwd_bck, ps_bck_fwd)
                memset(rho_bck, 0, dim * sizeof(double))
                self.copy(&self.cq[0], bck_q); self.copy(&self.cp[0], bck_p)
                self.copy(&self.cg[0], bck_g); self.clp = bck_lp
                ok = self.build(depth, pr_q, pr_p, pr_g, &pr_lp, ps_bck_fwd, ps_bck_bck, rho_bck,
                                p_bck_fwd, p_bck_bck, h0, -1.0, &lw_sub)
                self.copy(bck_q, &self.cq[0]); self.copy(bck_p, &self.cp[0])
                self.copy(bck_g, &self.cg[0]); bck_lp = self.clp
            if not ok:
                break
            depth += 1
            if lw_sub > lw or self.gen.uniform() < exp(lw_sub - lw):
                self.copy(s_q, pr_q); self.copy(s_p, pr_p); self.copy(s_g, pr_g); s_lp = pr_lp
            lw = logaddexp(lw, lw_sub)
            for i in range(dim):
                rho[i] = rho_bck[i] + rho_fwd[i]
            persist = self.criterion(ps_bck_bck, ps_fwd_fwd, rho)
            if persist:
                for i in range(dim):
                    tmp[i] = rho_bck[i] + p_fwd_bck[i]
                persist = self.criterion(ps_bck_bck, ps_fwd_bck, tmp)
            if persist:
                for i in range(dim):
                    tmp[i] = rho_fwd[i] + p_bck_fwd[i]
                persist = self.criterion(ps_bck_fwd, ps_fwd_fwd, tmp)
            if not persist:
                break
        self.copy(&self._q[0], s_q)
        self.copy(&self._g[0], s_g)
        self.lp = s_lp
        return self.sum_metro / self.n_leapfrog, self.hamiltonian(s_lp, s_p), depth
