"""Derivative-free minimization and finite-difference derivatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NelderMeadControl:
    """Stopping rules for :func:`nelder_mead`.

    The search stops when the spread of function values over the simplex is
    at most ``ftol_abs``, or when every vertex lies within
    ``xtol_rel * max(1, |x_best|)`` of the best vertex, or after ``maxfun``
    evaluations.  The defaults follow lme4's ``Nelder_Mead`` settings.
    """

    ftol_abs: float = 1e-5
    xtol_rel: float = 1e-7
    maxfun: int = 10_000
    restarts: int = 1


@dataclass
class NelderMeadResult:
    x: np.ndarray
    fun: float
    nfev: int
    status: str  # "ftol", "xtol" or "maxfun"

    @property
    def success(self) -> bool:
        return self.status != "maxfun"


def fold(x: np.ndarray, lower_zero: np.ndarray) -> np.ndarray:
    """Map an unconstrained point into the box by reflecting bounded coordinates at 0."""
    out = np.array(x, dtype=float)
    out[lower_zero] = np.abs(out[lower_zero])
    return out


def _nm_run(f, x0, step, ctl: NelderMeadControl, budget: int):
    n = x0.shape[0]
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for i in range(n):
        sim[i + 1] = x0
        sim[i + 1, i] += step[i]
    fs = np.array([f(v) for v in sim])
    nfev = n + 1
    status = "maxfun"
    while nfev < budget:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if fs[-1] - fs[0] <= ctl.ftol_abs:
            status = "ftol"
            break
        if np.max(np.abs(sim[1:] - sim[0])) <= ctl.xtol_rel * max(1.0, np.max(np.abs(sim[0]))):
            status = "xtol"
            break
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = f(xr)
        nfev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = f(xe)
            nfev += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
        elif fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
        else:
            if fr < fs[-1]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (sim[-1] - centroid)
            fc = f(xc)
            nfev += 1
            if fc < min(fr, fs[-1]):
                sim[-1], fs[-1] = xc, fc
            else:
                # shrink towards the best vertex
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fs[i] = f(sim[i])
                nfev += n
    best = int(np.argmin(fs))
    return sim[best].copy(), float(fs[best]), nfev, status


def nelder_mead(f, x0, step, lower_zero=None, control: NelderMeadControl | None = None) -> NelderMeadResult:
    """Minimize ``f`` with Nelder-Mead; coordinates flagged in ``lower_zero`` are kept >= 0 by folding.

    After the first run the search is restarted from its optimum with the
    initial step sizes (``control.restarts`` times) within the same
    evaluation budget.
    """
    ctl = control or NelderMeadControl()
    x0 = np.asarray(x0, dtype=float)
    step = np.asarray(step, dtype=float)
    if lower_zero is None:
        lower_zero = np.zeros(x0.shape[0], dtype=bool)
    lower_zero = np.asarray(lower_zero, dtype=bool)

    def g(x):
        v = f(fold(x, lower_zero))
        return v if np.isfinite(v) else np.inf

    x, fun, used, status = _nm_run(g, x0, step, ctl, ctl.maxfun)
    for _ in range(ctl.restarts):
        if status == "maxfun":
            break
        x2, fun2, n2, status = _nm_run(g, x, step, ctl, ctl.maxfun - used)
        used += n2
        if fun2 <= fun:
            x, fun = x2, fun2
    return NelderMeadResult(fold(x, lower_zero), fun, used, status)


def fd_step(x: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, np.abs(x)) * np.finfo(float).eps ** (1.0 / 3.0)


def fd_gradient(f, x) -> np.ndarray:
    """Central-difference gradient with steps ``max(1, |x_i|) * eps^(1/3)``."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x)
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (f(xp) - f(xm)) / (2.0 * h[i])
    return g


def fd_hessian(f, x, delta: float = 1e-4, f0: float | None = None) -> np.ndarray:
    """Central second differences with relative step ``delta``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = delta * np.maximum(1.0, np.abs(x))
    f0 = f(x) if f0 is None else f0
    H = np.empty((n, n))
    fp = np.empty(n)
    fm = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        fp[i], fm[i] = f(x + e), f(x - e)
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / h[i] ** 2
    for i in range(n):
        for j in range(i):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i], ej[j] = h[i], h[j]
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H
