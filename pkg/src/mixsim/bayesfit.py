"""Bayesian mixed-effects model, No-U-Turn sampling and MCMC diagnostics.

The model is non-centered.  Per grouping factor with ``k`` effects, the
sampler sees ``log sigma`` (k), unconstrained correlation parameters
(``k(k-1)/2``, mapped through ``tanh`` to canonical partial correlations)
and unit-scale effects ``z``; the group effects are
``gamma_g = diag(sigma) L z_g``.  Priors::

    beta_j  ~ N(0, 2)
    sigma_j ~ half-N(0, 1)
    Omega   ~ LKJ(2)
    z       ~ N(0, 1)
    sigma_eps ~ half-N(0, 0.5)      (gaussian only)
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

from mixsim import _kernels_py, kernels
from mixsim.design import ModelMatrices
from mixsim.diagnostics import ConvergenceStatus, Reason, estimate_vector
from mixsim.stochastic import RngStream
from mixsim.truemodel import Family

BETA_SD = 2.0
SIGMA_SD = 1.0
LKJ_ETA = 2.0
SIGMA_EPS_SD = 0.5
MAX_DELTA_H = 1000.0
RHAT_THRESHOLD = 1.1
CHAIN_DOMAIN = 1
CHAINS_PER_SIM = 16

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_TERM_NAMES = ("beta_prior", "sigma_prior", "corr_prior", "z_prior", "sigma_eps_prior", "likelihood")


class NonFiniteDensityError(FloatingPointError):
    """The log posterior or its gradient is not finite; ``component`` names the culprit."""

    def __init__(self, component: str):
        super().__init__(f"non-finite log density in component {component!r}")
        self.component = component


@dataclass(frozen=True)
class NutsConfig:
    chains: int = 3
    warmup: int = 1000
    draws: int = 1000
    delta: float = 0.99
    max_depth: int = 10
    init_radius: float = 2.0
    max_init_tries: int = 100

    def __post_init__(self):
        if self.chains < 1 or self.draws < 1 or self.warmup < 0:
            raise ValueError("chains and draws must be >= 1, warmup >= 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


# ---------------------------------------------------------------------------
# correlation Cholesky transform


def lkj_log_normalizer(eta: float, dim: int) -> float:
    """Log normalizing constant of the LKJ(eta) density over ``dim x dim`` correlations."""
    out = 0.0
    for k in range(1, dim):
        b = eta + (dim - k - 1) / 2.0
        out -= (dim - k) * ((2.0 * b - 1.0) * math.log(2.0) + betaln(b, b))
    return out


def corr_cholesky_transform(raw, dim: int, eta: float = LKJ_ETA):
    """Map unconstrained values to a correlation Cholesky factor, with LKJ log density.

    ``raw`` is ordered row by row over the strict lower triangle.  Returns
    ``(L, dL, lp, dlp)`` where ``dL[m]`` is the derivative of ``L`` with
    respect to ``raw[m]`` and ``lp`` is the normalized LKJ(eta) log density
    of ``L L'`` plus the log-Jacobian of the map from ``raw``.
    """
    L, dL, lp, dlp = _kernels_py.corr_cholesky_transform(np.asarray(raw, dtype=float), dim, eta)
    return L, dL, lp + lkj_log_normalizer(eta, dim), dlp


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class FactorLayout:
    name: str
    k: int
    n_groups: int
    log_sigma: slice
    cpc: slice
    z: slice
    gamma_offset: int


@dataclass
class UnconstrainedParams:
    """Sampler coordinates, split by role."""

    beta: np.ndarray
    log_sigma: dict[str, np.ndarray]
    omega_chol_raw: dict[str, np.ndarray]
    z: np.ndarray
    log_sigma_eps: float | None = None


class BayesModel:
    """Log posterior of a mixed model on the unconstrained scale.

    Gaussian responses are standardized (mean 0, sample SD 1) unless
    ``standardize`` is false.
    """

    def __init__(self, matrices: ModelMatrices, y, family, standardize: bool = True):
        self.family = Family(family)
        self.gaussian = self.family is Family.GAUSSIAN
        y = np.asarray(y, dtype=float)
        if y.shape[0] != matrices.n:
            raise ValueError("response length does not match the design")
        if self.gaussian and standardize and y.shape[0] > 1:
            sd = y.std(ddof=1)
            y = (y - y.mean()) / (sd if sd > 0 else 1.0)
        self.y = np.ascontiguousarray(y)
        self.X = np.ascontiguousarray(matrices.X, dtype=float)
        self.zind, self.zval = matrices.re.ell()
        self.matrices = matrices
        self.p = matrices.p
        self.q = matrices.q
        pos = self.p
        layouts = []
        for f in matrices.re.factors:
            k = f.k
            ls = slice(pos, pos + k)
            pos += k
            cp = slice(pos, pos + k * (k - 1) // 2)
            pos = cp.stop
            layouts.append([f.name, k, f.n_groups, ls, cp])
        zpos = pos
        out = []
        for (name, k, G, ls, cp), off in zip(layouts, matrices.re.offsets()):
            out.append(FactorLayout(name, k, G, ls, cp, slice(zpos + off, zpos + off + G * k), off))
        self.factors = out
        self.z_slice = slice(zpos, zpos + self.q)
        self.dim = zpos + self.q + (1 if self.gaussian else 0)
        self._fam_code = 0 if self.gaussian else 1
        self._layout = np.array(
            [[f.k, f.n_groups, f.log_sigma.start, f.cpc.start, f.z.start, f.gamma_offset] for f in out],
            dtype=np.int64).reshape(-1, 6)
        self._const = (
            self.p * (-math.log(BETA_SD) - _LOG_SQRT_2PI)
            + sum(f.k for f in self.factors) * (math.log(2.0) - math.log(SIGMA_SD) - _LOG_SQRT_2PI)
            - self.q * _LOG_SQRT_2PI
            + ((math.log(2.0) - math.log(SIGMA_EPS_SD) - _LOG_SQRT_2PI) if self.gaussian else 0.0)
            + sum(lkj_log_normalizer(LKJ_ETA, f.k) for f in self.factors)
        )

    # packing -------------------------------------------------------------
    def pack(self, params: UnconstrainedParams) -> np.ndarray:
        x = np.empty(self.dim)
        x[:self.p] = params.beta
        for f in self.factors:
            x[f.log_sigma] = params.log_sigma[f.name]
            x[f.cpc] = params.omega_chol_raw.get(f.name, ())
        x[self.z_slice] = params.z
        if self.gaussian:
            if params.log_sigma_eps is None:
                raise ValueError("gaussian model needs log_sigma_eps")
            x[-1] = params.log_sigma_eps
        return x

    def unpack(self, x) -> UnconstrainedParams:
        x = np.asarray(x, dtype=float)
        return UnconstrainedParams(
            beta=x[:self.p].copy(),
            log_sigma={f.name: x[f.log_sigma].copy() for f in self.factors},
            omega_chol_raw={f.name: x[f.cpc].copy() for f in self.factors},
            z=x[self.z_slice].copy(),
            log_sigma_eps=float(x[-1]) if self.gaussian else None,
        )

    # density -------------------------------------------------------------
    def _evaluate(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}")
        return kernels.bayes_logpost_grad(
            x, self.X, self.zind, self.zval, self.y, self._fam_code, self._layout,
            LKJ_ETA, BETA_SD, SIGMA_SD, SIGMA_EPS_SD)

    def log_prob_grad(self, x):
        """``(log density, gradient)``; may be non-finite (the sampler treats that as divergence)."""
        with np.errstate(all="ignore"):
            lp, grad, _ = self._evaluate(x)
        return lp + self._const, grad

    def target(self):
        """Backend target object: callable ``x -> (lp, grad)`` usable by the NUTS engine."""
        return kernels.MixedModelTarget(
            self.dim, self.X, self.zind, self.zval, self.y, self._fam_code, self._layout,
            LKJ_ETA, BETA_SD, SIGMA_SD, SIGMA_EPS_SD, self._const)

    def log_prob_terms(self, x) -> dict[str, float]:
        """Log density split by component, constants included."""
        with np.errstate(all="ignore"):
            _, _, terms = self._evaluate(x)
        out = dict(zip(_TERM_NAMES, (float(t) for t in terms)))
        if not self.gaussian:
            del out["sigma_eps_prior"]
        out["constant"] = self._const
        return out

    def checked_log_prob_grad(self, x):
        lp, grad = self.log_prob_grad(x)
        if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
            for name, val in self.log_prob_terms(x).items():
                if not np.isfinite(val):
                    raise NonFiniteDensityError(name)
            raise NonFiniteDensityError("gradient")
        return lp, grad

    # constrained quantities ----------------------------------------------
    def constrain(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        out = {"beta": x[:self.p].copy(), "sigma": {}, "L": {}, "omega": {}, "z": {}}
        gamma = np.empty(self.q)
        for f in self.factors:
            sigma = np.exp(x[f.log_sigma])
            L = _kernels_py.corr_cholesky_transform(x[f.cpc], f.k, LKJ_ETA)[0]
            zb = x[f.z].reshape(f.n_groups, f.k)
            out["sigma"][f.name] = sigma
            out["L"][f.name] = L
            out["omega"][f.name] = L @ L.T
            out["z"][f.name] = zb.copy()
            gamma[f.gamma_offset:f.gamma_offset + f.n_groups * f.k] = (zb @ (sigma[:, None] * L).T).ravel()
        out["gamma"] = gamma
        out["sigma_eps"] = float(np.exp(x[-1])) if self.gaussian else None
        return out

    def summary_vector(self, x) -> dict[str, float]:
        c = self.constrain(x)
        return estimate_vector(c["beta"], c["sigma"], c["omega"], c["sigma_eps"])

    def summary_names(self) -> list[str]:
        return list(self.summary_vector(np.zeros(self.dim)))


def log_posterior_and_gradient(params: UnconstrainedParams, matrices: ModelMatrices, y, family):
    """Log posterior (priors, likelihood and Jacobians) and its gradient at ``params``.

    Raises :class:`NonFiniteDensityError` naming the offending component if
    any term is not finite.
    """
    model = BayesModel(matrices, y, family)
    return model.checked_log_prob_grad(model.pack(params))


# ---------------------------------------------------------------------------
# NUTS


class _DualAveraging:
    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, delta: float, eps: float):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def learn(self, accept: float) -> float:
        self.counter += 1
        accept = min(1.0, accept)
        w = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - w) * self.s_bar + w * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        xw = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - xw) * self.x_bar + xw * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class _VarianceWindows:
    """Expanding-window schedule for the diagonal metric (75 / 25 doubling / 50)."""

    def __init__(self, warmup: int, init_buffer=75, term_buffer=50, base_window=25):
        self.warmup = warmup
        self.enabled = warmup >= 20
        if init_buffer + base_window + term_buffer > warmup:
            init_buffer = int(0.15 * warmup)
            term_buffer = int(0.1 * warmup)
            base_window = warmup - (init_buffer + term_buffer)
        self.init_buffer, self.term_buffer = init_buffer, term_buffer
        self.counter = 0
        self.window_size = base_window
        self.next_window = init_buffer + base_window - 1
        self._reset()

    def _reset(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def _in_window(self) -> bool:
        return (self.counter >= self.init_buffer and self.counter < self.warmup - self.term_buffer
                and self.counter != self.warmup)

    def _end_window(self) -> bool:
        return self.counter == self.next_window and self.counter != self.warmup

    def _next(self):
        last = self.warmup - self.term_buffer - 1
        if self.next_window == last:
            return
        self.window_size *= 2
        self.next_window = self.counter + self.window_size
        if self.next_window != last and self.next_window + 2 * self.window_size >= self.warmup - self.term_buffer:
            self.next_window = last

    def learn(self, q: np.ndarray):
        """Record a draw; returns the new inverse metric at a window end, else ``None``."""
        if not self.enabled:
            return None
        if self._in_window():
            self.n += 1
            if self.mean is None:
                self.mean = np.zeros_like(q)
                self.m2 = np.zeros_like(q)
            d = q - self.mean
            self.mean += d / self.n
            self.m2 += d * (q - self.mean)
        if self._end_window():
            self._next()
            n = self.n
            var = self.m2 / (n - 1.0)
            var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            self._reset()
            self.counter += 1
            return var
        self.counter += 1
        return None


@dataclass
class PosteriorChains:
    """Post-warmup draws.

    ``draws`` is ``chain x draw x parameter`` on the constrained scale with
    columns named by ``names``: the summary parameters followed by the
    unit-scale effects ``z``.  ``unconstrained`` holds the raw sampler
    coordinates for the same draws.
    """

    names: list[str]
    draws: np.ndarray
    unconstrained: np.ndarray
    divergences: np.ndarray
    energies: np.ndarray
    stepsizes: np.ndarray
    treedepths: np.ndarray
    n_summary: int = 0
    n_leapfrog: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def to_csv(self, path):
        """Long-format dump: ``chain, draw, parameter, value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "draw", "parameter", "value"])
            for c in range(self.n_chains):
                for d in range(self.n_draws):
                    for j, name in enumerate(self.names):
                        w.writerow([c + 1, d + 1, name, repr(float(self.draws[c, d, j]))])


def _initial_point(f, dim, gen, radius, tries):
    for _ in range(tries):
        q = gen.uniform(-radius, radius, dim)
        lp, g = f(q)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return q, lp, g
    raise RuntimeError(f"no finite initial point after {tries} attempts")


def nuts_sample(f, dim: int, config: NutsConfig, rngs, transform=None):
    """Run NUTS chains on an arbitrary target ``f(x) -> (log density, gradient)``.

    ``rngs`` supplies one :class:`RngStream` per chain.  ``transform`` maps a
    raw draw to the stored vector (identity by default).
    """
    if len(rngs) != config.chains:
        raise ValueError("need one RngStream per chain")
    transform = transform or (lambda x: x)
    C, D = config.chains, config.draws
    raw = np.empty((C, D, dim))
    stored = None
    divs = np.zeros(C, dtype=int)
    energies = np.empty((C, D))
    depths = np.empty((C, D), dtype=int)
    steps = np.empty(C)
    n_leap = 0
    for c, rng in enumerate(rngs):
        gen = rng.gen
        q, lp, g = _initial_point(f, dim, gen, config.init_radius, config.max_init_tries)
        ch = kernels.NutsEngine(f, gen, q, lp, g, np.ones(dim), 1.0, config.max_depth, MAX_DELTA_H)
        ch.init_stepsize()
        da = _DualAveraging(config.delta, ch.eps)
        windows = _VarianceWindows(config.warmup)
        for it in range(config.warmup):
            accept, _, _ = ch.transition()
            n_leap += ch.n_leapfrog
            ch.eps = da.learn(accept)
            var = windows.learn(ch.q)
            if var is not None:
                ch.inv_metric = var
                ch.init_stepsize()
                da.restart(ch.eps)
        if config.warmup > 0:
            ch.eps = da.final()
        steps[c] = ch.eps
        for d in range(D):
            _, energy, depth = ch.transition()
            n_leap += ch.n_leapfrog
            divs[c] += ch.divergent
            energies[c, d] = energy
            depths[c, d] = depth
            raw[c, d] = ch.q
            v = transform(ch.q)
            if stored is None:
                stored = np.empty((C, D, len(v)))
            stored[c, d] = v
    return raw, stored, divs, energies, steps, depths, n_leap


def chain_streams(rng: RngStream, chains: int) -> list[RngStream]:
    """Per-chain streams ``stream_id * 16 + chain`` in the chain domain."""
    if chains > CHAINS_PER_SIM:
        raise ValueError(f"at most {CHAINS_PER_SIM} chains per simulation")
    return [RngStream(rng.seed, rng.stream_id * CHAINS_PER_SIM + c, domain=CHAIN_DOMAIN)
            for c in range(chains)]


def nuts_run(matrices: ModelMatrices, y, family, config: NutsConfig | None = None,
             rng: RngStream | None = None) -> PosteriorChains:
    """Sample the mixed-model posterior with NUTS."""
    config = config or NutsConfig()
    rng = rng or RngStream(0)
    model = BayesModel(matrices, y, family)
    names = model.summary_names()
    n_sum = len(names)
    z_names = [f"z[{i}]" for i in range(model.q)]

    def transform(x):
        return np.concatenate([np.fromiter(model.summary_vector(x).values(), float, n_sum), x[model.z_slice]])

    raw, stored, divs, energies, steps, depths, n_leap = nuts_sample(
        model.target(), model.dim, config, chain_streams(rng, config.chains), transform)
    return PosteriorChains(names + z_names, stored, raw, divs, energies, steps, depths,
                           n_summary=n_sum, n_leapfrog=n_leap,
                           meta={"family": model.family.value, "config": config.__dict__.copy()})


# ---------------------------------------------------------------------------
# diagnostics


def _as_draws(chains, index=None) -> np.ndarray:
    if isinstance(chains, PosteriorChains):
        arr = chains.draws if index is None else chains.draws[:, :, index]
    else:
        arr = np.asarray(chains, dtype=float)
        if index is not None:
            arr = arr[:, :, index]
    return arr


def split_rhat(chains, index=None) -> float:
    """Split potential scale reduction of one parameter (``chain x draw`` array or chains + index)."""
    x = _as_draws(chains, index)
    if x.ndim != 2:
        raise ValueError("expected a chain x draw array")
    m, n = x.shape
    if m < 2 or n < 4:
        raise ValueError("split R-hat needs >= 2 chains and >= 4 draws")
    half = n // 2
    parts = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    if np.ptp(parts) == 0:
        return 1.0
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = half * means.var(ddof=1)
    if W == 0:
        return math.inf
    var_plus = (half - 1) / half * W + B / half
    return float(math.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    return np.fft.irfft(f * np.conjugate(f), size)[:n] / n


def effective_sample_size(chains, index=None) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence."""
    x = _as_draws(chains, index)
    m, n = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws")
    if np.ptp(x) == 0:
        return float(m * n)
    acov = np.array([_autocov(c) for c in x])
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 4 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * rho[:max_t].sum() + rho[max_t]
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def mcse_mean(chains, index=None) -> float:
    x = _as_draws(chains, index)
    return float(x.std(ddof=1) / math.sqrt(effective_sample_size(x)))


def max_split_rhat(chains: PosteriorChains) -> float:
    return max(split_rhat(chains.draws[:, :, j]) for j in range(chains.draws.shape[2]))


def classify_bayes_convergence(chains: PosteriorChains, max_rhat: float | None = None) -> ConvergenceStatus:
    """Converged iff no post-warmup divergences and every split R-hat is below 1.1."""
    reasons = []
    if int(np.sum(chains.divergences)) > 0:
        reasons.append(Reason.DIVERGENT_TRANSITIONS)
    if max_rhat is None:
        max_rhat = max_split_rhat(chains)
    if not max_rhat < RHAT_THRESHOLD:
        reasons.append(Reason.RHAT)
    return ConvergenceStatus(reasons)


# ---------------------------------------------------------------------------
# fit summary


@dataclass
class BayesOutcome:
    family: str
    beta_hat: np.ndarray
    sigma_hat: dict[str, np.ndarray]
    omega_hat: dict[str, np.ndarray]
    sigma_eps_hat: float | None
    divergences: int
    max_rhat: float
    min_ess: float
    status: ConvergenceStatus
    stepsizes: list[float]
    n_leapfrog: int
    wall_time: float

    @property
    def converged(self) -> bool:
        return self.status.converged

    def estimates(self) -> dict[str, float]:
        return estimate_vector(self.beta_hat, self.sigma_hat, self.omega_hat, self.sigma_eps_hat)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "estimates": self.estimates(),
            "divergences": self.divergences,
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "convergence": self.status.to_dict(),
            "stepsizes": list(self.stepsizes),
            "n_leapfrog": self.n_leapfrog,
            "wall_time": self.wall_time,
        }


def fit_bayes(matrices: ModelMatrices, y, family, config: NutsConfig | None = None,
              rng: RngStream | None = None):
    """Sample the posterior and summarize it by posterior means.

    Returns ``(BayesOutcome, PosteriorChains)``.
    """
    t0 = time.perf_counter()
    chains = nuts_run(matrices, y, family, config, rng)
    model = BayesModel(matrices, y, family)
    means = chains.draws.reshape(-1, chains.draws.shape[2]).mean(axis=0)
    est = dict(zip(chains.names, means))
    beta = np.array([est[f"b{j}"] for j in range(model.p)])
    sigma, omega = {}, {}
    for f in model.factors:
        tag = "" if f.name == "subject" else f.name[0]
        sigma[f.name] = np.array([est[f"s{tag}{j}"] for j in range(f.k)])
        R = np.eye(f.k)
        for i in range(f.k):
            for j in range(i):
                R[i, j] = R[j, i] = est[f"r{tag}{j}{i}"]
        omega[f.name] = R
    max_rhat = max_split_rhat(chains)
    min_ess = min(effective_sample_size(chains.draws[:, :, j]) for j in range(chains.n_summary))
    status = classify_bayes_convergence(chains, max_rhat)
    out = BayesOutcome(
        family=Family(family).value, beta_hat=beta, sigma_hat=sigma, omega_hat=omega,
        sigma_eps_hat=float(est["sigma_eps"]) if model.gaussian else None,
        divergences=int(chains.divergences.sum()), max_rhat=max_rhat, min_ess=min_ess,
        status=status, stepsizes=[float(s) for s in chains.stepsizes],
        n_leapfrog=chains.n_leapfrog, wall_time=time.perf_counter() - t0)
    return out, chains
