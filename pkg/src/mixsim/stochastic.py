"""Seedable sampling primitives.

Every random draw in the package goes through an :class:`RngStream`, a thin
wrapper over numpy's PCG64 bit generator keyed by ``(seed, stream_id)``
through :class:`numpy.random.SeedSequence`.  Distinct stream ids give
independent substreams, so each simulation (and each MCMC chain) owns its
own stream and results do not depend on scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "InvalidParameterError",
    "RngStream",
    "CholeskyCorrelation",
    "sample_dirichlet",
    "sample_lkj_cholesky",
    "sample_mvnormal",
    "sample_poisson_min1",
    "corr_cholesky_from_cpcs",
]

_MASK64 = (1 << 64) - 1


class InvalidParameterError(ValueError):
    """A distribution parameter is outside its support."""


@dataclass
class RngStream:
    """Independent random stream keyed by ``(seed, stream_id, domain)``.

    ``domain`` separates families of streams that share an id space (for
    example data generation and MCMC chains); domain 0 is the default.
    """

    seed: int
    stream_id: int = 0
    domain: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not all(0 <= v <= _MASK64 for v in (self.seed, self.stream_id, self.domain)):
            raise ValueError("seed, stream_id and domain must be 64-bit unsigned integers")
        key = (self.stream_id,) if self.domain == 0 else (self.stream_id, self.domain)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high, size=None):
        """Uniform integers on the closed range ``[low, high]``."""
        return self.gen.integers(low, high, size=size, endpoint=True)


@dataclass(frozen=True)
class CholeskyCorrelation:
    """Lower-triangular Cholesky factor of a correlation matrix."""

    L: np.ndarray

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def corr(self) -> np.ndarray:
        return self.L @ self.L.T


def sample_dirichlet(alpha, rng: RngStream) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size < 2:
        raise InvalidParameterError("alpha must be a vector of length >= 2")
    if not np.all(alpha > 0) or not np.all(np.isfinite(alpha)):
        raise InvalidParameterError("alpha components must be positive and finite")
    g = rng.gen.standard_gamma(alpha)
    # all-zero gammas are only reachable for tiny alpha; resample to stay on the open simplex
    while not np.all(g > 0):
        g = rng.gen.standard_gamma(alpha)
    return g / g.sum()


def corr_cholesky_from_cpcs(cpcs: np.ndarray, dim: int) -> np.ndarray:
    """Build the correlation Cholesky factor from canonical partial correlations.

    ``cpcs`` is ordered row by row over the strict lower triangle
    ``(1,0), (2,0), (2,1), (3,0), ...``.  Row ``i`` is filled left to right,
    each entry taking a share ``cpc`` of the squared norm left in the row.
    """
    L = np.zeros((dim, dim))
    L[0, 0] = 1.0
    pos = 0
    for i in range(1, dim):
        remaining = 1.0
        for j in range(i):
            L[i, j] = cpcs[pos] * np.sqrt(remaining)
            remaining -= L[i, j] ** 2
            pos += 1
        L[i, i] = np.sqrt(max(remaining, 0.0))
    return L


def sample_lkj_cholesky(dim: int, eta: float, rng: RngStream) -> CholeskyCorrelation:
    """Draw the Cholesky factor of an LKJ(eta) correlation matrix.

    Uses the vine construction: the partial correlation of the pair
    ``(i, j)`` given variables ``0..j-1`` is ``2*Beta(b, b) - 1`` with
    ``b = eta + (dim - 2 - j)/2``.
    """
    if int(dim) != dim or dim < 1:
        raise InvalidParameterError("dim must be a positive integer")
    if not eta > 0:
        raise InvalidParameterError("eta must be positive")
    dim = int(dim)
    if dim == 1:
        return CholeskyCorrelation(np.ones((1, 1)))
    cpcs = np.empty(dim * (dim - 1) // 2)
    pos = 0
    for i in range(1, dim):
        for j in range(i):
            b = eta + (dim - 2 - j) / 2.0
            cpcs[pos] = 2.0 * rng.gen.beta(b, b) - 1.0
            pos += 1
    return CholeskyCorrelation(corr_cholesky_from_cpcs(cpcs, dim))


def sample_mvnormal(mu, scale, rng: RngStream) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if scale.ndim != 2 or scale.shape[0] != scale.shape[1] or scale.shape[0] != mu.shape[0]:
        raise ValueError(f"scale shape {scale.shape} does not match mean of length {mu.shape[0]}")
    return mu + scale @ rng.normal(mu.shape[0])


def sample_poisson_min1(lam: float, rng: RngStream) -> int:
    """``max(Poisson(lam), 1)`` by sequential inversion of the CDF.

    Inversion uses one uniform per draw, which keeps the stream consumption
    fixed.  Adequate for the moderate rates used here (lam <= ~100).
    """
    if not lam > 0 or not np.isfinite(lam):
        raise InvalidParameterError("lambda must be positive")
    u = rng.gen.random()
    k = 0
    p = np.exp(-lam)
    cdf = p
    while u > cdf and p > 0:
        k += 1
        p *= lam / k
        cdf += p
    return max(k, 1)
