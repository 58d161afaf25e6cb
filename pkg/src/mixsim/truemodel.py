"""Ground-truth parameters and response generation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from mixsim.design import ItemManipulation, ModelMatrices
from mixsim.stochastic import RngStream, sample_lkj_cholesky

EXTREME_LOGODDS = 5.0


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    LOGISTIC = "logistic"


@dataclass
class TrueModel:
    """True fixed effects and per-factor random-effect SDs and correlation factors.

    ``sigma`` and ``omega`` are keyed by grouping-factor name; ``omega`` holds
    the Cholesky factor of the correlation matrix.  ``gamma`` and ``eta``
    are filled in once the model is realized on a design.
    """

    family: Family
    beta: np.ndarray
    sigma: dict[str, np.ndarray]
    omega: dict[str, np.ndarray]
    sigma_eps: float | None = None
    gamma: np.ndarray | None = None
    eta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def cov(self, factor: str) -> np.ndarray:
        """Sigma_S = diag(sigma) Omega diag(sigma)."""
        s = self.sigma[factor]
        R = self.omega[factor] @ self.omega[factor].T
        return s[:, None] * R * s[None, :]

    def cov_cholesky(self, factor: str) -> np.ndarray:
        return self.sigma[factor][:, None] * self.omega[factor]

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "beta": self.beta.tolist(),
            "sigma": {k: v.tolist() for k, v in self.sigma.items()},
            "omega": {k: (v @ v.T).tolist() for k, v in self.omega.items()},
            "sigma_eps": self.sigma_eps,
        }


def _corr2(rho: float) -> np.ndarray:
    return np.array([[1.0, 0.0], [rho, np.sqrt(1.0 - rho * rho)]])


def sample_true_simple(family, h0_true: bool, item_manipulation, rng: RngStream) -> TrueModel:
    family = Family(family)
    item_manipulation = ItemManipulation(item_manipulation)
    beta = np.array([rng.uniform(-3.0, 3.0), 0.0 if h0_true else 0.8])
    if family is Family.GAUSSIAN:
        s_sub = np.sqrt(rng.uniform(0.0, 3.0, 2))
        rho_sub = rng.uniform(-0.8, 0.8)
        s_item = np.sqrt(rng.uniform(0.0, 3.0, 2))
        rho_item = rng.uniform(-0.8, 0.8)
    else:
        s_sub = np.array([rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.75)])
        rho_sub = rng.uniform(-0.9, 0.9)
        s_item = np.array([rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5)])
        rho_item = rng.uniform(-0.9, 0.9)
    sigma = {"subject": s_sub}
    omega = {"subject": _corr2(rho_sub)}
    if item_manipulation is ItemManipulation.WITHIN:
        sigma["item"] = s_item
        omega["item"] = _corr2(rho_item)
    else:
        sigma["item"] = s_item[:1]
        omega["item"] = np.ones((1, 1))
    sigma_eps = float(np.sqrt(rng.uniform(0.0, 3.0))) if family is Family.GAUSSIAN else None
    return TrueModel(family, beta, sigma, omega, sigma_eps)


def sample_true_complex(family, rng: RngStream) -> TrueModel:
    family = Family(family)
    beta = np.concatenate([[rng.uniform(-2.0, 2.0)], rng.uniform(-1.0, 1.0, 3)])
    sigma = np.concatenate([[rng.uniform(0.0, 1.0)], rng.uniform(0.0, 0.5, 3)])
    L = sample_lkj_cholesky(4, 1.0, rng).L
    sigma_eps = float(rng.uniform(0.0, 1.0)) if family is Family.GAUSSIAN else None
    return TrueModel(family, beta, {"subject": sigma}, {"subject": L}, sigma_eps)


def realize(model: TrueModel, matrices: ModelMatrices, rng: RngStream) -> TrueModel:
    """Draw gamma ~ MN(0, blockdiag Sigma_S) and compute eta = X beta + Z gamma."""
    blocks = []
    for f in matrices.re.factors:
        if f.name not in model.sigma:
            raise ValueError(f"true model has no parameters for factor {f.name!r}")
        C = model.cov_cholesky(f.name)
        if C.shape[0] != f.k:
            raise ValueError(f"factor {f.name!r}: model has {C.shape[0]} effects, design has {f.k}")
        z = rng.normal((f.n_groups, f.k))
        blocks.append((z @ C.T).ravel())
    gamma = np.concatenate(blocks) if blocks else np.zeros(0)
    if model.beta.shape[0] != matrices.p:
        raise ValueError("beta length does not match X")
    eta = matrices.X @ model.beta + matrices.Z @ gamma
    return replace(model, gamma=gamma, eta=eta)


def generate_response(matrices: ModelMatrices, model: TrueModel, rng: RngStream) -> np.ndarray:
    if model.gamma is None:
        raise ValueError("true model has not been realized on a design")
    if model.gamma.shape[0] != matrices.q or model.beta.shape[0] != matrices.p:
        raise ValueError("true model dimensions do not match the model matrices")
    eta = matrices.X @ model.beta + matrices.Z @ model.gamma
    if model.family is Family.GAUSSIAN:
        return eta + model.sigma_eps * rng.normal(eta.shape[0])
    p = 1.0 / (1.0 + np.exp(-eta))
    return (rng.uniform(size=eta.shape[0]) < p).astype(float)


def extreme_fraction(eta) -> float:
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        raise ValueError("eta is empty")
    return float(np.mean(np.abs(eta) > EXTREME_LOGODDS))


def standardize_truth(model: TrueModel, y: np.ndarray) -> TrueModel:
    """Express a Gaussian truth on the scale of the mean-centred, unit-SD response.

    Assumes the first column of X is the intercept.  Logistic truths are
    returned unchanged.
    """
    if model.family is not Family.GAUSSIAN:
        return model
    mu, sd = float(np.mean(y)), float(np.std(y, ddof=1))
    beta = model.beta / sd
    beta[0] = (model.beta[0] - mu) / sd
    return replace(
        model,
        beta=beta,
        sigma={k: v / sd for k, v in model.sigma.items()},
        sigma_eps=model.sigma_eps / sd,
        gamma=None if model.gamma is None else model.gamma / sd,
        eta=None if model.eta is None else (model.eta - mu) / sd,
        meta={**model.meta, "y_mean": mu, "y_sd": sd},
    )
