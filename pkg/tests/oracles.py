"""Independent closed-form references used by the fitter tests."""
import numpy as np

from mixsim.design import ModelMatrices, RandomEffects, RandomFactor


def one_way_matrices(n_groups: int, per_group: int) -> ModelMatrices:
    """Intercept-only fixed effects with a random intercept per group (balanced)."""
    n = n_groups * per_group
    X = np.ones((n, 1))
    group = np.repeat(np.arange(n_groups), per_group)
    return ModelMatrices(X, RandomEffects([RandomFactor("subject", group, n_groups, (0,))], X))


def anova_reml(y: np.ndarray, n_groups: int, per_group: int):
    """Balanced one-way REML by ANOVA: (mean, sigma_group, sigma_residual).

    With a non-negative between-group component the REML estimates equal the
    ANOVA moment estimators.
    """
    Y = y.reshape(n_groups, per_group)
    means = Y.mean(1)
    msw = ((Y - means[:, None]) ** 2).sum() / (n_groups * (per_group - 1))
    msb = per_group * ((means - Y.mean()) ** 2).sum() / (n_groups - 1)
    s2a = (msb - msw) / per_group
    return Y.mean(), np.sqrt(s2a), np.sqrt(msw)


def two_cell_logistic():
    """x = 0: 1 of 2 successes; x = 1: 3 of 4.  The ML slope is log(3)."""
    x = np.array([0, 0, 1, 1, 1, 1], dtype=float)
    y = np.array([1, 0, 1, 1, 1, 0], dtype=float)
    return np.column_stack([np.ones(6), x]), y


def glm_oracle(X, y, iters=50):
    """Plain Newton-Raphson logistic regression, no safeguards."""
    b = np.zeros(X.shape[1])
    for _ in range(iters):
        mu = 1.0 / (1.0 + np.exp(-X @ b))
        b = b + np.linalg.solve(X.T @ ((mu * (1 - mu))[:, None] * X), X.T @ (y - mu))
    return b
