"""Dataset balance measure on (0, 1].

The measure is computed from a contingency table of the grouping factor
crossed with the predictors.  With ``C`` cells, ``C*`` of them non-empty and
``n* = n / C*`` the mean non-empty count, every non-empty cell gets the ratio
``max(n_c / n*, n* / n_c)`` and

    r = C / C*^2 * sum_c ratio_c,        B = 2 * (1 - r / (1 + r)).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from mixsim.design import Dataset


@dataclass(frozen=True)
class BalanceSummary:
    C: int
    C_star: int
    n_star: float
    r: float
    B: float

    def to_dict(self) -> dict:
        return asdict(self)


def contingency_counts(dataset: Dataset) -> np.ndarray:
    """Counts indexed by (subject, x1, x2); shape ``(S, 2, 3)``."""
    if dataset.x2 is None:
        raise ValueError("the balance measure needs both x1 and x2")
    if dataset.n == 0:
        raise ValueError("dataset has no observations")
    table = np.zeros((dataset.S, 2, 3), dtype=np.int64)
    np.add.at(table, (dataset.subject, dataset.x1, dataset.x2), 1)
    return table


def balance_measure(table) -> BalanceSummary:
    counts = np.asarray(table, dtype=float).ravel()
    n = counts.sum()
    if not n > 0:
        raise ValueError("contingency table total must be positive")
    C = counts.size
    filled = counts[counts > 0]
    C_star = filled.size
    n_star = n / C_star
    ratios = np.maximum(filled / n_star, n_star / filled)
    r = C / C_star**2 * ratios.sum()
    B = 2.0 * (1.0 - r / (1.0 + r))
    return BalanceSummary(C=int(C), C_star=int(C_star), n_star=float(n_star), r=float(r), B=float(B))


def dataset_balance(dataset: Dataset) -> BalanceSummary:
    return balance_measure(contingency_counts(dataset))
