"""Simulated repeated-measures designs and their model matrices.

Two regimes are generated:

* ``simple`` -- a crossed subjects x items layout with one two-level
  within-subject factor ``x1`` and up to 5% of observations deleted.
* ``complex`` -- a subjects-only observational layout with a two-level
  factor ``x1`` and a three-level factor ``x2`` whose level frequencies and
  per-subject counts are random.

Factor levels are stored as integer codes (``x1``: 0=a, 1=b;
``x2``: 0=a, 1=b, 2=c) and grouping indices are 0-based in memory.  The CSV
form uses letters and 1-based indices.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mixsim.stochastic import RngStream, sample_dirichlet, sample_poisson_min1

X1_LEVELS = ("a", "b")
X2_LEVELS = ("a", "b", "c")


class ItemManipulation(str, Enum):
    BETWEEN = "between_item"
    WITHIN = "within_item"


@dataclass(frozen=True)
class SimpleDesignConfig:
    n_items: int = 24
    item_manipulation: ItemManipulation = ItemManipulation.WITHIN
    h0_true: bool = False
    n_subjects: int = 24
    missing_rate_max: float = 0.05

    def __post_init__(self):
        if self.n_subjects != 24:
            raise ValueError("simple designs use 24 subjects")
        if self.n_items not in (12, 24):
            raise ValueError("n_items must be 12 or 24")
        if self.missing_rate_max != 0.05:
            raise ValueError("missing_rate_max is fixed at 0.05")
        object.__setattr__(self, "item_manipulation", ItemManipulation(self.item_manipulation))


@dataclass
class Dataset:
    design: str
    subject: np.ndarray
    x1: np.ndarray
    S: int
    item: np.ndarray | None = None
    n_items: int | None = None
    x2: np.ndarray | None = None
    y: np.ndarray | None = None
    level_probs: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=np.int64)
        self.x1 = np.asarray(self.x1, dtype=np.int64)
        if self.item is not None:
            self.item = np.asarray(self.item, dtype=np.int64)
        if self.x2 is not None:
            self.x2 = np.asarray(self.x2, dtype=np.int64)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.shape[0] != self.n:
                raise ValueError("response length does not match observation count")

    @property
    def n(self) -> int:
        return self.subject.shape[0]

    def with_response(self, y) -> "Dataset":
        return Dataset(self.design, self.subject, self.x1, self.S, self.item, self.n_items,
                       self.x2, np.asarray(y, dtype=float), dict(self.level_probs), dict(self.meta))


def gen_simple_design(cfg: SimpleDesignConfig, rng: RngStream) -> Dataset:
    """Subjects x items layout with one within-subject factor.

    Between-item: the first half of the items are level ``a``, the rest
    ``b``.  Within-item: subjects alternate between two counterbalanced
    lists; list 0 sees item ``i`` at level ``a`` when ``i`` is even, list 1
    the reverse.  A deletion rate ``u ~ U(0, missing_rate_max)`` is drawn
    once and each observation is dropped independently with probability
    ``u``.
    """
    S, m = cfg.n_subjects, cfg.n_items
    subj, item = np.meshgrid(np.arange(S), np.arange(m), indexing="ij")
    subj, item = subj.ravel(), item.ravel()
    if cfg.item_manipulation is ItemManipulation.BETWEEN:
        x1 = (item >= m // 2).astype(np.int64)
    else:
        x1 = ((item + subj % 2) % 2).astype(np.int64)
    rate = rng.uniform(0.0, cfg.missing_rate_max)
    keep = rng.uniform(size=subj.shape[0]) >= rate
    return Dataset(
        design="simple",
        subject=subj[keep],
        item=item[keep],
        x1=x1[keep],
        S=S,
        n_items=m,
        meta={
            "n_items": m,
            "item_manipulation": cfg.item_manipulation.value,
            "h0_true": cfg.h0_true,
            "missing_rate": float(rate),
            "n_full": int(subj.shape[0]),
        },
    )


def gen_complex_design(rng: RngStream) -> Dataset:
    S = int(rng.integers(30, 60))
    lam = float(rng.uniform(20.0, 30.0))
    n_s = np.array([sample_poisson_min1(lam, rng) for _ in range(S)], dtype=np.int64)
    p1 = sample_dirichlet(np.ones(2), rng)
    p2 = sample_dirichlet(np.ones(3), rng)
    n = int(n_s.sum())
    subject = np.repeat(np.arange(S), n_s)
    x1 = rng.gen.choice(2, size=n, p=p1)
    x2 = rng.gen.choice(3, size=n, p=p2)
    return Dataset(
        design="complex",
        subject=subject,
        x1=x1,
        x2=x2,
        S=S,
        level_probs={"x1": p1.tolist(), "x2": p2.tolist()},
        meta={"lambda": lam},
    )


# -- model matrices ----------------------------------------------------------

_SUM2 = np.array([1.0, -1.0])
_SUM3 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
# deviation coding: the x1 coefficient is the a-minus-b difference
_DEV2 = np.array([0.5, -0.5])


def fixed_effects_matrix(dataset: Dataset) -> np.ndarray:
    """Intercept plus contrast-coded factors.

    Complex designs use sum contrasts (``x1``: a=+1, b=-1; ``x2``: a=(+1,0),
    b=(0,+1), c=(-1,-1)).  Simple designs code ``x1`` as a=+0.5, b=-0.5 so
    that the slope is the difference between conditions.
    """
    x1 = dataset.x1
    if x1.size and (x1.min() < 0 or x1.max() > 1):
        raise ValueError("unknown level for x1")
    coding = _DEV2 if dataset.design == "simple" else _SUM2
    cols = [np.ones(dataset.n), coding[x1]]
    if dataset.x2 is not None:
        x2 = dataset.x2
        if x2.size and (x2.min() < 0 or x2.max() > 2):
            raise ValueError("unknown level for x2")
        cols.extend(_SUM3[x2].T)
    return np.column_stack(cols)


@dataclass
class RandomFactor:
    """One grouping factor: a group index per row and the X columns that vary by group."""

    name: str
    group: np.ndarray
    n_groups: int
    cols: tuple[int, ...]

    @property
    def k(self) -> int:
        return len(self.cols)


@dataclass
class RandomEffects:
    """Random-effects design ``Z`` stored by factor, group-major within a factor."""

    factors: list[RandomFactor]
    X: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return sum(f.n_groups * f.k for f in self.factors)

    def offsets(self) -> list[int]:
        out, off = [], 0
        for f in self.factors:
            out.append(off)
            off += f.n_groups * f.k
        return out

    def ell(self) -> tuple[np.ndarray, np.ndarray]:
        """Fixed-width sparse form: per-row column indices and values (n x sum k)."""
        idx, val = [], []
        for f, off in zip(self.factors, self.offsets()):
            base = off + f.group * f.k
            for j, c in enumerate(f.cols):
                idx.append(base + j)
                val.append(self.X[:, c])
        if not idx:
            return np.zeros((self.n, 0), dtype=np.int64), np.zeros((self.n, 0))
        return (np.ascontiguousarray(np.column_stack(idx), dtype=np.int64),
                np.ascontiguousarray(np.column_stack(val), dtype=float))

    @property
    def Z(self) -> sp.csr_matrix:
        zind, zval = self.ell()
        m = zind.shape[1]
        indptr = np.arange(0, self.n * m + 1, m)
        return sp.csr_matrix((zval.ravel(), zind.ravel(), indptr), shape=(self.n, self.q))

    def gamma_blocks(self, gamma: np.ndarray) -> list[np.ndarray]:
        """Split a q-vector into per-factor (n_groups x k) blocks."""
        out = []
        for f, off in zip(self.factors, self.offsets()):
            out.append(gamma[off:off + f.n_groups * f.k].reshape(f.n_groups, f.k))
        return out


@dataclass
class ModelMatrices:
    X: np.ndarray
    re: RandomEffects

    @property
    def Z(self) -> sp.csr_matrix:
        return self.re.Z

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.re.q


def maximal_re_spec(dataset: Dataset) -> dict[str, tuple[int, ...]]:
    """The maximal random-effects structure for a dataset.

    Complex: every fixed-effect column varies by subject.  Simple: subjects
    carry (intercept, x1); items carry (intercept, x1) when x1 varies within
    item and an intercept only when it is a between-item factor.
    """
    if dataset.design == "complex":
        return {"subject": (0, 1, 2, 3)}
    spec = {"subject": (0, 1)}
    if dataset.meta.get("item_manipulation") == ItemManipulation.BETWEEN.value:
        spec["item"] = (0,)
    else:
        spec["item"] = (0, 1)
    return spec


def random_effects_matrix(dataset: Dataset, spec: dict[str, tuple[int, ...]] | None = None,
                          X: np.ndarray | None = None) -> RandomEffects:
    if X is None:
        X = fixed_effects_matrix(dataset)
    if spec is None:
        spec = maximal_re_spec(dataset)
    factors = []
    for name, cols in spec.items():
        if name == "subject":
            group, ng = dataset.subject, dataset.S
        elif name == "item":
            if dataset.item is None:
                raise ValueError("random-effects spec references 'item' but the dataset has no item factor")
            group, ng = dataset.item, dataset.n_items
        else:
            raise ValueError(f"unknown grouping factor {name!r}")
        cols = tuple(int(c) for c in cols)
        if any(c < 0 or c >= X.shape[1] for c in cols):
            raise ValueError(f"random effect columns {cols} out of range for X with {X.shape[1]} columns")
        factors.append(RandomFactor(name, group, int(ng), cols))
    return RandomEffects(factors, X)


def model_matrices(dataset: Dataset, spec=None) -> ModelMatrices:
    X = fixed_effects_matrix(dataset)
    return ModelMatrices(X, random_effects_matrix(dataset, spec, X))


# -- CSV ---------------------------------------------------------------------

CSV_COLUMNS = ("subject", "item", "x1", "x2", "y")


def dataset_to_csv(dataset: Dataset, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i in range(dataset.n):
        w.writerow([
            dataset.subject[i] + 1,
            "" if dataset.item is None else dataset.item[i] + 1,
            X1_LEVELS[dataset.x1[i]],
            "" if dataset.x2 is None else X2_LEVELS[dataset.x2[i]],
            "" if dataset.y is None else repr(float(dataset.y[i])),
        ])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_dataset_csv(source) -> Dataset:
    """Parse a dataset CSV (path or file-like).  x2 present means a complex design."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = list(csv.DictReader(source))
    if not rows:
        raise ValueError("dataset CSV has no observations")

    def level(val, levels, name):
        try:
            return levels.index(val.strip())
        except ValueError:
            raise ValueError(f"unknown level {val!r} for {name}") from None

    subject = np.array([int(r["subject"]) - 1 for r in rows])
    x1 = np.array([level(r["x1"], X1_LEVELS, "x1") for r in rows])
    has_x2 = all((r.get("x2") or "").strip() for r in rows)
    has_item = all((r.get("item") or "").strip() for r in rows)
    has_y = all((r.get("y") or "").strip() for r in rows)
    x2 = np.array([level(r["x2"], X2_LEVELS, "x2") for r in rows]) if has_x2 else None
    item = np.array([int(r["item"]) - 1 for r in rows]) if has_item else None
    y = np.array([float(r["y"]) for r in rows]) if has_y else None
    meta = {}
    if item is not None:
        # within-item iff some item occurs at both levels of x1
        both = any(len(set(x1[item == i])) > 1 for i in np.unique(item))
        meta["item_manipulation"] = (ItemManipulation.WITHIN if both else ItemManipulation.BETWEEN).value
    return Dataset(
        design="complex" if has_x2 else "simple",
        subject=subject,
        x1=x1,
        x2=x2,
        item=item,
        n_items=None if item is None else int(item.max()) + 1,
        S=int(subject.max()) + 1,
        y=y,
        meta=meta,
    )
