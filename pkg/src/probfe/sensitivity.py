"""Surrogate-based sensitivity scores and rank-sum key-variable reduction.

For metric j the sensitivity matrix A_j has one row per input and one
column per propagated sample. Entries factor as weight * sample term:

* raw mode:       A_j[i, n] = b_ji * x_ni / sigma_i
* centered mode:  A_j[i, n] = (b_ji * sigma_i) * (x_ni - mu_i) / sigma_i

Centered mode pairs the per-sigma (standardised) coefficient with the
standardised sample, so a variable's score is its typical output swing
and does not depend on where its unit origin sits. The score of input i
for metric j is the mean absolute entry of row i.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import SampleMatrix, ShapeMismatch, StudyError
from .rsm import SurrogateModel


class ZeroSigma(StudyError, ValueError):
    def __init__(self, names: Sequence[str]):
        super().__init__(f"zero standard deviation for {list(names)}; exclude these variables")
        self.names = list(names)


class SensitivityMode(str, enum.Enum):
    RAW_OVER_SIGMA = "RawOverSigma"
    CENTERED_OVER_SIGMA = "CenteredOverSigma"

    @classmethod
    def from_config(cls, name: str) -> "SensitivityMode":
        return {"raw": cls.RAW_OVER_SIGMA, "centered": cls.CENTERED_OVER_SIGMA}.get(
            name
        ) or cls(name)


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """Per-metric sensitivity matrices stored in factored form.

    ``weights`` is (m, d) and ``terms`` is (d, N); ``matrix(j)`` gives the
    explicit d x N matrix A_j = weights[j][:, None] * terms.
    """

    weights: np.ndarray
    terms: np.ndarray
    variable_names: tuple[str, ...]
    metric_names: tuple[str, ...]
    mode: SensitivityMode

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.metric_names), *self.terms.shape)

    def matrix(self, j: int) -> np.ndarray:
        return self.weights[j][:, None] * self.terms

    def dense(self) -> np.ndarray:
        return self.weights[:, :, None] * self.terms[None, :, :]


def sensitivity_matrix(
    model: SurrogateModel,
    X1: SampleMatrix,
    sigmas: Sequence[float],
    mode: SensitivityMode = SensitivityMode.CENTERED_OVER_SIGMA,
    means: Sequence[float] | None = None,
) -> SensitivityMatrix:
    """Build A for every metric of ``model``. ``means`` defaults to the column means of X1."""
    if X1.variable_names != model.variable_names:
        raise ShapeMismatch("sample columns do not match the surrogate's variables")
    if X1.n < 1:
        raise ShapeMismatch("need at least one propagated sample")
    sigma = np.asarray(sigmas, dtype=float)
    if sigma.shape != (model.d,):
        raise ShapeMismatch(f"expected {model.d} sigmas, got {sigma.shape}")
    zero = [name for name, s in zip(model.variable_names, sigma) if not s > 0]
    if zero:
        raise ZeroSigma(zero)

    slopes = model.slopes
    x = X1.values
    if mode is SensitivityMode.RAW_OVER_SIGMA:
        weights = slopes.copy()
        terms = (x / sigma).T
    else:
        mu = x.mean(axis=0) if means is None else np.asarray(means, dtype=float)
        weights = slopes * sigma
        terms = ((x - mu) / sigma).T
    return SensitivityMatrix(weights, terms, model.variable_names, model.metric_names, mode)


@dataclass(frozen=True, eq=False)
class SensitivityScores:
    scores: np.ndarray  # (m, d)
    ranks: np.ndarray  # (m, d), 1 = most sensitive
    totals: np.ndarray  # (d,)
    variable_names: tuple[str, ...]
    metric_names: tuple[str, ...]


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Rank 1 for the largest score in each row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)
    return ranks


def sensitivity_scores(
    A: SensitivityMatrix | np.ndarray,
    variable_names: Sequence[str] | None = None,
    metric_names: Sequence[str] | None = None,
) -> SensitivityScores:
    """Score = mean |A_j[i, :]|. ``A`` is a SensitivityMatrix or an explicit (m, d, N) array."""
    if isinstance(A, SensitivityMatrix):
        # |w * z| = |w| * |z|, so the row mean factors exactly
        scores = np.abs(A.weights) * np.mean(np.abs(A.terms), axis=1)[None, :]
        variable_names = A.variable_names
        metric_names = A.metric_names
    else:
        arr = np.asarray(A, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        scores = np.mean(np.abs(arr), axis=2)
    m, d = scores.shape
    variable_names = tuple(variable_names or (f"x{i}" for i in range(d)))
    metric_names = tuple(metric_names or (f"y{j}" for j in range(m)))
    ranks = rank_rows(scores)
    return SensitivityScores(scores, ranks, ranks.sum(axis=0), variable_names, metric_names)


@dataclass(frozen=True)
class GapReport:
    sorted_totals: tuple[int, ...]
    ratios: tuple[float, ...]  # ratios[k-1] = sorted_totals[k] / sorted_totals[k-1]
    window: tuple[int, int]
    drop_at: int  # cut count with the largest ratio inside the window


@dataclass(frozen=True)
class ReducedSet:
    selected: tuple[str, ...]
    k: int
    gap_report: GapReport
    order: tuple[str, ...]


def gap_window(d: int, bounds: tuple[float, float] = (1 / 8, 1 / 2)) -> tuple[int, int]:
    lo = max(1, math.ceil(bounds[0] * d))
    hi = min(d - 1, math.floor(bounds[1] * d))
    return lo, max(lo, hi)


def reduce_key_set(
    scores: SensitivityScores,
    k_override: int | None = None,
    window_bounds: tuple[float, float] = (1 / 8, 1 / 2),
) -> ReducedSet:
    """Keep the variables with the smallest summed rank.

    Without an override the cut k is placed at the largest relative jump
    totals[k] / totals[k-1] (sorted ascending, k counted from 1) with k in
    [d * lo, d * hi].
    """
    totals = np.asarray(scores.totals)
    d = totals.size
    order = np.argsort(totals, kind="stable")
    sorted_totals = totals[order]
    ratios = sorted_totals[1:] / np.maximum(sorted_totals[:-1], 1)
    lo, hi = gap_window(d, window_bounds)
    if d >= 2:
        drop_at = lo + int(np.argmax(ratios[lo - 1 : hi]))
    else:
        drop_at = 1
    k = k_override if k_override is not None else drop_at
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside [1, {d}]")
    names = [scores.variable_names[i] for i in order]
    report = GapReport(
        tuple(int(t) for t in sorted_totals), tuple(float(r) for r in ratios), (lo, hi), drop_at
    )
    return ReducedSet(tuple(names[:k]), k, report, tuple(names))


def write_sensitivity_csv(
    scores: SensitivityScores, reduced: ReducedSet | None, path: str | Path
) -> None:
    selected = set(reduced.selected) if reduced else set()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "variable",
                *(f"s_{m}" for m in scores.metric_names),
                *(f"rank_{m}" for m in scores.metric_names),
                "total",
                "selected",
            ]
        )
        for i, name in enumerate(scores.variable_names):
            writer.writerow(
                [
                    name,
                    *(repr(float(v)) for v in scores.scores[:, i]),
                    *(int(r) for r in scores.ranks[:, i]),
                    int(scores.totals[i]),
                    int(name in selected),
                ]
            )


def read_sensitivity_csv(path: str | Path) -> SensitivityScores:
    """Reload scores; ranks and totals are recomputed from the score columns."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header = rows[0]
    metrics = [h[2:] for h in header if h.startswith("s_")]
    m = len(metrics)
    names = [r[0] for r in rows[1:]]
    s = np.array([[float(v) for v in r[1 : 1 + m]] for r in rows[1:]], dtype=float).T
    return sensitivity_scores(s[:, :, None], names, metrics)
