"""Response-surface fitting and propagation.

The design matrix has rows = samples and columns = basis terms: an
intercept, the raw inputs, and optionally each input squared. Coefficients
are the least-squares minimiser per output column, computed from an SVD
rather than by inverting X^T X.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Origin, ResponseSet, SampleMatrix, ShapeMismatch, StudyError, summarize

RANK_TOL = 1e-10


class Basis(str, enum.Enum):
    LINEAR_INTERCEPT = "LinearIntercept"
    LINEAR_PLUS_QUAD_DIAG = "LinearPlusQuadDiag"

    @classmethod
    def from_config(cls, name: str) -> "Basis":
        return {"linear": cls.LINEAR_INTERCEPT, "quadratic": cls.LINEAR_PLUS_QUAD_DIAG}.get(
            name, None
        ) or cls(name)


class RankDeficient(StudyError, ValueError):
    def __init__(self, message: str, columns: Sequence[str]):
        super().__init__(message)
        self.columns = list(columns)


@dataclass(frozen=True)
class TrainingStats:
    n_train: int
    residual_rms: tuple[float, ...]
    condition: float


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """Fitted coefficients, one row per output: intercept, slopes, then squares."""

    coefficients: np.ndarray
    basis: Basis
    variable_names: tuple[str, ...]
    metric_names: tuple[str, ...]
    training_stats: TrainingStats | None = None

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        if coef.ndim != 2 or coef.shape != (len(self.metric_names), n_terms(self.basis, len(self.variable_names))):
            raise ShapeMismatch(
                f"coefficient shape {coef.shape} does not match basis {self.basis.value} "
                f"with {len(self.variable_names)} variables and {len(self.metric_names)} outputs"
            )
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        object.__setattr__(self, "metric_names", tuple(self.metric_names))

    @property
    def d(self) -> int:
        return len(self.variable_names)

    @property
    def intercept(self) -> np.ndarray:
        return self.coefficients[:, 0]

    @property
    def slopes(self) -> np.ndarray:
        """(m, d) linear coefficients."""
        return self.coefficients[:, 1 : 1 + self.d]

    def term_names(self) -> list[str]:
        names = ["intercept", *self.variable_names]
        if self.basis is Basis.LINEAR_PLUS_QUAD_DIAG:
            names += [f"{v}^2" for v in self.variable_names]
        return names


def n_terms(basis: Basis, d: int) -> int:
    return 1 + d if basis is Basis.LINEAR_INTERCEPT else 1 + 2 * d


def design_matrix(x: np.ndarray, basis: Basis) -> np.ndarray:
    cols = [np.ones((x.shape[0], 1)), x]
    if basis is Basis.LINEAR_PLUS_QUAD_DIAG:
        cols.append(x * x)
    return np.hstack(cols)


def _as_matrix(y) -> tuple[np.ndarray, tuple[str, ...] | None]:
    if isinstance(y, ResponseSet):
        return np.asarray(y.summaries), y.metric_names
    y = np.asarray(y, dtype=float)
    return (y[:, None] if y.ndim == 1 else y), None


def fit_rse(
    X: SampleMatrix,
    y: ResponseSet | np.ndarray,
    basis: Basis = Basis.LINEAR_INTERCEPT,
    metric_names: Sequence[str] | None = None,
) -> SurrogateModel:
    """Least-squares fit of every output column of ``y`` on the basis expansion of ``X``."""
    Y, names = _as_matrix(y)
    if metric_names is not None:
        names = tuple(metric_names)
    if names is None:
        names = tuple(f"y{j}" for j in range(Y.shape[1]))
    if Y.shape[0] != X.n:
        raise ShapeMismatch(f"{X.n} samples but {Y.shape[0]} responses")
    if Y.shape[1] != len(names):
        raise ShapeMismatch(f"{Y.shape[1]} response columns but {len(names)} names")

    phi = design_matrix(X.values, basis)
    p = phi.shape[1]
    terms = ["intercept", *X.variable_names]
    if basis is Basis.LINEAR_PLUS_QUAD_DIAG:
        terms += [f"{v}^2" for v in X.variable_names]
    if X.n < p:
        raise RankDeficient(f"{X.n} samples cannot determine {p} coefficients", terms)

    u, s, vt = np.linalg.svd(phi, full_matrices=False)
    small = s < RANK_TOL * s[0] if s[0] > 0 else np.ones_like(s, dtype=bool)
    if np.any(small):
        null = vt[small]
        involved = np.any(np.abs(null) > 1e-6, axis=0)
        bad = [terms[k] for k in np.flatnonzero(involved)]
        raise RankDeficient(f"design matrix is rank deficient in columns {bad}", bad)

    coef = (vt.T @ ((u.T @ Y) / s[:, None])).T
    resid = phi @ coef.T - Y
    stats = TrainingStats(
        n_train=X.n,
        residual_rms=tuple(float(r) for r in np.sqrt(np.mean(resid**2, axis=0))),
        condition=float(s[0] / s[-1]),
    )
    return SurrogateModel(coef, basis, X.variable_names, names, stats)


def _check_columns(model: SurrogateModel, X1: SampleMatrix) -> None:
    if X1.variable_names != model.variable_names:
        for i, (a, b) in enumerate(zip(X1.variable_names, model.variable_names)):
            if a != b:
                raise ShapeMismatch(f"column {i} is {a!r}, model expects {b!r}", i, a)
        raise ShapeMismatch(
            f"{X1.d} columns, model expects {model.d}", min(X1.d, model.d)
        )


def predict(model: SurrogateModel, X1: SampleMatrix) -> np.ndarray:
    """Evaluate the surrogate at every row of ``X1``; returns an (N, outputs) array."""
    _check_columns(model, X1)
    return design_matrix(X1.values, model.basis) @ model.coefficients.T


def predict_responses(model: SurrogateModel, X1: SampleMatrix) -> ResponseSet:
    return ResponseSet(None, predict(model, X1), model.metric_names, tuple(range(X1.n)))


@dataclass(frozen=True, eq=False)
class SeriesSurrogate:
    """One response surface per (metric, time step), fitted jointly.

    Used to propagate whole output curves so envelopes can be drawn from the
    surrogate the same way as from direct simulation.
    """

    model: SurrogateModel
    metric_names: tuple[str, ...]
    t_steps: int
    summary_kinds: tuple[str, ...]

    def predict(self, X1: SampleMatrix) -> ResponseSet:
        flat = predict(self.model, X1)
        series = flat.reshape(X1.n, len(self.metric_names), self.t_steps)
        return ResponseSet(
            series, summarize(series, self.summary_kinds), self.metric_names, tuple(range(X1.n))
        )


def fit_series(
    X: SampleMatrix,
    responses: ResponseSet,
    basis: Basis = Basis.LINEAR_INTERCEPT,
    summary_kinds: Sequence[str] | None = None,
) -> SeriesSurrogate:
    if responses.series is None:
        raise ShapeMismatch("response set carries no time series")
    n, m, t = responses.series.shape
    names = tuple(f"{metric}@{k}" for metric in responses.metric_names for k in range(t))
    model = fit_rse(X, responses.series.reshape(n, m * t), basis, names)
    kinds = tuple(summary_kinds or ["peak"] * m)
    return SeriesSurrogate(model, responses.metric_names, t, kinds)


def surrogate_samples(X1: SampleMatrix) -> SampleMatrix:
    return SampleMatrix(X1.values, X1.variable_names, Origin.SURROGATE)


def write_coefficients_csv(model: SurrogateModel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", *model.term_names()])
        for name, row in zip(model.metric_names, model.coefficients):
            writer.writerow([name, *(repr(float(v)) for v in row)])


def read_coefficients_csv(path: str | Path) -> SurrogateModel:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header, body = rows[0], rows[1:]
    terms = header[2:]
    quad = [t for t in terms if t.endswith("^2")]
    variables = terms[: len(terms) - len(quad)]
    basis = Basis.LINEAR_PLUS_QUAD_DIAG if quad else Basis.LINEAR_INTERCEPT
    coef = np.array([[float(v) for v in r[1:]] for r in body], dtype=float)
    return SurrogateModel(coef, basis, tuple(variables), tuple(r[0] for r in body))
