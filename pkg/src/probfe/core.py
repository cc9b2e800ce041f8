"""Shared domain types for probabilistic studies and study-config loading.

A study is defined by an ordered list of normally distributed inputs, an
ordered list of output metrics, and run settings. Column ``i`` of every
sample matrix in a study always refers to ``StudySpec.variables[i]``.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class StudyError(Exception):
    """Base class for errors raised by this package."""


class ParseError(StudyError, ValueError):
    pass


class ValidationError(StudyError, ValueError):
    pass


class ShapeMismatch(StudyError, ValueError):
    """Raised when a matrix does not line up with the variables or metrics it claims."""

    def __init__(self, message: str, index: int | None = None, name: str | None = None):
        super().__init__(message)
        self.index = index
        self.name = name


@dataclass(frozen=True)
class InputVariable:
    name: str
    mean: float
    std_dev: float
    group: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValidationError("variable name must be non-empty")
        if not (math.isfinite(self.mean) and math.isfinite(self.std_dev)):
            raise ValidationError(f"variable {self.name!r}: mean and std must be finite")
        if self.std_dev < 0:
            raise ValidationError(f"variable {self.name!r}: negative std_dev {self.std_dev}")


@dataclass(frozen=True)
class ConvergenceSettings:
    window: int = 100
    rel_tol: float = 0.01


SUMMARY_KINDS = ("peak", "max", "min", "final", "mean")


@dataclass(frozen=True)
class StudySpec:
    """Validated study definition.

    ``n_mc == 0`` is accepted and means "skip the Monte Carlo analyses"
    (surrogate-only dry run). ``simulator`` and ``distributed`` are kept as
    plain config blocks and interpreted by their owning modules.
    """

    variables: tuple[InputVariable, ...]
    metrics: tuple[str, ...]
    n_mc: int = 800
    n_rsm: int = 100
    percentiles: tuple[float, float] = (5.0, 95.0)
    convergence: ConvergenceSettings = field(default_factory=ConvergenceSettings)
    seed: int = 0
    k_override: int | None = None
    gap_window: tuple[float, float] = (1 / 8, 1 / 2)
    surrogate_samples: int = 1000
    rsm_reduced_trials: tuple[int, ...] = ()
    sensitivity_mode: str = "centered"
    basis: str = "linear"
    summary: str | tuple[tuple[str, str], ...] = "peak"
    require_rsm: bool = True
    simulator: Mapping[str, Any] = field(default_factory=lambda: {"type": "synthetic"})
    distributed: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        _validate_spec(self)

    @property
    def d(self) -> int:
        return len(self.variables)

    @property
    def m(self) -> int:
        return len(self.metrics)

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def means(self) -> np.ndarray:
        return np.array([v.mean for v in self.variables], dtype=float)

    @property
    def std_devs(self) -> np.ndarray:
        return np.array([v.std_dev for v in self.variables], dtype=float)

    @property
    def reduced_trials(self) -> tuple[int, ...]:
        return self.rsm_reduced_trials or (self.n_rsm,)

    def summary_for(self, metric: str) -> str:
        if isinstance(self.summary, str):
            return self.summary
        return dict(self.summary).get(metric, "peak")

    def variable_index(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise KeyError(name)

    def subset(self, names: Sequence[str]) -> "StudySpec":
        """Spec over a subset of variables, in the order given."""
        by_name = {v.name: v for v in self.variables}
        return self.replace(
            variables=tuple(by_name[n] for n in names), require_rsm=False, k_override=None
        )

    def replace(self, **changes) -> "StudySpec":
        return dataclasses.replace(self, **changes)

    def to_document(self) -> dict:
        return {
            "variables": [
                {"name": v.name, "mean": v.mean, "std": v.std_dev, "group": v.group}
                for v in self.variables
            ],
            "metrics": list(self.metrics),
            "study": {
                "n_mc": self.n_mc,
                "n_rsm": self.n_rsm,
                "percentiles": list(self.percentiles),
                "convergence": {
                    "window": self.convergence.window,
                    "rel_tol": self.convergence.rel_tol,
                },
                "seed": self.seed,
                "surrogate_samples": self.surrogate_samples,
                "rsm_reduced_trials": list(self.rsm_reduced_trials),
                "sensitivity_mode": self.sensitivity_mode,
                "basis": self.basis,
                "summary": self.summary if isinstance(self.summary, str) else dict(self.summary),
            },
            "simulator": copy.deepcopy(dict(self.simulator)),
            "reduction": {"k_override": self.k_override, "gap_window": list(self.gap_window)},
            "distributed": copy.deepcopy(dict(self.distributed)),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=2)


def _validate_spec(spec: StudySpec) -> None:
    if spec.d < 1:
        raise ValidationError("study needs at least one variable")
    if spec.m < 1:
        raise ValidationError("study needs at least one metric")
    seen: set[str] = set()
    for v in spec.variables:
        if v.name in seen:
            raise ValidationError(f"duplicate variable name {v.name!r}")
        seen.add(v.name)
    if len(set(spec.metrics)) != spec.m or not all(spec.metrics):
        raise ValidationError("metric names must be non-empty and unique")
    lo, hi = spec.percentiles
    if not (0 < lo < 100 and 0 < hi < 100):
        raise ValidationError(f"percentiles must lie in (0, 100), got {spec.percentiles}")
    if lo >= hi:
        raise ValidationError(f"p_lo must be below p_hi, got {spec.percentiles}")
    if spec.n_mc < 0:
        raise ValidationError("n_mc must be >= 0")
    if spec.n_rsm < 1:
        raise ValidationError("n_rsm must be positive")
    if spec.require_rsm and spec.n_rsm < spec.d + 2:
        raise ValidationError(
            f"n_rsm={spec.n_rsm} too small for {spec.d} variables (need >= {spec.d + 2})"
        )
    if spec.convergence.window < 1 or spec.convergence.rel_tol <= 0:
        raise ValidationError("convergence window must be >= 1 and rel_tol > 0")
    if spec.seed < 0:
        raise ValidationError("seed must be unsigned")
    if spec.k_override is not None and not (1 <= spec.k_override <= spec.d):
        raise ValidationError(f"k_override must be in [1, {spec.d}]")
    if not 0 <= spec.gap_window[0] <= spec.gap_window[1] <= 1:
        raise ValidationError("gap_window must be fractions 0 <= lo <= hi <= 1")
    if spec.surrogate_samples < 2:
        raise ValidationError("surrogate_samples must be >= 2")
    if any(n < 2 for n in spec.rsm_reduced_trials):
        raise ValidationError("rsm_reduced_trials entries must be >= 2")
    if spec.sensitivity_mode not in ("centered", "raw"):
        raise ValidationError("sensitivity_mode must be 'centered' or 'raw'")
    if spec.basis not in ("linear", "quadratic"):
        raise ValidationError("basis must be 'linear' or 'quadratic'")
    kinds = [spec.summary] if isinstance(spec.summary, str) else [k for _, k in spec.summary]
    for kind in kinds:
        if kind not in SUMMARY_KINDS:
            raise ValidationError(f"unknown summary {kind!r}; expected one of {SUMMARY_KINDS}")


def _get(mapping: Mapping, key: str, kind: type | tuple, default=None, required=False):
    if key not in mapping or mapping[key] is None:
        if required:
            raise ParseError(f"missing required key {key!r}")
        return default
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ParseError(f"key {key!r} has wrong type {type(value).__name__}")
    return value


def load_study_spec(document: str | bytes | Mapping[str, Any]) -> StudySpec:
    """Parse and validate a study config (JSON text or an already-parsed mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from exc
    else:
        doc = copy.deepcopy(dict(document))
    if not isinstance(doc, dict):
        raise ParseError("config top level must be an object")

    raw_vars = _get(doc, "variables", list, required=True)
    variables = []
    for k, entry in enumerate(raw_vars):
        if not isinstance(entry, dict):
            raise ParseError(f"variables[{k}] must be an object")
        variables.append(
            InputVariable(
                name=_get(entry, "name", str, required=True),
                mean=_get(entry, "mean", float, required=True),
                std_dev=_get(entry, "std", float, required=True),
                group=_get(entry, "group", str, ""),
            )
        )
    metrics = _get(doc, "metrics", list, required=True)
    if not all(isinstance(m, str) for m in metrics):
        raise ParseError("metrics must be a list of names")

    study = _get(doc, "study", dict, {})
    conv = _get(study, "convergence", dict, {})
    pct = _get(study, "percentiles", list, [5.0, 95.0])
    if len(pct) != 2 or not all(isinstance(p, (int, float)) for p in pct):
        raise ParseError("percentiles must be a pair of numbers")
    reduction = _get(doc, "reduction", dict, {})
    gap = _get(reduction, "gap_window", list, [1 / 8, 1 / 2])
    summary = _get(study, "summary", (str, dict), "peak")
    if isinstance(summary, dict):
        summary = tuple(sorted(summary.items()))

    return StudySpec(
        variables=tuple(variables),
        metrics=tuple(metrics),
        n_mc=_get(study, "n_mc", int, 800),
        n_rsm=_get(study, "n_rsm", int, 100),
        percentiles=(float(pct[0]), float(pct[1])),
        convergence=ConvergenceSettings(
            window=_get(conv, "window", int, 100), rel_tol=_get(conv, "rel_tol", float, 0.01)
        ),
        seed=_get(study, "seed", int, 0),
        k_override=_get(reduction, "k_override", int),
        gap_window=(float(gap[0]), float(gap[1])),
        surrogate_samples=_get(study, "surrogate_samples", int, 1000),
        rsm_reduced_trials=tuple(_get(study, "rsm_reduced_trials", list, [])),
        sensitivity_mode=_get(study, "sensitivity_mode", str, "centered"),
        basis=_get(study, "basis", str, "linear"),
        summary=summary,
        simulator=_get(doc, "simulator", dict, {"type": "synthetic"}),
        distributed=_get(doc, "distributed", dict, {}),
    )


def default_study_document() -> dict:
    """The shipped 78-variable passive-flexion study config."""
    text = resources.files("probfe").joinpath("data/default_study.json").read_text()
    return json.loads(text)


def default_study_spec() -> StudySpec:
    return load_study_spec(default_study_document())


class Origin(str, enum.Enum):
    MONTE_CARLO = "MonteCarlo"
    REGULAR_DESIGN = "RegularDesign"
    SURROGATE = "Surrogate"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SampleMatrix:
    values: np.ndarray
    variable_names: tuple[str, ...]
    origin: Origin = Origin.MONTE_CARLO

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise ShapeMismatch(f"sample matrix must be 2-D, got shape {values.shape}")
        if values.shape[1] != len(self.variable_names):
            raise ShapeMismatch(
                f"{values.shape[1]} columns but {len(self.variable_names)} variable names"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("sample matrix contains non-finite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def head(self, n: int) -> "SampleMatrix":
        return SampleMatrix(self.values[:n], self.variable_names, self.origin)


def validate_alignment(samples: SampleMatrix, spec: StudySpec) -> None:
    """Raise ShapeMismatch unless the sample columns are exactly the spec's variables."""
    expected = spec.variable_names
    if samples.d != len(expected):
        raise ShapeMismatch(
            f"sample matrix has {samples.d} columns, study has {len(expected)} variables",
            index=min(samples.d, len(expected)),
        )
    for i, (got, want) in enumerate(zip(samples.variable_names, expected)):
        if got != want:
            raise ShapeMismatch(
                f"column {i} is {got!r}, expected {want!r}", index=i, name=got
            )


def expand_to_full(reduced: SampleMatrix, spec: StudySpec) -> SampleMatrix:
    """Embed a sample matrix over a subset of variables into the full study, pinning
    every other variable at its mean."""
    full = np.tile(spec.means, (reduced.n, 1))
    for col, name in enumerate(reduced.variable_names):
        full[:, spec.variable_index(name)] = reduced.values[:, col]
    return SampleMatrix(full, tuple(spec.variable_names), reduced.origin)


def _peak(series: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(series), axis=-1)
    return np.take_along_axis(series, idx[..., None], axis=-1)[..., 0]


SUMMARY_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "peak": _peak,
    "max": lambda s: s.max(axis=-1),
    "min": lambda s: s.min(axis=-1),
    "final": lambda s: s[..., -1],
    "mean": lambda s: s.mean(axis=-1),
}


def summarize(series: np.ndarray, kinds: Sequence[str]) -> np.ndarray:
    """Apply the per-metric summary functional to an (N, m, T) series tensor."""
    out = np.empty(series.shape[:2])
    for j, kind in enumerate(kinds):
        out[:, j] = SUMMARY_FUNCTIONS[kind](series[:, j, :])
    return out


@dataclass(frozen=True, eq=False)
class ResponseSet:
    """Per-sample simulator outputs.

    ``series`` has shape (N, m, T); ``summaries`` (N, m). ``summaries`` may be
    given without series (surrogate predictions of scalars), in which case
    ``series`` is None.
    """

    series: np.ndarray | None
    summaries: np.ndarray
    metric_names: tuple[str, ...]
    sample_ids: tuple[int, ...]

    def __post_init__(self):
        summaries = _frozen(self.summaries)
        if summaries.ndim != 2 or summaries.shape[1] != len(self.metric_names):
            raise ShapeMismatch(
                f"summaries shape {summaries.shape} does not match {len(self.metric_names)} metrics"
            )
        if len(self.sample_ids) != summaries.shape[0]:
            raise ShapeMismatch("sample_ids length does not match the number of samples")
        if self.series is not None:
            series = _frozen(self.series)
            if series.ndim != 3 or series.shape[:2] != summaries.shape:
                raise ShapeMismatch(f"series shape {series.shape} does not match summaries")
            object.__setattr__(self, "series", series)
        object.__setattr__(self, "summaries", summaries)
        object.__setattr__(self, "metric_names", tuple(self.metric_names))
        object.__setattr__(self, "sample_ids", tuple(int(i) for i in self.sample_ids))

    @classmethod
    def from_series(
        cls,
        series: np.ndarray,
        metric_names: Sequence[str],
        sample_ids: Sequence[int] | None = None,
        summary: str | Sequence[str] = "peak",
    ) -> "ResponseSet":
        series = np.asarray(series, dtype=float)
        kinds = [summary] * len(metric_names) if isinstance(summary, str) else list(summary)
        if sample_ids is None:
            sample_ids = range(series.shape[0])
        return cls(series, summarize(series, kinds), tuple(metric_names), tuple(sample_ids))

    @property
    def n(self) -> int:
        return self.summaries.shape[0]

    @property
    def t_steps(self) -> int:
        return 0 if self.series is None else self.series.shape[2]

    def head(self, n: int) -> "ResponseSet":
        series = None if self.series is None else self.series[:n]
        return ResponseSet(series, self.summaries[:n], self.metric_names, self.sample_ids[:n])

    def scaled(self, factor: float, offset: float = 0.0) -> "ResponseSet":
        series = None if self.series is None else self.series * factor + offset
        return ResponseSet(
            series, self.summaries * factor + offset, self.metric_names, self.sample_ids
        )
