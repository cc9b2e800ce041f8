"""Percentile envelopes, running convergence traces and envelope differences."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .core import ResponseSet, ShapeMismatch, StudyError

ABS_FLOOR = 1e-9


class EmptyInput(StudyError, ValueError):
    pass


def percentile(values: Sequence[float] | np.ndarray, p: float, axis: int | None = None):
    """Linear interpolation between order statistics at zero-based rank p/100 * (N-1)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise EmptyInput("percentile of an empty vector")
    if not 0 <= p <= 100:
        raise ValueError(f"p must be in [0, 100], got {p}")
    return np.percentile(arr, p, axis=axis, method="linear")


@dataclass(frozen=True, eq=False)
class Envelope:
    """Bands are (m, T) arrays; ``peak_stats`` is (m, 3) = (p_lo, mean, p_hi) of the summaries."""

    metric_names: tuple[str, ...]
    p_lo: np.ndarray
    mean: np.ndarray
    p_hi: np.ndarray
    std: np.ndarray
    percentiles: tuple[float, float]
    n_samples: int
    peak_stats: np.ndarray
    peak_std: np.ndarray
    times: np.ndarray

    @property
    def t_steps(self) -> int:
        return self.p_lo.shape[1]

    def bands(self) -> np.ndarray:
        """(3, m, T) stack of p_lo, mean, p_hi."""
        return np.stack([self.p_lo, self.mean, self.p_hi])

    def standard_errors(self) -> np.ndarray:
        """(3, m, T) normal-theory standard errors of p_lo, mean and p_hi.

        A quantile q_p of N draws has SE sqrt(p(1-p)/N) / f(q_p); the density
        is taken from a normal fit with the band's sample standard deviation.
        """
        return _band_se(self.std, self.percentiles, self.n_samples)

    def peak_standard_errors(self) -> np.ndarray:
        return _band_se(self.peak_std, self.percentiles, self.n_samples).T


def _band_se(std: np.ndarray, percentiles: tuple[float, float], n: int) -> np.ndarray:
    out = []
    for p in (percentiles[0], None, percentiles[1]):
        if p is None:
            out.append(std / np.sqrt(n))
            continue
        q = p / 100.0
        out.append(np.sqrt(q * (1 - q) / n) / norm.pdf(norm.ppf(q)) * std)
    return np.stack(out)


def _trimmed_mean(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    keep = (values >= lo) & (values <= hi)
    return np.sum(np.where(keep, values, 0.0), axis=0) / np.maximum(keep.sum(axis=0), 1)


def pointwise_envelope(
    responses: ResponseSet,
    p_lo: float = 5.0,
    p_hi: float = 95.0,
    trimmed: bool = False,
    cycle_ms: float | None = None,
) -> Envelope:
    """Per-step percentile bands and mean over all samples.

    With ``trimmed=True`` the mean is taken only over values inside
    [p_lo, p_hi] at each step.
    """
    if responses.series is None:
        raise ShapeMismatch("response set has no time series")
    n = responses.n
    if n < 2:
        raise EmptyInput("an envelope needs at least 2 samples")
    series = responses.series
    lo = percentile(series, p_lo, axis=0)
    hi = percentile(series, p_hi, axis=0)
    mean = _trimmed_mean(series, lo, hi) if trimmed else series.mean(axis=0)
    s = responses.summaries
    s_lo, s_hi = percentile(s, p_lo, axis=0), percentile(s, p_hi, axis=0)
    s_mean = _trimmed_mean(s, s_lo, s_hi) if trimmed else s.mean(axis=0)
    t_steps = series.shape[2]
    times = (
        np.arange(t_steps, dtype=float)
        if cycle_ms is None
        else np.linspace(0.0, cycle_ms, t_steps)
    )
    return Envelope(
        metric_names=responses.metric_names,
        p_lo=lo,
        mean=mean,
        p_hi=hi,
        std=series.std(axis=0, ddof=1),
        percentiles=(p_lo, p_hi),
        n_samples=n,
        peak_stats=np.column_stack([s_lo, s_mean, s_hi]),
        peak_std=s.std(axis=0, ddof=1),
        times=times,
    )


@dataclass(frozen=True)
class Checkpoint:
    n: int
    mean: float
    p_lo: float
    p_hi: float


@dataclass(frozen=True)
class ConvergenceTrace:
    checkpoints: tuple[Checkpoint, ...]
    converged_at: int | None
    window: int
    rel_tol: float
    metric: str = ""


def _quiet(new: Checkpoint, old: Checkpoint, rel_tol: float) -> bool:
    return all(
        abs(a - b) < max(rel_tol * abs(b), ABS_FLOOR)
        for a, b in ((new.mean, old.mean), (new.p_lo, old.p_lo), (new.p_hi, old.p_hi))
    )


def convergence_trace(
    stream: Iterable[Sequence[float]],
    metric: int,
    window: int,
    rel_tol: float,
    percentiles: tuple[float, float] = (5.0, 95.0),
    metric_name: str = "",
) -> ConvergenceTrace:
    """Running mean and percentiles of one metric, checkpointed every ``window`` samples.

    Converged at the first checkpoint that completes two consecutive
    checkpoint-to-checkpoint changes below ``rel_tol`` in all three statistics.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    seen: list[float] = []
    checkpoints: list[Checkpoint] = []
    quiet_run = 0
    converged_at = None
    for row in stream:
        seen.append(float(np.asarray(row, dtype=float).reshape(-1)[metric]))
        if len(seen) % window:
            continue
        arr = np.asarray(seen)
        cp = Checkpoint(
            len(seen),
            float(arr.mean()),
            float(percentile(arr, percentiles[0])),
            float(percentile(arr, percentiles[1])),
        )
        if checkpoints:
            quiet_run = quiet_run + 1 if _quiet(cp, checkpoints[-1], rel_tol) else 0
            if quiet_run >= 2 and converged_at is None:
                converged_at = cp.n
        checkpoints.append(cp)
    return ConvergenceTrace(tuple(checkpoints), converged_at, window, rel_tol, metric_name)


@dataclass(frozen=True, eq=False)
class EnvelopeDiff:
    """Per metric: max over steps of |difference| in p_lo, mean, p_hi, and their max."""

    metric_names: tuple[str, ...]
    d_p_lo: np.ndarray
    d_mean: np.ndarray
    d_p_hi: np.ndarray

    @property
    def headline(self) -> np.ndarray:
        return np.maximum(np.maximum(self.d_p_lo, self.d_mean), self.d_p_hi)

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            name: {
                "d_p_lo": float(self.d_p_lo[j]),
                "d_mean": float(self.d_mean[j]),
                "d_p_hi": float(self.d_p_hi[j]),
                "headline": float(self.headline[j]),
            }
            for j, name in enumerate(self.metric_names)
        }


def compare_envelopes(e1: Envelope, e2: Envelope) -> EnvelopeDiff:
    if e1.metric_names != e2.metric_names:
        raise ShapeMismatch(f"metrics differ: {e1.metric_names} vs {e2.metric_names}")
    if e1.p_lo.shape != e2.p_lo.shape:
        raise ShapeMismatch(f"band shapes differ: {e1.p_lo.shape} vs {e2.p_lo.shape}")
    diff = np.abs(e1.bands() - e2.bands()).max(axis=2)
    return EnvelopeDiff(e1.metric_names, diff[0], diff[1], diff[2])


def format_diff_table(diff: EnvelopeDiff, units: dict[str, str] | None = None) -> str:
    """Plain-text table of headline differences, one line per metric in envelope order."""
    units = units or {}
    width = max(len("metric"), *(len(n) for n in diff.metric_names))
    lines = [f"{'metric':<{width}}  {'difference':>10}  unit"]
    for name, value in zip(diff.metric_names, diff.headline):
        lines.append(f"{name:<{width}}  {value:>10.2f}  {units.get(name, '')}".rstrip())
    return "\n".join(lines)


def write_envelope_csvs(envelope: Envelope, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, name in enumerate(envelope.metric_names):
        path = directory / f"envelope_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "p_lo", "mean", "p_hi"])
            for k, t in enumerate(envelope.times):
                writer.writerow(
                    [repr(float(t))]
                    + [repr(float(b[j, k])) for b in (envelope.p_lo, envelope.mean, envelope.p_hi)]
                )
        paths.append(path)
    return paths


def read_envelope_csv(path: str | Path) -> np.ndarray:
    """(T, 4) array of t, p_lo, mean, p_hi."""
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def load_envelope_dir(directory: str | Path, metrics: Sequence[str]) -> Envelope:
    """Rebuild an Envelope from envelope_<metric>.csv files (bands only; spread and
    sample count are unknown and left as zero)."""
    tables = [read_envelope_csv(Path(directory) / f"envelope_{m}.csv") for m in metrics]
    bands = np.stack(tables)  # (m, T, 4)
    m = len(metrics)
    return Envelope(
        metric_names=tuple(metrics),
        p_lo=bands[:, :, 1],
        mean=bands[:, :, 2],
        p_hi=bands[:, :, 3],
        std=np.zeros(bands.shape[:2]),
        percentiles=(np.nan, np.nan),
        n_samples=0,
        peak_stats=np.full((m, 3), np.nan),
        peak_std=np.zeros(m),
        times=bands[0, :, 0],
    )


def write_convergence_csv(trace: ConvergenceTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "mean", "p_lo", "p_hi", "converged"])
        for cp in trace.checkpoints:
            flag = int(trace.converged_at is not None and cp.n >= trace.converged_at)
            writer.writerow([cp.n, repr(cp.mean), repr(cp.p_lo), repr(cp.p_hi), flag])


def write_diff_csv(diff: EnvelopeDiff, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "d_p_lo", "d_mean", "d_p_hi", "headline"])
        for j, name in enumerate(diff.metric_names):
            writer.writerow(
                [name]
                + [repr(float(v[j])) for v in (diff.d_p_lo, diff.d_mean, diff.d_p_hi, diff.headline)]
            )
