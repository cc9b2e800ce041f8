"""End-to-end study: Monte Carlo and response-surface analyses on the full
variable set, key-variable reduction, then both analyses again on the
reduced set, with envelope comparisons between them."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .core import ResponseSet, SampleMatrix, StudyError, StudySpec, expand_to_full
from .envelope import (
    ConvergenceTrace,
    Envelope,
    EnvelopeDiff,
    compare_envelopes,
    convergence_trace,
    format_diff_table,
    pointwise_envelope,
    write_convergence_csv,
    write_diff_csv,
    write_envelope_csvs,
)
from .rsm import Basis, fit_rse, fit_series, write_coefficients_csv
from .sampler import derive_seed, draw_monte_carlo, draw_regular_design, write_samples_csv
from .sensitivity import (
    ReducedSet,
    SensitivityMode,
    reduce_key_set,
    sensitivity_matrix,
    sensitivity_scores,
    write_sensitivity_csv,
)
from .simulator import METRIC_UNITS, SimulationResult, Simulator, build_simulator

log = logging.getLogger(__name__)

MCST_FULL = "MCST-full"
RSM_FULL = "RSM-full"
MCST_REDUCED = "MCST-reduced"
RSM_REDUCED = "RSM-reduced"


class Executor(Protocol):
    @property
    def worker_count(self) -> int: ...

    def run_batch(self, samples: SampleMatrix, seed: int = 0, tag: str = "") -> list[SimulationResult]: ...


class StageFailed(StudyError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class AnalysisRecord:
    label: str
    n_sims: int
    directory: str
    envelope_files: list[str] = field(default_factory=list)
    convergence: dict[str, Any] | None = None
    reduced_set: list[str] | None = None
    diffs_vs_mcst_full: dict[str, dict[str, float]] | None = None
    surrogate: dict[str, Any] | None = None
    skipped: bool = False


@dataclass
class StudyReport:
    analyses: list[AnalysisRecord] = field(default_factory=list)
    comparisons: list[dict[str, Any]] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    gap_report: dict[str, Any] | None = None
    completed_stages: list[str] = field(default_factory=list)

    def analysis(self, label: str) -> AnalysisRecord:
        for rec in self.analyses:
            if rec.label == label:
                return rec
        raise KeyError(label)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class _Run:
    """Mutable state shared by the stages of one study."""

    spec: StudySpec
    executor: Executor
    out: Path
    cycle_ms: float
    report: StudyReport = field(default_factory=StudyReport)
    envelopes: dict[str, Envelope] = field(default_factory=dict)
    serial_seconds: float = 0.0
    simulations: int = 0

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(self.spec.summary_for(m) for m in self.spec.metrics)

    def envelope(self, responses: ResponseSet) -> Envelope:
        lo, hi = self.spec.percentiles
        return pointwise_envelope(responses, lo, hi, cycle_ms=self.cycle_ms)

    def simulate(self, samples: SampleMatrix, tag: str) -> ResponseSet:
        results = self.executor.run_batch(samples, self.spec.seed, tag)
        self.serial_seconds += sum(r.duration for r in results)
        self.simulations += len(results)
        series = np.stack([r.series for r in results])
        summaries = np.stack([r.summaries for r in results])
        return ResponseSet(series, summaries, self.spec.metrics, [r.sample_id for r in results])


def write_summaries_csv(responses: ResponseSet, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *responses.metric_names])
        for sid, row in zip(responses.sample_ids, responses.summaries):
            writer.writerow([sid, *(repr(float(v)) for v in row)])


def write_series_csv(responses: ResponseSet, path: Path) -> None:
    """Long format: one row per (sample, metric) with the T step values."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "metric", *(f"t{k}" for k in range(responses.t_steps))])
        for sid, block in zip(responses.sample_ids, responses.series):
            for name, row in zip(responses.metric_names, block):
                writer.writerow([sid, name, *(repr(float(v)) for v in row)])


def read_series_csv(path: Path, summary: str | list[str] = "peak") -> ResponseSet:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r][1:]
    metrics: list[str] = []
    ids: list[int] = []
    for r in rows:
        if r[1] not in metrics:
            metrics.append(r[1])
        if not ids or ids[-1] != int(r[0]):
            ids.append(int(r[0]))
    values = np.array([[float(v) for v in r[2:]] for r in rows], dtype=float)
    series = values.reshape(len(ids), len(metrics), -1)
    return ResponseSet.from_series(series, metrics, ids, summary)


def _trace_dict(trace: ConvergenceTrace) -> dict[str, Any]:
    return {
        "metric": trace.metric,
        "window": trace.window,
        "rel_tol": trace.rel_tol,
        "converged_at": trace.converged_at,
        "checkpoints": [asdict(cp) for cp in trace.checkpoints],
    }


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2))


def _mcst(run: _Run, label: str, spec_for_draw: StudySpec, seed_stream: str) -> None:
    spec = run.spec
    directory = run.out / label.lower()
    directory.mkdir(parents=True, exist_ok=True)
    if spec.n_mc == 0:
        run.report.analyses.append(AnalysisRecord(label, 0, str(directory), skipped=True))
        return
    drawn = draw_monte_carlo(spec_for_draw, spec.n_mc, derive_seed(spec.seed, seed_stream))
    samples = expand_to_full(drawn, spec)
    write_samples_csv(samples, directory / "samples.csv")
    responses = run.simulate(samples, label.lower())
    write_summaries_csv(responses, directory / "summaries.csv")
    env = run.envelope(responses)
    files = write_envelope_csvs(env, directory)
    trace = convergence_trace(
        responses.summaries,
        0,
        spec.convergence.window,
        spec.convergence.rel_tol,
        spec.percentiles,
        spec.metrics[0],
    )
    write_convergence_csv(trace, directory / "convergence.csv")
    run.envelopes[label] = env
    run.report.analyses.append(
        AnalysisRecord(
            label,
            spec.n_mc,
            str(directory),
            [str(p) for p in files],
            convergence=_trace_dict(trace),
        )
    )


def _rsm(
    run: _Run, label: str, active: StudySpec, n_trials: int, seed_stream: str, propagate_stream: str
) -> tuple[AnalysisRecord, Any, SampleMatrix]:
    """Design, simulate, fit and propagate over the variables of ``active``;
    returns the record, the scalar surrogate and the propagated samples."""
    spec = run.spec
    directory = run.out / label.lower().replace("@", "_")
    directory.mkdir(parents=True, exist_ok=True)
    basis = Basis.from_config(spec.basis)
    design = draw_regular_design(active, n_trials, derive_seed(spec.seed, seed_stream))
    write_samples_csv(design, directory / "design.csv")
    responses = run.simulate(expand_to_full(design, spec), label.lower())
    write_summaries_csv(responses, directory / "summaries.csv")
    model = fit_rse(design, responses, basis)
    write_coefficients_csv(model, directory / "coefficients.csv")
    series_model = fit_series(design, responses, basis, run.kinds)
    X1 = draw_monte_carlo(
        active, spec.surrogate_samples, derive_seed(spec.seed, propagate_stream)
    )
    env = run.envelope(series_model.predict(X1))
    files = write_envelope_csvs(env, directory)
    run.envelopes[label] = env
    stats = model.training_stats
    record = AnalysisRecord(
        label,
        n_trials,
        str(directory),
        [str(p) for p in files],
        surrogate={
            "basis": model.basis.value,
            "n_train": stats.n_train,
            "residual_rms": dict(zip(model.metric_names, stats.residual_rms)),
            "condition": stats.condition,
            "propagated_samples": spec.surrogate_samples,
        },
    )
    run.report.analyses.append(record)
    return record, model, X1


def _rsm_full(run: _Run) -> ReducedSet:
    spec = run.spec
    active_names = [v.name for v in spec.variables if v.std_dev > 0]
    active = spec.subset(active_names)
    record, model, X1 = _rsm(run, RSM_FULL, active, spec.n_rsm, "rsm-full", "rsm-full-propagate")
    A = sensitivity_matrix(
        model, X1, active.std_devs, SensitivityMode.from_config(spec.sensitivity_mode), active.means
    )
    scores = sensitivity_scores(A)
    k_override = spec.k_override if spec.k_override is None else min(spec.k_override, active.d)
    reduced = reduce_key_set(scores, k_override, spec.gap_window)
    directory = Path(record.directory)
    write_sensitivity_csv(scores, reduced, directory / "sensitivity.csv")
    gap = asdict(reduced.gap_report)
    _write_json(directory / "reduced.json", {"selected": list(reduced.selected), "k": reduced.k, "gap_report": gap})
    record.reduced_set = list(reduced.selected)
    run.report.gap_report = gap
    return reduced


def _compare(run: _Run, a: str, b: str) -> dict[str, Any] | None:
    if a not in run.envelopes or b not in run.envelopes:
        return None
    diff: EnvelopeDiff = compare_envelopes(run.envelopes[a], run.envelopes[b])
    directory = run.out / "diffs"
    directory.mkdir(exist_ok=True)
    name = f"diff_{a}_vs_{b}".lower().replace("@", "_")
    write_diff_csv(diff, directory / f"{name}.csv")
    return {
        "a": a,
        "b": b,
        "file": str(directory / f"{name}.csv"),
        "diffs": diff.as_dict(),
        "table": format_diff_table(diff, METRIC_UNITS),
    }


def run_study(
    spec: StudySpec,
    out: str | Path,
    executor: Executor | None = None,
    simulator: Simulator | None = None,
) -> StudyReport:
    """Run the four analyses in order and write every artifact under ``out``.

    A failing stage writes ``partial_report.json`` with what finished and
    raises StageFailed naming the stage.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if executor is None:
        from .distributed import LocalExecutor

        simulator = simulator or build_simulator(spec)
        executor = LocalExecutor(simulator, int(spec.distributed.get("workers", 1)))
    run = _Run(spec, executor, out, float(spec.simulator.get("cycle_ms", 1000.0)))
    started = time.perf_counter()
    stage = MCST_FULL
    try:
        _mcst(run, MCST_FULL, spec, "mcst-full")
        run.report.completed_stages.append(stage)

        stage = RSM_FULL
        reduced = _rsm_full(run)
        run.report.completed_stages.append(stage)
        rspec = spec.subset(sorted(reduced.selected, key=spec.variable_index))

        stage = MCST_REDUCED
        _mcst(run, MCST_REDUCED, rspec, "mcst-reduced")
        run.report.analyses[-1].reduced_set = list(reduced.selected)
        run.report.completed_stages.append(stage)

        stage = RSM_REDUCED
        for n in spec.reduced_trials:
            label = RSM_REDUCED if n == spec.n_rsm else f"{RSM_REDUCED}@{n}"
            record, _, _ = _rsm(
                run, label, rspec, n, f"rsm-reduced-{n}", "rsm-reduced-propagate"
            )
            record.reduced_set = list(reduced.selected)
        run.report.completed_stages.append(stage)
    except Exception as exc:
        run.report.timing = _timing(run, started)
        _write_json(out / "partial_report.json", {"failed_stage": stage, "error": str(exc), **asdict(run.report)})
        raise StageFailed(stage, exc) from exc

    for rec in run.report.analyses:
        if rec.label != MCST_FULL and rec.label in run.envelopes and MCST_FULL in run.envelopes:
            rec.diffs_vs_mcst_full = compare_envelopes(
                run.envelopes[rec.label], run.envelopes[MCST_FULL]
            ).as_dict()
    pairs = [(MCST_REDUCED, MCST_FULL), (RSM_FULL, MCST_FULL)]
    pairs += [(rec.label, MCST_REDUCED) for rec in run.report.analyses if rec.label.startswith(RSM_REDUCED)]
    for a, b in pairs:
        comparison = _compare(run, a, b)
        if comparison is not None:
            run.report.comparisons.append(comparison)
    run.report.timing = _timing(run, started)
    (out / "report.json").write_text(run.report.to_json())
    return run.report


def _timing(run: _Run, started: float) -> dict[str, float]:
    return {
        "wall_clock_s": time.perf_counter() - started,
        "serial_equivalent_s": run.serial_seconds,
        "simulations": run.simulations,
        "workers": run.executor.worker_count,
    }
