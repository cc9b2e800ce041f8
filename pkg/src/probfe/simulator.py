"""Black-box simulator interface and the built-in synthetic passive-flexion model.

The synthetic model stands in for an expensive FE run. For input vector x
and cycle step t it returns, per metric j,

    y_j(x, t) = (b0_j + sum_i C_ji (x_i - mu_i) + sum_i Q_ji (x_i - mu_i)^2) * g(t)

where g is zero during the settling steps and then a smoothstep ramp that
reaches 1 on the last step of the cycle.
"""

from __future__ import annotations

import csv
import io
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .core import StudyError, StudySpec, ValidationError, summarize

# Metric display units, used for the difference tables.
METRIC_UNITS = {
    "tf_flexion_angle": "deg",
    "tf_peak_contact_pressure": "MPa",
    "tibial_ap_translation": "mm",
    "tibial_ie_rotation": "deg",
    "pf_flexion_angle": "deg",
    "patellar_ml_displacement": "mm",
    "patellar_tilt": "deg",
    "pf_peak_contact_pressure": "MPa",
}

# Nominal peak values used when a config gives no baseline. Flexion reaches
# about 135 degrees at the end of the passive cycle; the rest are placeholders.
DEFAULT_BASELINES = {
    "tf_flexion_angle": 135.0,
    "tf_peak_contact_pressure": 18.0,
    "tibial_ap_translation": -4.0,
    "tibial_ie_rotation": 6.0,
    "pf_flexion_angle": 95.0,
    "patellar_ml_displacement": 3.0,
    "patellar_tilt": 5.0,
    "pf_peak_contact_pressure": 12.0,
}


class SimFailure(StudyError):
    pass


class IndexOutOfRange(StudyError, IndexError):
    pass


@dataclass(frozen=True)
class SimulationJob:
    job_id: str
    sample_id: int
    inputs: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    job_id: str
    series: np.ndarray | None
    summaries: np.ndarray | None
    duration: float = 0.0
    status: str = "ok"
    reason: str = ""
    sample_id: int = -1

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @classmethod
    def failed(cls, job_id: str, reason: str, duration: float = 0.0, sample_id: int = -1):
        return cls(job_id, None, None, duration, "failed", reason, sample_id)


class Simulator(Protocol):
    metric_names: tuple[str, ...]
    t_steps: int

    def simulate(self, job: SimulationJob) -> SimulationResult: ...


def cycle_profile(t_steps: int, settle_steps: int) -> np.ndarray:
    """g(t): zero while settling, then a smoothstep ramp from 0 to 1."""
    t = np.arange(t_steps, dtype=float)
    span = t_steps - 1 - settle_steps
    if span <= 0:
        g = np.zeros(t_steps)
        g[-1] = 1.0
        return g
    u = np.clip((t - settle_steps) / span, 0.0, 1.0)
    g = u * u * (3.0 - 2.0 * u)
    g[: settle_steps] = 0.0
    return g


@dataclass(frozen=True, eq=False)
class SyntheticModelSpec:
    means: np.ndarray
    baseline: np.ndarray
    coefficients: np.ndarray
    quad_diag: np.ndarray
    key_set: tuple[int, ...]
    t_steps: int = 101
    settle_steps: int = 10
    cycle_ms: float = 1000.0

    def __post_init__(self):
        d = len(self.means)
        m = len(self.baseline)
        if self.coefficients.shape != (m, d) or self.quad_diag.shape != (m, d):
            raise ValidationError(
                f"coefficient matrices must be {m}x{d}, got "
                f"{self.coefficients.shape} and {self.quad_diag.shape}"
            )
        if not 0 <= self.settle_steps < self.t_steps:
            raise ValidationError("settle_steps must be in [0, t_steps)")
        if any(not 0 <= i < d for i in self.key_set):
            raise ValidationError("key_set index out of range")
        for name in ("means", "baseline", "coefficients", "quad_diag"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return len(self.means)

    @property
    def m(self) -> int:
        return len(self.baseline)

    @property
    def profile(self) -> np.ndarray:
        return cycle_profile(self.t_steps, self.settle_steps)

    def peak_response(self, x: np.ndarray) -> np.ndarray:
        """Response amplitude(s) at g = 1; x may be a vector or an (N, d) matrix."""
        dev = np.asarray(x, dtype=float) - self.means
        return self.baseline + dev @ self.coefficients.T + (dev * dev) @ self.quad_diag.T


def synthetic_response(model: SyntheticModelSpec, x: Sequence[float], t: int) -> np.ndarray:
    if not 0 <= t < model.t_steps:
        raise IndexOutOfRange(f"step {t} outside [0, {model.t_steps})")
    return model.peak_response(np.asarray(x, dtype=float)) * model.profile[t]


def generate_synthetic_model(spec: StudySpec, block: Mapping[str, Any]) -> SyntheticModelSpec:
    """Build the synthetic model from a ``simulator`` config block.

    Coefficients not given explicitly are drawn from ``seed`` as effects per
    one standard deviation of the input, then divided by that deviation:
    planted key variables get magnitudes in [key, 2*key), all others in
    [0, minor). With ``key >= dominance * minor`` every key variable moves
    every metric more per sigma than any non-key variable.
    """
    d, m = spec.d, spec.m
    n_vars = block.get("n_vars")
    if n_vars is not None and n_vars != d:
        raise ValidationError(f"simulator n_vars={n_vars} but the study has {d} variables")
    rng = np.random.default_rng(int(block.get("seed", 0)))

    if "key_set" in block and block["key_set"] is not None:
        key_set = tuple(sorted(int(i) for i in block["key_set"]))
    else:
        key_count = int(block.get("key_count", min(19, d)))
        key_set = tuple(sorted(int(i) for i in rng.choice(d, size=key_count, replace=False)))
    if len(set(key_set)) != len(key_set):
        raise ValidationError("key_set has duplicate indices")

    baseline = block.get("baseline")
    if baseline is None:
        baseline = [DEFAULT_BASELINES.get(name, 0.0) for name in spec.metrics]
    baseline = np.asarray(baseline, dtype=float)
    if baseline.shape != (m,):
        raise ValidationError(f"baseline must have {m} entries")
    scales = np.asarray(block.get("metric_scales", [1.0] * m), dtype=float)
    if scales.shape != (m,):
        raise ValidationError(f"metric_scales must have {m} entries")

    key_scale = float(block.get("coeff_scale_key", 1.0))
    minor_scale = float(block.get("coeff_scale_minor", 0.2))
    dominance = float(block.get("dominance", 5.0))
    quad_scale = float(block.get("quad_scale", 0.0))
    if dominance < 5.0:
        raise ValidationError("dominance factor must be >= 5")
    if key_scale < dominance * minor_scale:
        raise ValidationError(
            f"coeff_scale_key={key_scale} must be >= dominance*coeff_scale_minor="
            f"{dominance * minor_scale}"
        )

    sigma = spec.std_devs
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    is_key = np.zeros(d, dtype=bool)
    is_key[list(key_set)] = True

    magnitude = np.where(
        is_key, key_scale * rng.uniform(1.0, 2.0, (m, d)), minor_scale * rng.uniform(0.0, 1.0, (m, d))
    )
    sign = rng.choice([-1.0, 1.0], size=(m, d))
    per_sigma = scales[:, None] * sign * magnitude
    quad_per_sigma2 = quad_scale * scales[:, None] * rng.uniform(-1.0, 1.0, (m, d))

    coefficients = block.get("coefficients")
    coefficients = (
        per_sigma / safe_sigma if coefficients is None else np.asarray(coefficients, dtype=float)
    )
    quad = block.get("quad_diag")
    quad = quad_per_sigma2 / safe_sigma**2 if quad is None else np.asarray(quad, dtype=float)

    return SyntheticModelSpec(
        means=spec.means,
        baseline=baseline,
        coefficients=coefficients,
        quad_diag=quad,
        key_set=key_set,
        t_steps=int(block.get("t_steps", 101)),
        settle_steps=int(block.get("settle_steps", 10)),
        cycle_ms=float(block.get("cycle_ms", 1000.0)),
    )


@dataclass(frozen=True, eq=False)
class SyntheticSimulator:
    model: SyntheticModelSpec
    metric_names: tuple[str, ...]
    summary_kinds: tuple[str, ...]
    job_latency_ms: float = 0.0
    fault_sample_ids: frozenset[int] = field(default_factory=frozenset)

    @property
    def t_steps(self) -> int:
        return self.model.t_steps

    def series(self, x: Sequence[float]) -> np.ndarray:
        return np.outer(self.model.peak_response(np.asarray(x, dtype=float)), self.model.profile)

    def simulate(self, job: SimulationJob) -> SimulationResult:
        start = time.perf_counter()
        if len(job.inputs) != self.model.d:
            raise ValueError(f"job has {len(job.inputs)} inputs, model expects {self.model.d}")
        if self.job_latency_ms > 0:
            time.sleep(self.job_latency_ms / 1000.0)
        if job.sample_id in self.fault_sample_ids:
            raise SimFailure(f"injected fault for sample {job.sample_id}")
        series = self.series(job.inputs)
        summaries = summarize(series[None], self.summary_kinds)[0]
        return SimulationResult(
            job.job_id, series, summaries, time.perf_counter() - start, sample_id=job.sample_id
        )


@dataclass(frozen=True)
class ExecSimulator:
    """Runs an external program per job.

    The inputs go to the child's stdin as one CSV row; the child must print an
    m x T CSV block (one row per metric) on stdout and exit 0.
    """

    command: str
    metric_names: tuple[str, ...]
    summary_kinds: tuple[str, ...]
    t_steps: int = 0
    timeout_s: float | None = None

    def simulate(self, job: SimulationJob) -> SimulationResult:
        start = time.perf_counter()
        row = ",".join(repr(float(v)) for v in job.inputs) + "\n"
        try:
            proc = subprocess.run(
                shlex.split(self.command),
                input=row,
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise SimFailure(f"could not run {self.command!r}: {exc}") from exc
        if proc.returncode != 0:
            raise SimFailure(
                f"{self.command!r} exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        try:
            rows = [[float(v) for v in r] for r in csv.reader(io.StringIO(proc.stdout)) if r]
            series = np.array(rows, dtype=float)
        except ValueError as exc:
            raise SimFailure(f"unparseable output from {self.command!r}: {exc}") from exc
        m = len(self.metric_names)
        if series.ndim != 2 or series.shape[0] != m or (self.t_steps and series.shape[1] != self.t_steps):
            raise SimFailure(f"expected {m}x{self.t_steps or 'T'} output, got {series.shape}")
        if not np.all(np.isfinite(series)):
            raise SimFailure("non-finite values in simulator output")
        summaries = summarize(series[None], self.summary_kinds)[0]
        return SimulationResult(
            job.job_id, series, summaries, time.perf_counter() - start, sample_id=job.sample_id
        )


def simulate(model: Simulator, job: SimulationJob) -> SimulationResult:
    """Run one job, converting SimFailure into a failed result."""
    start = time.perf_counter()
    try:
        return model.simulate(job)
    except SimFailure as exc:
        return SimulationResult.failed(
            job.job_id, str(exc), time.perf_counter() - start, job.sample_id
        )


def build_simulator(spec: StudySpec, block: Mapping[str, Any] | None = None) -> Simulator:
    block = dict(spec.simulator if block is None else block)
    kinds = tuple(spec.summary_for(name) for name in spec.metrics)
    kind = block.get("type", "synthetic")
    if kind == "synthetic":
        return SyntheticSimulator(
            model=generate_synthetic_model(spec, block),
            metric_names=tuple(spec.metrics),
            summary_kinds=kinds,
            job_latency_ms=float(block.get("job_latency_ms", 0.0)),
            fault_sample_ids=frozenset(int(i) for i in block.get("fault_sample_ids", [])),
        )
    if kind == "exec":
        if not block.get("command"):
            raise ValidationError("exec simulator needs a 'command'")
        return ExecSimulator(
            command=block["command"],
            metric_names=tuple(spec.metrics),
            summary_kinds=kinds,
            t_steps=int(block.get("t_steps", 0)),
            timeout_s=block.get("timeout_s"),
        )
    raise ValidationError(f"unknown simulator type {kind!r}")
