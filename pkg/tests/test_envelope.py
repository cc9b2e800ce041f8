
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probfe.core import ResponseSet, default_study_spec
from probfe.envelope import (
    EmptyInput,
    EnvelopeDiff,
    compare_envelopes,
    convergence_trace,
    format_diff_table,
    load_envelope_dir,
    percentile,
    pointwise_envelope,
    write_convergence_csv,
    write_diff_csv,
    write_envelope_csvs,
)
from probfe.sampler import draw_monte_carlo
from probfe.simulator import METRIC_UNITS, build_simulator

from conftest import make_spec


def test_percentile_on_integer_grid():
    v = np.arange(101.0)
    assert percentile(v, 5) == 5.0 and percentile(v, 95) == 95.0
    assert percentile(np.full(7, 3.5), 37) == 3.5
    with pytest.raises(EmptyInput):
        percentile([], 50)


def test_percentile_normal_800():
    z = np.random.default_rng(0).standard_normal(800)
    assert abs(percentile(z, 95) - 1.645) < 0.1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.floats(0, 100), st.floats(0, 100))
def test_percentile_bounded_and_monotone(values, p, q):
    lo, hi = sorted((p, q))
    a, b = percentile(values, lo), percentile(values, hi)
    assert min(values) <= a <= max(values)
    assert a <= b + 1e-9 * (1 + abs(b))


def _responses(series, names=("a", "b")):
    return ResponseSet.from_series(series, names)


def test_identical_series_collapse_bands():
    curve = np.array([[0.0, 1.0, 2.0], [5.0, 4.0, 3.0]])
    env = pointwise_envelope(_responses(np.tile(curve, (10, 1, 1))))
    for band in (env.p_lo, env.mean, env.p_hi):
        np.testing.assert_allclose(band, curve, rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(-100, 100), st.booleans())
def test_scaling_translation_and_ordering(seed, c, shift, trimmed):
    series = np.random.default_rng(seed).normal(size=(30, 2, 5))
    base = pointwise_envelope(_responses(series), trimmed=trimmed)
    scaled = pointwise_envelope(_responses(series * c), trimmed=trimmed)
    moved = pointwise_envelope(_responses(series + shift), trimmed=trimmed)
    np.testing.assert_allclose(scaled.bands(), c * base.bands(), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(moved.bands(), base.bands() + shift, rtol=0, atol=1e-9 * (1 + abs(shift)))
    assert np.all(base.p_lo <= base.p_hi)
    if trimmed:
        # only the trimmed mean is guaranteed to sit inside the band
        assert np.all(base.p_lo <= base.mean + 1e-12) and np.all(base.mean <= base.p_hi + 1e-12)


def test_trimmed_mean_drops_outliers():
    series = np.zeros((100, 1, 1))
    series[0] = 1e6
    full = pointwise_envelope(_responses(series, ("a",)))
    trimmed = pointwise_envelope(_responses(series, ("a",)), trimmed=True)
    assert full.mean[0, 0] == pytest.approx(1e4) and trimmed.mean[0, 0] == 0.0


def test_half_band_width_linear_gaussian():
    spec = make_spec([0.0, 3.0], [0.0, 2.0], metrics=("y",))
    spec = spec.replace(simulator={"type": "synthetic", "key_set": [1], "baseline": [10.0], "quad_scale": 0.0,
                                   "coefficients": [[0.0, 1.5]], "t_steps": 21, "settle_steps": 2})
    sim = build_simulator(spec)
    X = draw_monte_carlo(spec, 10_000, 3).values
    env = pointwise_envelope(_responses(np.stack([sim.series(x) for x in X]), ("y",)))
    half = (env.p_hi[0, -1] - env.p_lo[0, -1]) / 2
    assert half == pytest.approx(1.645 * 1.5 * 2.0, rel=0.05)


def test_times_span_cycle():
    env = pointwise_envelope(_responses(np.zeros((3, 2, 11))), cycle_ms=1000.0)
    assert env.times[0] == 0.0 and env.times[-1] == 1000.0


def test_constant_stream_converges_first_eligible():
    trace = convergence_trace(np.ones((500, 1)), 0, 100, 0.01)
    assert [cp.n for cp in trace.checkpoints] == [100, 200, 300, 400, 500]
    assert trace.converged_at == 300


def test_oscillating_stream_never_converges():
    n = np.arange(1, 1001)
    stream = ((-1.0) ** n * n)[:, None]
    trace = convergence_trace(stream, 0, 100, 0.01)
    assert trace.converged_at is None and len(trace.checkpoints) == 10


def test_synthetic_study_converges():
    spec = default_study_spec()
    sim = build_simulator(spec)
    X = draw_monte_carlo(spec, 800, 1).values
    peaks = sim.model.peak_response(X)
    trace = convergence_trace(peaks, 0, 100, 0.01)
    assert trace.converged_at is not None and trace.converged_at <= 800
    ns = [cp.n for cp in trace.checkpoints]
    assert ns == sorted(set(ns))


def _env(rng, shape=(20, 7, 5)):
    names = tuple(default_study_spec().metrics)
    return pointwise_envelope(ResponseSet.from_series(rng.normal(size=shape), names))


def test_compare_identical_and_offset(rng):
    e1 = _env(rng)
    d0 = compare_envelopes(e1, e1)
    assert np.all(d0.headline == 0.0)
    series = np.array(rng.normal(size=(20, 7, 5)))
    shifted = series.copy()
    shifted[:, 2, :] += 2.44
    a = pointwise_envelope(ResponseSet.from_series(series, e1.metric_names))
    b = pointwise_envelope(ResponseSet.from_series(shifted, e1.metric_names))
    diff = compare_envelopes(a, b)
    assert diff.headline[2] == pytest.approx(2.44, abs=1e-12)
    assert np.all(np.delete(diff.headline, 2) == 0.0)
    assert np.all(diff.d_p_lo >= 0) and np.all(diff.d_mean >= 0)


def test_diff_table_rendering():
    metrics = tuple(default_study_spec().metrics)
    values = np.array([1.07, 0.81, 2.44, 2.46, 0.89, 1.48, 1.6])
    diff = EnvelopeDiff(metrics, values, values / 2, values / 3)
    table = format_diff_table(diff, METRIC_UNITS).splitlines()
    assert table[0].split() == ["metric", "difference", "unit"]
    rows = [line.split() for line in table[1:]]
    assert [r[0] for r in rows] == list(metrics)
    assert [r[1] for r in rows] == ["1.07", "0.81", "2.44", "2.46", "0.89", "1.48", "1.60"]
    assert [r[2] for r in rows] == ["deg", "mm", "deg", "deg", "mm", "deg", "MPa"]


def test_csv_outputs(tmp_path, rng):
    env = _env(rng)
    files = write_envelope_csvs(env, tmp_path)
    assert len(files) == 7
    assert files[0].read_text().splitlines()[0] == "t,p_lo,mean,p_hi"
    again = load_envelope_dir(tmp_path, env.metric_names)
    assert np.array_equal(again.bands(), env.bands())
    write_diff_csv(compare_envelopes(env, again), tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "metric,d_p_lo,d_mean,d_p_hi,headline" and len(lines) == 8
    trace = convergence_trace(np.ones((300, 1)), 0, 100, 0.01)
    write_convergence_csv(trace, tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "n,mean,p_lo,p_hi,converged"
    assert [r.split(",")[-1] for r in rows[1:]] == ["0", "0", "1"]


def test_standard_errors_shape_and_scale(rng):
    env = _env(rng, (400, 7, 5))
    se = env.standard_errors()
    assert se.shape == (3, 7, 5)
    np.testing.assert_allclose(se[1], env.std / 20.0)
    assert np.all(se[0] > se[1])


def test_p95_hit_rate_matches_order_statistic_theory():
    # SE of the 95th percentile of n normals is sqrt(p(1-p)/n) / phi(z_p); the
    # share of seeds landing within +-0.1 of 1.645 must match that spread
    from scipy.stats import binom, norm

    from probfe.sampler import derive_seed

    spec = make_spec([0.0], [1.0])
    se = np.sqrt(0.05 * 0.95 / 800) / norm.pdf(norm.ppf(0.95))
    p_inside = 2 * norm.cdf(0.1 / se) - 1
    trials = 400
    inside = sum(
        abs(percentile(draw_monte_carlo(spec, 800, derive_seed(77, "hit", s)).values[:, 0], 95) - 1.645) < 0.1
        for s in range(trials)
    )
    lo, hi = binom.ppf([0.0005, 0.9995], trials, p_inside)
    assert lo <= inside <= hi
