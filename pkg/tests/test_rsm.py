from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probfe.core import SampleMatrix, ResponseSet, default_study_spec
from probfe.rsm import (
    Basis,
    RankDeficient,
    SurrogateModel,
    design_matrix,
    fit_rse,
    fit_series,
    predict,
    read_coefficients_csv,
    write_coefficients_csv,
)
from probfe.sampler import draw_monte_carlo, draw_regular_design
from probfe.simulator import build_simulator

X5 = [[0, 0], [1, 0], [0, 1], [2, 3], [-1, 4]]


def _fraction_normal_solve(rows, y):
    """Exact normal-equations solve in rational arithmetic (Gauss-Jordan)."""
    phi = [[Fraction(1)] + [Fraction(v) for v in r] for r in rows]
    p = len(phi[0])
    a = [[sum(r[i] * r[j] for r in phi) for j in range(p)] + [sum(r[i] * Fraction(v) for r, v in zip(phi, y))] for i in range(p)]
    for c in range(p):
        piv = next(r for r in range(c, p) if a[r][c] != 0)
        a[c], a[piv] = a[piv], a[c]
        a[c] = [v / a[c][c] for v in a[c]]
        for r in range(p):
            if r != c and a[r][c] != 0:
                a[r] = [v - a[r][c] * w for v, w in zip(a[r], a[c])]
    return [float(row[-1]) for row in a]


def test_noiseless_linear_fit_matches_exact_oracle():
    y = [1 + 2 * a + 3 * b for a, b in X5]
    oracle = _fraction_normal_solve(X5, y)
    assert oracle == [1.0, 2.0, 3.0]
    model = fit_rse(SampleMatrix(np.array(X5, float), ("x1", "x2")), np.array(y, float))
    np.testing.assert_allclose(model.coefficients[0], oracle, rtol=0, atol=1e-9)
    np.testing.assert_allclose(predict(model, SampleMatrix(np.array(X5, float), ("x1", "x2")))[:, 0], y, atol=1e-9)


def test_noisy_fit_matches_exact_normal_equations():
    y = [0.3, 1.7, -2.2, 5.5, 0.9]
    oracle = _fraction_normal_solve(X5, y)
    model = fit_rse(SampleMatrix(np.array(X5, float), ("x1", "x2")), np.array(y))
    np.testing.assert_allclose(model.coefficients[0], oracle, rtol=1e-12, atol=1e-12)


def test_constant_response():
    X = SampleMatrix(np.random.default_rng(0).normal(size=(10, 3)), ("a", "b", "c"))
    model = fit_rse(X, np.full(10, 7.25))
    assert model.intercept[0] == pytest.approx(7.25, abs=1e-9)
    np.testing.assert_allclose(model.slopes, 0.0, atol=1e-9)


def test_duplicated_column_names_both():
    v = np.random.default_rng(1).normal(size=(8, 2))
    X = SampleMatrix(np.column_stack([v, v[:, 1]]), ("a", "b", "b_copy"))
    with pytest.raises(RankDeficient) as err:
        fit_rse(X, v[:, 0])
    assert {"b", "b_copy"} <= set(err.value.columns)
    assert "a" not in err.value.columns


def test_too_few_samples():
    with pytest.raises(RankDeficient):
        fit_rse(SampleMatrix(np.eye(3)[:2], ("a", "b", "c")), np.ones(2))


def test_predict_arithmetic():
    model = SurrogateModel(np.array([[1.0, 2.0, 3.0]]), Basis.LINEAR_INTERCEPT, ("a", "b"), ("y",))
    assert predict(model, SampleMatrix(np.array([[4.0, 5.0]]), ("a", "b")))[0, 0] == 24.0
    zero = SurrogateModel(np.zeros((2, 3)), Basis.LINEAR_INTERCEPT, ("a", "b"), ("y", "z"))
    assert np.all(predict(zero, SampleMatrix(np.ones((3, 2)), ("a", "b"))) == 0.0)


def _random_problem(seed, d, basis, n=None):
    rng = np.random.default_rng(seed)
    n = n or 2 * d + (2 if basis is Basis.LINEAR_PLUS_QUAD_DIAG else 0) + 2
    X = rng.normal(size=(n, d)) * rng.uniform(0.5, 3, d) + rng.uniform(-5, 5, d)
    phi = design_matrix(X, basis)
    b = rng.uniform(-4, 4, (2, phi.shape[1]))
    return SampleMatrix(X, tuple(f"v{i}" for i in range(d))), b, phi


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 10), st.sampled_from(list(Basis)))
def test_exact_recovery_and_orthogonality(seed, d, basis):
    X, b, phi = _random_problem(seed, d, basis)
    y = phi @ b.T
    model = fit_rse(X, y, basis)
    np.testing.assert_allclose(model.coefficients, b, rtol=1e-8, atol=1e-8 * np.abs(b).max())
    noisy = y + np.random.default_rng(seed).normal(size=y.shape)
    fitted = fit_rse(X, noisy, basis)
    resid = phi @ fitted.coefficients.T - noisy
    for j in range(2):
        assert np.linalg.norm(phi.T @ resid[:, j]) <= 1e-6 * np.linalg.norm(noisy[:, j])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.floats(-10, 10))
def test_affine_output_equivariance(seed, a, c):
    X, b, phi = _random_problem(seed, 4, Basis.LINEAR_INTERCEPT, n=15)
    y = phi @ b.T + np.random.default_rng(seed).normal(size=(15, 2))
    base = fit_rse(X, y).coefficients
    shifted = fit_rse(X, a * y + c).coefficients
    expected = a * base
    expected[:, 0] += c
    np.testing.assert_allclose(shifted, expected, rtol=1e-8, atol=1e-8 * (1 + np.abs(expected).max()))


def test_surrogate_matches_truth_when_linear():
    spec = default_study_spec()
    spec = spec.replace(simulator={**spec.simulator, "quad_scale": 0.0})
    sim = build_simulator(spec)
    X = draw_regular_design(spec, 100, 5)
    series = np.stack([sim.series(x) for x in X.values])
    responses = ResponseSet.from_series(series, spec.metrics)
    model = fit_rse(X, responses)
    X1 = draw_monte_carlo(spec, 200, 6)
    truth = sim.model.peak_response(X1.values)
    np.testing.assert_allclose(predict(model, X1), truth, rtol=1e-6)
    curves = fit_series(X, responses).predict(X1)
    np.testing.assert_allclose(
        curves.series, np.stack([sim.series(x) for x in X1.values]), rtol=1e-6, atol=1e-9
    )


def test_coefficients_csv_round_trip(tmp_path):
    X, b, phi = _random_problem(3, 3, Basis.LINEAR_PLUS_QUAD_DIAG)
    model = fit_rse(X, phi @ b.T, Basis.LINEAR_PLUS_QUAD_DIAG, ["m1", "m2"])
    write_coefficients_csv(model, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "metric,intercept,v0,v1,v2,v0^2,v1^2,v2^2"
    again = read_coefficients_csv(tmp_path / "c.csv")
    assert again.basis is Basis.LINEAR_PLUS_QUAD_DIAG and again.variable_names == model.variable_names
    assert np.array_equal(again.coefficients, model.coefficients)
