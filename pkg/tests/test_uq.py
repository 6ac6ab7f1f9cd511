import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from femnn.errors import FemNNError, InsufficientDataError, ParameterError
from femnn.linalg import lu_solve
from femnn.problems import make_family
from femnn.uq import (DistributionSpec, draw_inputs, run_monte_carlo, sample, summarize, write_cdf_csv,
                      write_ensemble_csv, write_pdf_csv, write_summary)


def test_uniform_draws():
    x = sample(DistributionSpec.uniform(0.1, 0.7), 0, 100_000)
    assert x.min() >= 0.1 and x.max() < 0.7
    assert x.mean() == pytest.approx(0.4, abs=0.005)


def test_weibull_mean_and_shape():
    spec = DistributionSpec.weibull(40.0, 2.0)
    x = sample(spec, 1, 100_000)
    assert x.mean() == pytest.approx(40.0, abs=0.5)
    ks = stats.kstest(x, stats.weibull_min(2.0, scale=spec.weibull_scale).cdf).statistic
    assert ks < 0.01
    assert spec.std() == pytest.approx(stats.weibull_min(2.0, scale=spec.weibull_scale).std(), rel=1e-12)


def test_tiny_normal_collapses_to_mean():
    x = sample(DistributionSpec.normal(3.0, 1e-12), 2, 10)
    np.testing.assert_allclose(x, 3.0, atol=1e-10)


@pytest.mark.parametrize("args", [("normal", 0.0, 0.0), ("weibull", 40.0, -1.0), ("weibull", 0.0, 2.0),
                                  ("uniform", 1.0, 1.0), ("cauchy", 0.0, 1.0)])
def test_invalid_specs(args):
    with pytest.raises(ParameterError):
        DistributionSpec(*args)


def test_spec_dict_round_trip():
    for spec in (DistributionSpec.normal(1, 2), DistributionSpec.weibull(40, 2), DistributionSpec.uniform(0, 1)):
        assert DistributionSpec.from_dict(spec.to_dict()) == spec


def test_sample_needs_positive_n():
    with pytest.raises(ParameterError):
        sample(DistributionSpec.normal(0, 1), 0, 0)


def test_summary_small_example():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s.mean == 2.5
    assert s.std == pytest.approx(1.2909944, rel=1e-7)
    assert s.skewness == pytest.approx(0.0, abs=1e-15)
    assert s.kurtosis == pytest.approx(1.64, rel=1e-12)


def test_standard_normal_moments():
    s = summarize(sample(DistributionSpec.normal(0, 1), 3, 200_000))
    assert abs(s.mean) < 0.01 and abs(s.std - 1) < 0.01
    assert abs(s.skewness) < 0.03 and abs(s.kurtosis - 3) < 0.05
    assert s.excess_kurtosis == pytest.approx(s.kurtosis - 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 300), st.integers(0, 2**31 - 1))
def test_moments_match_two_pass_oracle(n, seed):
    x = np.random.default_rng(seed).gamma(2.0, 3.0, n) + 100.0
    s = summarize(x)
    mean = sum(x) / n
    dev = [v - mean for v in x]
    m2 = sum(d * d for d in dev) / n
    assert s.mean == pytest.approx(mean, rel=1e-12)
    assert s.std == pytest.approx(np.sqrt(m2 * n / (n - 1)), rel=1e-9)
    assert s.skewness == pytest.approx(stats.skew(x), rel=1e-7, abs=1e-9)
    assert s.kurtosis == pytest.approx(stats.kurtosis(x, fisher=False), rel=1e-7)


def test_degenerate_ensemble():
    s = summarize(np.full(10, 2.0))
    assert s.degenerate and s.std == 0.0
    assert s.skewness is None and s.kurtosis is None


def test_too_few_samples():
    with pytest.raises(InsufficientDataError):
        summarize([1.0, 2.0, 3.0])


def test_histogram_and_cdf():
    x = sample(DistributionSpec.weibull(40, 2), 4, 5000)
    s = summarize(x, n_bins=40)
    assert np.sum(s.densities * np.diff(s.bin_edges)) == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(s.cdf_values) >= 0) and np.all(np.diff(s.cdf_levels) > 0)
    assert s.cdf_levels[-1] == 1.0
    mass = np.cumsum(s.densities * np.diff(s.bin_edges))
    for edge, m in zip(s.bin_edges[1:-1], mass[:-1]):
        assert s.cdf_at(edge) == pytest.approx(m, abs=1.0 / s.n_samples)


@pytest.fixture(scope="module")
def beam():
    return make_family("building_beam")


def test_inputs_are_order_independent(beam):
    x = draw_inputs(beam, 20, seed=5)
    np.testing.assert_array_equal(draw_inputs(beam, 5, seed=5), x[:5])


def test_monte_carlo_is_deterministic(beam):
    a = run_monte_carlo(beam, "fem", 30, seed=1)
    b = run_monte_carlo(beam, "fem", 30, seed=1)
    c = run_monte_carlo(beam, "fem", 30, seed=1, parallel=3)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    np.testing.assert_array_equal(a.outputs, c.outputs)


def test_single_sample_equals_direct_solve(beam):
    res = run_monte_carlo(beam, "fem", 1, seed=2)
    system = beam.assemble(res.inputs[0])
    assert res.outputs[0] == beam.qoi(system, lu_solve(system.K, system.F))


def test_surrogate_fallback_refines_poor_predictions(beam):
    model = beam.build_model(seed=0)
    res = run_monte_carlo(beam, "surrogate-fallback", 8, seed=3, model=model, tol=1e-3)
    exact = run_monte_carlo(beam, "fem", 8, seed=3)
    assert res.n_refined == int(np.sum(res.relative_residuals > 1e-3))
    np.testing.assert_allclose(res.outputs, exact.outputs, rtol=1e-6)


def test_evaluator_errors(beam):
    with pytest.raises(ParameterError):
        run_monte_carlo(beam, "magic", 4, seed=0)
    with pytest.raises(ParameterError):
        run_monte_carlo(beam, "surrogate", 4, seed=0)
    with pytest.raises(ParameterError):
        run_monte_carlo(beam, "fem", 0, seed=0)


def test_failing_sample_is_named():
    truss = make_family("truss23")
    specs = {"A_h": DistributionSpec.normal(0.0, 1e-30)}
    with pytest.raises(FemNNError, match="sample 0"):
        run_monte_carlo(truss, "fem", 2, seed=0, specs=specs)


def test_writers(beam, tmp_path):
    res = run_monte_carlo(beam, "fem", 20, seed=4)
    s = summarize(res.outputs, n_bins=5)
    write_ensemble_csv(res, tmp_path / "e.csv")
    write_summary(s, tmp_path / "s.json")
    write_pdf_csv(s, tmp_path / "p.csv")
    write_cdf_csv(s, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["sample_index", *beam.input_names(), "output"] and len(rows) == 21
    assert json.loads((tmp_path / "s.json").read_text())["mean"] == s.mean
    assert len(list(csv.reader(open(tmp_path / "p.csv")))) == 7
    assert len(list(csv.reader(open(tmp_path / "c.csv")))) == 21
