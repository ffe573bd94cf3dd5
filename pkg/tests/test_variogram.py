import numpy as np
import pytest
from numpy.testing import assert_allclose

from lvlmc.errors import FitError, InvariantError
from lvlmc.variogram import (
    ExperimentalVariogram,
    Structure,
    VariogramModel,
    covariance_eval,
    experimental_variogram,
    fit_exponential,
    format_model,
    lag_pairs,
    parse_model,
    write_experimental_csv,
)


def brute_variogram(X, vi, vj, w, n):
    s = np.zeros(n)
    c = np.zeros(n, dtype=int)
    d = np.zeros(n)
    for a in range(len(X)):
        for b in range(a + 1, len(X)):
            h = np.sqrt(np.sum((X[a] - X[b]) ** 2))
            k = int(np.floor(h / w + 0.5))
            if 1 <= k <= n:
                s[k - 1] += (vi[a] - vi[b]) * (vj[a] - vj[b])
                c[k - 1] += 1
                d[k - 1] += h
    with np.errstate(invalid="ignore"):
        return s / (2 * c), c, d / c


def test_matches_double_loop():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 50, size=(150, 3))
    vi, vj = rng.normal(size=150), rng.normal(size=150)
    ev = experimental_variogram(X, vi, vj, lag_width=4.0, n_lags=8)
    g, c, d = brute_variogram(X, vi, vj, 4.0, 8)
    np.testing.assert_array_equal(ev.pairs, c)
    assert_allclose(ev.gamma, g, rtol=1e-12)
    assert_allclose(ev.lags, d, rtol=1e-12)


def test_constant_values_give_zero():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 20, size=(60, 3))
    ev = experimental_variogram(X, np.full(60, 3.0), lag_width=2.0, n_lags=5)
    assert np.all(ev.gamma[~ev.empty] == 0.0)


def test_cross_symmetry_exact():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 20, size=(100, 3))
    a, b = rng.normal(size=100), rng.normal(size=100)
    e1 = experimental_variogram(X, a, b, lag_width=2.0, n_lags=6)
    e2 = experimental_variogram(X, b, a, lag_width=2.0, n_lags=6)
    assert np.array_equal(e1.gamma, e2.gamma)


def test_pure_nugget_monte_carlo():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 100, size=(2000, 3))
    ev = experimental_variogram(X, rng.normal(size=2000), lag_width=5.0, n_lags=10)
    assert np.all(np.abs(ev.gamma[1:] - 1.0) < 0.1)


def test_empty_lags_flagged():
    X = np.array([[0, 0, 0], [1, 0, 0], [10, 0, 0]], dtype=float)
    ev = experimental_variogram(X, [0.0, 1.0, 2.0], lag_width=1.0, n_lags=12)
    assert ev.empty[1] and np.isnan(ev.gamma[1])
    assert not ev.empty[0] and not ev.empty[8]


def test_shared_pairs_reuse():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 30, size=(80, 3))
    v = rng.normal(size=80)
    P = lag_pairs(X, 3.0, 6)
    a = experimental_variogram(X, v, pairs=P)
    b = experimental_variogram(X, v, lag_width=3.0, n_lags=6)
    assert np.array_equal(a.gamma, b.gamma, equal_nan=True)


def _curve(h, c0, a, c):
    return c0 + c * (1 - np.exp(-3 * h / a))


def test_fit_recovers_noiseless_exponential():
    h = 5.0 * np.arange(1, 21)
    ev = ExperimentalVariogram(h, _curve(h, 0.0, 50.0, 1.0), np.full(20, 300))
    m = fit_exponential(ev)
    s = m.structures[0]
    assert s.range == pytest.approx(50.0, rel=0.02)
    assert s.sill == pytest.approx(1.0, rel=0.02)
    assert m.nugget < 0.02


def test_fit_pure_nugget_collapses():
    h = 5.0 * np.arange(1, 11)
    ev = ExperimentalVariogram(h, np.full(10, 2.0), 50 + 100 * np.arange(10))
    m = fit_exponential(ev)
    assert m.structures[0].range == pytest.approx(1e-3 * h.max())
    assert m.structures[0].sill == 0.0
    assert m.nugget == pytest.approx(2.0, rel=1e-9)


def test_fit_not_worse_than_truth():
    rng = np.random.default_rng(5)
    h = 4.0 * np.arange(1, 16)
    n = rng.integers(100, 1000, size=15)
    g = _curve(h, 0.1, 40.0, 0.9) + rng.normal(scale=0.03, size=15)
    ev = ExperimentalVariogram(h, g, n)
    m = fit_exponential(ev)
    w = n / h ** 2
    w = w / w.sum()

    def obj(c0, a, c):
        return np.sum(w * (_curve(h, c0, a, c) - g) ** 2)

    s = m.structures[0]
    assert obj(m.nugget, s.range, s.sill) <= obj(0.1, 40.0, 0.9) + 1e-15


def test_fit_invariant_to_pair_count_scale():
    rng = np.random.default_rng(6)
    h = 4.0 * np.arange(1, 16)
    n = rng.integers(100, 1000, size=15)
    g = _curve(h, 0.2, 30.0, 0.8) + rng.normal(scale=0.02, size=15)
    a = fit_exponential(ExperimentalVariogram(h, g, n))
    b = fit_exponential(ExperimentalVariogram(h, g, n * 37))
    assert a.nugget == pytest.approx(b.nugget, rel=1e-6, abs=1e-12)
    assert a.structures[0].range == pytest.approx(b.structures[0].range, rel=1e-6)


def test_fit_needs_three_lags():
    ev = ExperimentalVariogram(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, np.nan]),
                               np.array([5, 5, 0]))
    with pytest.raises(FitError):
        fit_exponential(ev)


def test_covariance_examples():
    m = VariogramModel.exponential(50.0, sill=2.0)
    assert covariance_eval(m, 0.0) == 2.0
    # practical range: about 5% of the sill left
    assert covariance_eval(m, 50.0) == pytest.approx(2.0 * np.exp(-3.0))
    assert abs(covariance_eval(m, 50.0) / 2.0 - 0.05) < 0.001
    assert covariance_eval(m, 500.0) < 1e-6 * 2.0
    with pytest.raises(ValueError):
        covariance_eval(m, -1.0)


def test_covariance_gamma_identity_and_monotone():
    m = VariogramModel(0.2, (Structure("exponential", 30.0, 0.5), Structure("spherical", 80.0, 0.3),
                             Structure("gaussian", 20.0, 0.1)))
    h = np.linspace(0, 200, 401)
    c = covariance_eval(m, h)
    assert np.array_equal(covariance_eval(m, 0.0) - c, m.gamma(h))
    assert np.all(np.diff(c) <= 0)
    assert c[0] == pytest.approx(1.1)


def test_model_invariants():
    with pytest.raises(InvariantError):
        Structure("cubic", 1.0, 1.0)
    with pytest.raises(InvariantError):
        Structure("exponential", 0.0, 1.0)
    with pytest.raises(InvariantError):
        VariogramModel(-0.1)


def test_text_outputs(tmp_path):
    m = VariogramModel(0.1, (Structure("exponential", 42.5, 0.9),))
    assert parse_model(format_model(m)) == m
    rng = np.random.default_rng(7)
    X = rng.uniform(0, 20, size=(40, 3))
    ev = experimental_variogram(X, rng.normal(size=40), lag_width=2.0, n_lags=4)
    write_experimental_csv(tmp_path / "v.csv", [ev])
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "i,j,lag,gamma,pairs" and len(lines) == 5
