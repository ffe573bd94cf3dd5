import numpy as np
import pytest
from numpy.testing import assert_allclose

from lvlmc.data import Grid, SampleSet
from lvlmc.errors import StageError
from lvlmc.kriging import SearchParams, kriging_operator
from lvlmc.local_model import infer_local_models
from lvlmc.simulate import (
    FLAG_OK,
    FLAG_UNESTIMATED,
    PipelineConfig,
    back_transform_nodes,
    condition,
    fit_factor_variogram,
    interpolate_correlation_field,
    run_pipeline,
    spectral_field,
    turning_bands,
)
from lvlmc.transform import back_transform, build_anamorphosis
from lvlmc.variogram import Structure, VariogramModel

EXP50 = VariogramModel.exponential(50.0)
TRANSECT = np.column_stack([np.arange(64) * 5.0, np.zeros(64), np.zeros(64)])


def _ensemble(model, points, n, n_lines=1200):
    return np.array([spectral_field(model, points, n_lines, key=(9, r)) for r in range(n)])


# ------------------------------------------------------------------ unconditional

def test_spectral_moments_on_transect():
    Y = _ensemble(EXP50, TRANSECT, 400)
    assert np.all(np.abs(Y.mean(axis=0)) < 0.3)
    v = Y.var(axis=0)
    assert np.mean((v > 0.7) & (v < 1.3)) >= 0.95


def test_spectral_variogram_reproduction():
    Y = _ensemble(EXP50, TRANSECT, 200)
    for lag in (1, 2, 4, 8, 10):  # 5 m .. 50 m
        g = 0.5 * np.mean((Y[:, lag:] - Y[:, :-lag]) ** 2)
        assert abs(g - EXP50.gamma(5.0 * lag)) < 0.05


def test_gaussian_structure_and_nugget():
    m = VariogramModel(0.3, (Structure("gaussian", 40.0, 0.7),))
    Y = _ensemble(m, TRANSECT[:20], 600)
    assert abs(Y.var() - 1.0) < 0.1
    g1 = 0.5 * np.mean((Y[:, 1:] - Y[:, :-1]) ** 2)
    assert abs(g1 - m.gamma(5.0)) < 0.05


def test_pure_nugget_is_white_and_repeatable():
    m = VariogramModel(1.0)
    P = np.random.default_rng(0).uniform(0, 100, size=(5000, 3))
    a = spectral_field(m, P, key=4)
    assert abs(a.mean()) < 0.05 and abs(a.var() - 1.0) < 0.06
    assert abs(np.corrcoef(a[:-1], a[1:])[0, 1]) < 0.05
    # value at a point does not depend on what else is evaluated
    assert_allclose(spectral_field(m, P[::7], key=4), a[::7], rtol=0, atol=0)
    assert not np.allclose(spectral_field(m, P, key=5), a)


def test_field_is_pure_function_of_position():
    P = np.random.default_rng(1).uniform(0, 300, size=(500, 3))
    a = spectral_field(EXP50, P, 300, key=(1, 2, 3))
    b = spectral_field(EXP50, P[::-1], 300, key=(1, 2, 3))[::-1]
    assert_allclose(a, b, rtol=0, atol=1e-12)
    assert not np.allclose(a, spectral_field(EXP50, P, 300, key=(1, 2, 4)))


def test_turning_bands_grid_matches_points():
    g = Grid((2.5, 2.5, 2.5), (5, 5, 5), (6, 5, 2))
    a = turning_bands(EXP50, g, 200, seed=3)
    b = spectral_field(EXP50, g.nodes(), 200, key=3, origin=g.origin)
    assert a.shape == (60,)
    assert_allclose(a, b, rtol=0, atol=0)


def test_rejects_unsupported():
    with pytest.raises(ValueError):
        spectral_field(VariogramModel(0.0, (Structure("spherical", 50.0, 1.0),)), TRANSECT)
    with pytest.raises(ValueError):
        turning_bands(EXP50, Grid((0, 0, 0), (1, 1, 1), (2, 2, 2)), n_lines=50)


# ------------------------------------------------------------------ conditioning

def test_conditioning_reproduces_data():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 200, size=(80, 3))
    T = np.vstack([X[:30], rng.uniform(0, 200, size=(50, 3))])
    op = kriging_operator(EXP50, X, T)
    u = spectral_field(EXP50, np.vstack([T, X]), 300, key=1)
    data = rng.normal(size=80)
    out = condition(u[:80], u[80:], data, op)
    assert_allclose(out[:30], data[:30], atol=1e-8)


def test_conditioning_without_data_in_reach():
    X = np.zeros((3, 3)) + [[0, 0, 0], [5, 0, 0], [0, 5, 0]]
    T = np.array([[1e4, 0.0, 0.0], [2e4, 0.0, 0.0]])
    op = kriging_operator(EXP50, X, T, SearchParams(100.0, 25))
    u = np.array([0.3, -1.2])
    assert_allclose(condition(u, [0.0, 0.0, 0.0], [5.0, 6.0, 7.0], op), u, rtol=0, atol=0)


def test_conditioning_many_realizations_at_once():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 100, size=(30, 3))
    T = rng.uniform(0, 100, size=(20, 3))
    op = kriging_operator(EXP50, X, T)
    U, D = rng.normal(size=(20, 4)), rng.normal(size=(30, 4))
    v = rng.normal(size=30)
    batch = condition(U, D, v[:, None], op)
    for s in range(4):
        assert_allclose(batch[:, s], condition(U[:, s], D[:, s], v, op), atol=1e-13)


# ------------------------------------------------------------------ correlation field

def _c(r):
    return np.array([[1.0, r], [r, 1.0]])


def test_field_sole_neighbor_is_copied():
    X = np.array([[0.0, 0.0, 0.0]])
    f = interpolate_correlation_field([_c(0.37)], X, [[10.0, 0.0, 0.0]], EXP50)
    assert_allclose(f.corr[0], _c(0.37), atol=1e-12)
    assert f.flag[0] == FLAG_OK


def test_field_constant_input():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 100, size=(40, 3))
    C = np.array([[1.0, 0.2, -0.3], [0.2, 1.0, 0.5], [-0.3, 0.5, 1.0]])
    f = interpolate_correlation_field(np.repeat(C[None], 40, axis=0), X,
                                      rng.uniform(0, 100, size=(15, 3)), EXP50)
    assert_allclose(f.corr, np.broadcast_to(C, (15, 3, 3)), atol=1e-12)


def test_field_symmetric_pair_gives_zero():
    X = np.array([[-10.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    f = interpolate_correlation_field([_c(0.5), _c(-0.5)], X, [[0.0, 0.0, 0.0]], EXP50)
    assert abs(f.corr[0, 0, 1]) < 1e-3
    assert f.residual[0] < 1e-6


def test_field_unestimated_nodes_are_flagged():
    X = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    T = np.array([[5.0, 0.0, 0.0], [900.0, 0.0, 0.0]])
    f = interpolate_correlation_field([_c(0.2), _c(0.6)], X, T, EXP50)
    assert list(f.flag) == [FLAG_OK, FLAG_UNESTIMATED]
    assert_allclose(f.corr[1], _c(0.6))
    assert np.isnan(f.residual[1])


def test_field_rows_and_threads_do_not_change_results():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 100, size=(60, 3))
    Cs = np.array([_c(r) for r in rng.uniform(-0.8, 0.8, 60)])
    T = rng.uniform(0, 100, size=(24, 3))
    a = interpolate_correlation_field(Cs, X, T, EXP50)
    rows = [list(range(i, i + 6)) for i in range(0, 24, 6)]
    b = interpolate_correlation_field(Cs, X, T, EXP50, rows=rows, threads=3)
    c = interpolate_correlation_field(Cs, X, T, EXP50, rows=rows, threads=1)
    assert_allclose(a.corr, b.corr, atol=1e-6)  # warm start moves the iterate within tol
    assert np.array_equal(b.corr, c.corr)


# ------------------------------------------------------------------ pipeline pieces

def test_factor_variogram_is_unit_sill():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 200, size=(400, 3))
    F = np.column_stack([spectral_field(EXP50, X, 600, key=(2, f)) for f in range(2)]) * 1.3
    model, evs, raw = fit_factor_variogram(X, F, 10.0, 10)
    assert model.total_sill == pytest.approx(1.0)
    assert len(evs) == 3 and evs[-1].variables == (-1, -1)
    assert 1.0 < raw < 2.5


def test_back_transform_nodes_global_and_local():
    rng = np.random.default_rng(7)
    X = rng.uniform(0, 100, size=(50, 3))
    v = rng.lognormal(size=50)
    T = rng.uniform(0, 100, size=(10, 3))
    y = rng.normal(size=(10, 3))
    glob = back_transform_nodes(v, X, T, y, k=50)
    assert_allclose(glob, back_transform(build_anamorphosis(v, seed=0), y), rtol=1e-13)
    loc = back_transform_nodes(v, X, T, y, k=12)
    for t in range(10):
        nb = np.argsort(np.linalg.norm(X - T[t], axis=1), kind="stable")[:12]
        ref = back_transform(build_anamorphosis(v[nb], seed=t), y[t])
        assert_allclose(loc[t], ref, rtol=1e-13)


# ------------------------------------------------------------------ pipeline

def _samples(n=150, seed=0, rho=0.6):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 200, size=(n, 3)) * [1, 1, 0.2]
    F = np.column_stack([spectral_field(EXP50, X, 400, key=(seed, f)) for f in range(2)])
    Y = np.column_stack([F[:, 0], rho * F[:, 0] + np.sqrt(1 - rho ** 2) * F[:, 1]])
    return SampleSet(X, np.exp(Y), ("a", "b"))


@pytest.fixture(scope="module")
def small_run():
    S = _samples()
    T = np.random.default_rng(1).uniform(0, 200, size=(40, 3)) * [1, 1, 0.2]
    cfg = PipelineConfig(samples=S, targets=T, k=60, seed=4, n_realizations=3, n_lines=200)
    return cfg, run_pipeline(cfg)


def test_pipeline_reconstruction(small_run):
    _, res = small_run
    for r in res.realizations:
        assert_allclose(r.gauss, np.einsum("tij,tj->ti", res.chol, r.factors), atol=1e-10)
        assert np.all(np.isfinite(r.values)) and np.all(r.values > 0)
    assert set(res.timings) == {"prepare", "infer", "variogram", "kriging",
                                "correlation_field", "simulate", "back_transform"}
    assert res.model.total_sill == pytest.approx(1.0)


def test_pipeline_determinism_and_threads(small_run):
    cfg, res = small_run
    from dataclasses import replace

    again = run_pipeline(cfg)
    threaded = run_pipeline(replace(cfg, threads=4))
    for other in (again, threaded):
        assert np.array_equal(other.values(), res.values())
        assert np.array_equal(other.field.corr, res.field.corr)


def test_pipeline_realizations_independent_of_count(small_run):
    cfg, res = small_run
    from dataclasses import replace

    one = run_pipeline(replace(cfg, n_realizations=1))
    assert np.array_equal(one.realizations[0].factors, res.realizations[0].factors)


def test_identity_correlation_decouples():
    S = _samples(seed=2, rho=0.0)
    T = S.locations[:10] + 1.0
    lm = infer_local_models(S, S.n, 0)
    lm.corr[:] = np.eye(2)
    lm.chol[:] = np.eye(2)
    cfg = PipelineConfig(samples=S, targets=T, seed=1, n_lines=200, variogram=EXP50)
    res = run_pipeline(cfg, local_models=lm)
    assert_allclose(res.field.corr, np.broadcast_to(np.eye(2), (10, 2, 2)), atol=1e-12)
    r = res.realizations[0]
    assert_allclose(r.gauss, r.factors, atol=1e-12)


def test_stage_error_names_stage():
    S = _samples(60)
    bad = SampleSet(S.locations, np.column_stack([S.values[:, 0], np.ones(60)]), ("a", "b"))
    with pytest.raises(StageError) as ei:
        run_pipeline(PipelineConfig(samples=bad, targets=S.locations[:3], k=20))
    assert ei.value.stage == "infer"


def test_grid_pipeline_with_active_mask():
    S = _samples(120, seed=3)
    g = Grid((10, 10, 2), (20, 20, 4), (10, 10, 2))
    active = np.zeros(g.size, dtype=bool)
    active[::3] = True
    res = run_pipeline(PipelineConfig(samples=S, grid=g, active=active, k=50, n_lines=200,
                                      variogram=EXP50))
    assert np.array_equal(res.target_ids, np.flatnonzero(active))
    assert_allclose(res.targets, g.nodes()[active])
