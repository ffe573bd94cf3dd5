import numpy as np
import pytest
from numpy.testing import assert_allclose

from lvlmc.errors import KrigingError
from lvlmc.kriging import SearchParams, kriging_operator, ordinary_kriging_weights
from lvlmc.manifold import corr_frechet_mean
from lvlmc.neighborhood import build_index, knn
from lvlmc.variogram import VariogramModel

MODEL = VariogramModel.exponential(50.0, sill=0.8, nugget=0.2)


def dense_oracle(model, X, t):
    """Build the full system entry by entry and invert it densely."""
    k = len(X)
    A = np.zeros((k + 1, k + 1))
    for i in range(k):
        for j in range(k):
            h = np.linalg.norm(X[i] - X[j])
            A[i, j] = model.total_sill if h == 0 else model.structures[0].sill * np.exp(-3 * h / 50.0)
        A[i, k] = A[k, i] = 1.0
    b = np.ones(k + 1)
    for i in range(k):
        h = np.linalg.norm(X[i] - t)
        b[i] = model.total_sill if h == 0 else model.structures[0].sill * np.exp(-3 * h / 50.0)
    sol = np.linalg.inv(A) @ b
    return sol[:k], sol[k]


def test_single_neighbor():
    r = ordinary_kriging_weights(MODEL, [[1.0, 2.0, 3.0]], [10.0, 0.0, 0.0])
    assert_allclose(r.weights, [1.0])


def test_symmetric_pair():
    r = ordinary_kriging_weights(MODEL, [[-5.0, 0, 0], [5.0, 0, 0]], [0.0, 0.0, 0.0])
    assert_allclose(r.weights, [0.5, 0.5], atol=1e-14)


def test_exact_interpolation():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 40, size=(6, 3))
    r = ordinary_kriging_weights(MODEL, X, X[2])
    assert_allclose(r.weights, np.eye(6)[2], atol=1e-12)
    assert r.variance == pytest.approx(0.0, abs=1e-12)


def test_matches_dense_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        X = rng.uniform(0, 60, size=(8, 3))
        t = rng.uniform(0, 60, size=3)
        r = ordinary_kriging_weights(MODEL, X, t)
        lam, mu = dense_oracle(MODEL, X, t)
        assert_allclose(r.weights, lam, atol=1e-10)
        assert r.lagrange == pytest.approx(mu, abs=1e-10)
        assert r.weights.sum() == pytest.approx(1.0, abs=1e-10)
        assert r.variance >= 0


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    X = rng.uniform(0, 60, size=(10, 3))
    t = rng.uniform(0, 60, size=3)
    perm = rng.permutation(10)
    a = ordinary_kriging_weights(MODEL, X, t).weights
    b = ordinary_kriging_weights(MODEL, X[perm], t).weights
    assert_allclose(b, a[perm], atol=1e-12)


def test_duplicates_are_merged():
    X = np.array([[0.0, 0, 0], [0.0, 0, 0], [10.0, 0, 0]])
    r = ordinary_kriging_weights(VariogramModel.exponential(50.0), X, [3.0, 0, 0])
    ref = ordinary_kriging_weights(VariogramModel.exponential(50.0), X[1:], [3.0, 0, 0])
    assert_allclose(r.weights[:2], [ref.weights[0] / 2] * 2)
    assert r.weights.sum() == pytest.approx(1.0)


def test_zero_sill_rejected():
    with pytest.raises(KrigingError):
        ordinary_kriging_weights(VariogramModel(), [[0, 0, 0]], [1, 0, 0])


def test_operator_matches_single_solves():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 200, size=(300, 3))
    T = rng.uniform(0, 200, size=(60, 3))
    T[0] = X[5]
    T[1] = [1e4, 1e4, 1e4]
    search = SearchParams(radius=60.0, max_samples=20)
    op = kriging_operator(MODEL, X, T, search)
    idx = build_index(X)
    assert not op.estimated[1] and np.all(op.weights[1] == 0)
    assert_allclose(op.weights[0][op.ids[0] == 5], [1.0], atol=1e-12)
    for t in range(60):
        if not op.estimated[t]:
            continue
        ids, d = knn(idx, T[t], 20)
        ids = ids[d <= 60.0]
        r = ordinary_kriging_weights(MODEL, X[ids], T[t])
        dense = np.zeros(300)
        dense[ids] = r.weights
        got = np.zeros(300)
        np.add.at(got, op.ids[t], op.weights[t])
        assert_allclose(got, dense, atol=1e-10)
        assert op.variance[t] == pytest.approx(r.variance, abs=1e-10)


def test_operator_with_duplicate_data():
    X = np.array([[0.0, 0, 0], [5.0, 0, 0], [5.0, 0, 0], [20.0, 0, 0]])
    T = np.array([[5.0, 0, 0], [12.0, 0, 0]])
    op = kriging_operator(VariogramModel.exponential(50.0), X, T)
    v = np.array([1.0, 2.0, 4.0, 0.0])
    est = op.apply(v)
    assert est[0] == pytest.approx(3.0)  # mean of the coincident pair
    assert_allclose(op.weights.sum(axis=1), 1.0)


def test_negative_weights_feed_frechet_mean():
    # a screened configuration produces negative weights
    X = np.array([[0.0, 0, 0], [2.0, 0, 0], [4.0, 0, 0], [30.0, 0, 0], [2.0, 3.0, 0]])
    r = ordinary_kriging_weights(VariogramModel.exponential(100.0), X, [1.0, 0.5, 0.0])
    assert np.any(r.weights < 0)
    rng = np.random.default_rng(4)
    Cs = []
    for _ in range(5):
        a = rng.uniform(-0.8, 0.8)
        Cs.append([[1, a], [a, 1]])
    C = corr_frechet_mean(Cs, r.weights)
    assert np.all(np.diag(C) == 1.0) and np.all(np.linalg.eigvalsh(C) > 0)
