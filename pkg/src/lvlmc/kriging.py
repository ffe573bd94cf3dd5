"""Ordinary kriging weights in covariance form.

The system for ``k`` neighbours is::

    [ C   1 ] [ lam ]   [ c0 ]
    [ 1'  0 ] [ mu  ] = [ 1  ]

with ``C`` the neighbour covariances and ``c0`` the neighbour-to-target
covariances; the kriging variance is ``C(0) - lam' c0 - mu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import KrigingError
from .neighborhood import SpatialIndex, build_index, knn_batch
from .variogram import VariogramModel

__all__ = [
    "DUPLICATE_TOL",
    "SearchParams",
    "KrigingResult",
    "KrigingOperator",
    "ordinary_kriging_weights",
    "kriging_operator",
]

DUPLICATE_TOL = 1e-9
VARIANCE_TOL = 1e-10


@dataclass(frozen=True)
class SearchParams:
    """Moving search neighbourhood: nearest ``max_samples`` within ``radius``."""

    radius: float = 100.0
    max_samples: int = 25

    def __post_init__(self):
        if not self.radius > 0 or self.max_samples < 1:
            raise ValueError("search radius and sample cap must be positive")


@dataclass(frozen=True)
class KrigingResult:
    weights: np.ndarray
    lagrange: float
    variance: float


def _pairwise(X, Y):
    d = X[..., :, None, :] - Y[..., None, :, :]
    return np.sqrt(np.einsum("...ijk,...ijk->...ij", d, d))


def _duplicate_groups(X, tol=DUPLICATE_TOL):
    """Label points so that points within ``tol`` of each other share a label."""
    n = X.shape[0]
    labels = np.arange(n)
    if n < 2:
        return labels
    for i, j in sorted(cKDTree(X).query_pairs(tol)):
        a, b = labels[i], labels[j]
        if a != b:
            labels[labels == max(a, b)] = min(a, b)
    return np.unique(labels, return_inverse=True)[1]


def _solve_single(model, X, target):
    k = X.shape[0]
    A = np.ones((k + 1, k + 1))
    A[:k, :k] = model.covariance(_pairwise(X, X))
    A[k, k] = 0.0
    b = np.ones(k + 1)
    b[:k] = model.covariance(np.sqrt(np.sum((X - target) ** 2, axis=1)))
    sol = np.linalg.solve(A, b)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("non-finite kriging solution")
    lam, mu = sol[:k], sol[k]
    return lam, mu, model.total_sill - lam @ b[:k] - mu


def ordinary_kriging_weights(model: VariogramModel, neighbors, target) -> KrigingResult:
    """Ordinary kriging weights of ``neighbors`` for estimating at ``target``.

    Parameters
    ----------
    model : VariogramModel
    neighbors : array_like, shape (k, 3)
    target : array_like, shape (3,)

    Returns
    -------
    KrigingResult
        Weights summing to one, the Lagrange multiplier, and the kriging
        variance clamped at zero.

    Raises
    ------
    KrigingError
        The system stays singular after merging coincident neighbours.
    """
    X = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float)
    if X.shape[0] == 0:
        raise KrigingError("no neighbours")
    if model.total_sill <= 0:
        raise KrigingError("model has zero sill")
    groups = _duplicate_groups(X)
    if groups.max() + 1 == X.shape[0]:
        try:
            lam, mu, var = _solve_single(model, X, target)
            return KrigingResult(lam, float(mu), _clamp(var))
        except np.linalg.LinAlgError:
            pass
    # merge coincident neighbours, then share each merged weight equally
    ng = groups.max() + 1
    first = np.array([np.flatnonzero(groups == g)[0] for g in range(ng)])
    try:
        lam_u, mu, var = _solve_single(model, X[first], target)
    except np.linalg.LinAlgError as exc:
        raise KrigingError(f"singular kriging system: {exc}") from None
    counts = np.bincount(groups, minlength=ng)
    return KrigingResult(lam_u[groups] / counts[groups], float(mu), _clamp(var))


def _clamp(var):
    return float(max(var, 0.0)) if var >= -VARIANCE_TOL else float(var)


@dataclass(frozen=True)
class KrigingOperator:
    """Sparse linear map from data values to estimates at target points.

    Row ``t`` estimates ``sum_j weights[t, j] * data[ids[t, j]]``; padded
    slots carry weight zero. ``estimated`` is false where no datum lies
    within the search radius.
    """

    ids: np.ndarray
    weights: np.ndarray
    variance: np.ndarray
    estimated: np.ndarray
    nearest: np.ndarray

    def apply(self, values) -> np.ndarray:
        """Estimates at every target; un-estimated rows give zero.

        ``values`` has shape ``(n,)`` or ``(n, s)``.
        """
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            return np.einsum("tj,tj->t", self.weights, v[self.ids])
        return np.einsum("tj,tjs->ts", self.weights, v[self.ids])


def kriging_operator(model: VariogramModel, data_locations, targets,
                     search: SearchParams = SearchParams(),
                     index: SpatialIndex | None = None,
                     chunk: int = 2048) -> KrigingOperator:
    """Ordinary kriging weights for many targets at once.

    Neighbours are the ``search.max_samples`` nearest data within
    ``search.radius``. Coincident data (within 1e-9 m) are merged before
    solving and share their weight equally. Systems of different sizes are
    solved together by padding with decoupled zero-weight rows.
    """
    X = np.asarray(data_locations, dtype=float).reshape(-1, 3)
    T = np.asarray(targets, dtype=float).reshape(-1, 3)
    if X.shape[0] == 0:
        raise KrigingError("no data")
    if model.total_sill <= 0:
        raise KrigingError("model has zero sill")
    groups = _duplicate_groups(X)
    ng = int(groups.max()) + 1
    first = np.array([np.flatnonzero(groups == g)[0] for g in range(ng)])
    counts = np.bincount(groups, minlength=ng)
    U = X[first]
    uindex = build_index(U) if (index is None or ng != X.shape[0]) else index
    k = min(search.max_samples, ng)
    nt = T.shape[0]
    ids = np.zeros((nt, k), dtype=np.intp)
    wts = np.zeros((nt, k))
    var = np.full(nt, model.total_sill)
    near = np.zeros(nt, dtype=np.intp)
    est = np.zeros(nt, dtype=bool)
    for s in range(0, nt, chunk):
        Tc = T[s:s + chunk]
        nb, dist = knn_batch(uindex, Tc, k)
        ok = dist <= search.radius
        m = Tc.shape[0]
        A = np.zeros((m, k + 1, k + 1))
        A[:, :k, :k] = model.covariance(_pairwise(U[nb], U[nb]))
        A[:, :k, k] = ok
        A[:, k, :k] = ok
        pad = ~ok
        A[:, :k, :k] *= ok[:, :, None] & ok[:, None, :]
        r, c = np.nonzero(pad)
        A[r, c, c] = 1.0
        b = np.zeros((m, k + 1))
        b[:, :k] = np.where(ok, model.covariance(dist), 0.0)
        b[:, k] = 1.0
        has = ok[:, 0]
        A[~has, k, k] = 1.0  # keeps rows without neighbours solvable
        try:
            sol = np.linalg.solve(A, b[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise KrigingError(f"singular kriging system: {exc}") from None
        lam = np.where(ok, sol[:, :k], 0.0)
        mu = sol[:, k]
        v = model.total_sill - np.einsum("tj,tj->t", lam, b[:, :k]) - mu
        v = np.where(v >= -VARIANCE_TOL, np.maximum(v, 0.0), v)
        lam[~has] = 0.0
        v[~has] = model.total_sill
        ids[s:s + m] = nb
        wts[s:s + m] = lam
        var[s:s + m] = v
        est[s:s + m] = has
        near[s:s + m] = nb[:, 0]
    # expand merged groups back to original data ids
    if ng != X.shape[0]:
        members = [np.flatnonzero(groups == g) for g in range(ng)]
        width = k * int(counts.max())
        eids = np.zeros((nt, width), dtype=np.intp)
        ew = np.zeros((nt, width))
        for t in range(nt):
            col = 0
            for g, w in zip(ids[t], wts[t]):
                mem = members[g]
                eids[t, col:col + mem.size] = mem
                ew[t, col:col + mem.size] = w / mem.size
                col += mem.size
        ids, wts = eids, ew
        near = first[near]
    return KrigingOperator(ids, wts, var, est, near)
