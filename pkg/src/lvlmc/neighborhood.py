"""Exact nearest-neighbour queries over 3D sample locations.

A k-d tree proposes candidates; distances are then recomputed with one
fixed formula and sorted by ``(distance, id)`` so results match a
brute-force scan bit for bit, including the order of tied points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import CappedQueryWarning, DimensionError

__all__ = [
    "SpatialIndex",
    "build_index",
    "knn",
    "knn_batch",
    "radius_neighbors",
    "point_distances",
]

# extra candidates fetched from the tree so that ties at the k-th distance
# are usually resolved without a second query
_PAD = 8


def point_distances(locations: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``u`` to every row of ``locations``.

    Every query in this module uses this formula, so a brute-force scan
    written with it reproduces results exactly.
    """
    d = locations - u
    return np.sqrt(np.einsum("...j,...j->...", d, d))


@dataclass(frozen=True)
class SpatialIndex:
    """Immutable k-d tree over ``n`` locations in metres."""

    locations: np.ndarray
    tree: cKDTree = field(repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.locations.shape[0]


def build_index(locations) -> SpatialIndex:
    """Build an exact k-NN index.

    Parameters
    ----------
    locations : array_like, shape (n, 3)

    Raises
    ------
    ValueError
        Empty input or non-finite coordinates.
    """
    X = np.array(locations, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3:
        raise DimensionError(f"locations must be n x 3, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("cannot index an empty location set")
    if not np.all(np.isfinite(X)):
        raise ValueError("locations contain non-finite coordinates")
    X.setflags(write=False)
    return SpatialIndex(X, cKDTree(X))


def _cap(index: SpatialIndex, k: int) -> int:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > index.n:
        warnings.warn(
            f"requested k={k} exceeds {index.n} samples; returning all",
            CappedQueryWarning,
            stacklevel=3,
        )
        return index.n
    return k


def _order(ids: np.ndarray, dist: np.ndarray, k: int):
    o = np.lexsort((ids, dist))[:k]
    return ids[o], dist[o]


def _exact_row(index: SpatialIndex, u: np.ndarray, k: int, cand: np.ndarray):
    """Resolve one query from a candidate set, widening on boundary ties."""
    ids = cand[cand < index.n]
    dist = point_distances(index.locations[ids], u)
    ids, dist = _order(ids, dist, ids.size)
    if ids.size < index.n and dist[k - 1] >= dist[-1]:
        # the k-th distance reaches the edge of the candidate set, so points
        # outside it may tie; re-query everything inside that radius
        r = dist[k - 1] * (1.0 + 1e-12) + 1e-300
        ids = np.asarray(index.tree.query_ball_point(u, r), dtype=np.intp)
        dist = point_distances(index.locations[ids], u)
        ids, dist = _order(ids, dist, ids.size)
    return ids[:k], dist[:k]


def knn(index: SpatialIndex, u, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` nearest samples to ``u``.

    Returns
    -------
    ids, distances : ndarray
        Ascending by distance, ties broken by lowest id. When ``k`` exceeds
        the sample count a :class:`CappedQueryWarning` is issued and all
        samples are returned.
    """
    u = np.asarray(u, dtype=float)
    k = _cap(index, k)
    m = min(index.n, k + _PAD)
    _, cand = index.tree.query(u, m)
    return _exact_row(index, u, k, np.atleast_1d(cand))


def knn_batch(index: SpatialIndex, points, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`knn` over an ``(m, 3)`` array of query points.

    Returns ``(ids, distances)`` of shape ``(m, k)``.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    k = _cap(index, k)
    m = min(index.n, k + _PAD)
    out_i = np.empty((P.shape[0], k), dtype=np.intp)
    out_d = np.empty((P.shape[0], k))
    if P.shape[0] == 0:
        return out_i, out_d
    _, cand = index.tree.query(P, m)
    cand = cand.reshape(P.shape[0], m)
    dist = point_distances(index.locations[cand], P[:, None, :])
    # row-wise lexsort on (distance, id)
    o = np.lexsort((cand, dist), axis=-1)
    cand = np.take_along_axis(cand, o, axis=-1)
    dist = np.take_along_axis(dist, o, axis=-1)
    out_i[:] = cand[:, :k]
    out_d[:] = dist[:, :k]
    if m < index.n:
        for r in np.flatnonzero(dist[:, k - 1] >= dist[:, -1]):
            out_i[r], out_d[r] = _exact_row(index, P[r], k, cand[r])
    return out_i, out_d


def radius_neighbors(index: SpatialIndex, u, radius: float, max_count: int | None = None):
    """Samples within ``radius`` of ``u``, nearest first, at most ``max_count``.

    Same ordering contract as :func:`knn`.
    """
    u = np.asarray(u, dtype=float)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    ids = np.asarray(index.tree.query_ball_point(u, radius * (1.0 + 1e-12)), dtype=np.intp)
    dist = point_distances(index.locations[ids], u)
    keep = dist <= radius
    ids, dist = _order(ids[keep], dist[keep], int(keep.sum()))
    if max_count is not None:
        ids, dist = ids[:max_count], dist[:max_count]
    return ids, dist
