"""Local Gaussianization, correlation inference and decorrelation at samples.

Around every sample the ``k`` nearest records are normal-scored variable by
variable, their Pearson correlation is taken as the local step-zero
correlation ``C_a``, and the sample's own Gaussian vector is decorrelated
with the Cholesky factor of ``C_a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import SampleSet
from .errors import DegenerateVariableError, NotSPDError
from .manifold import make_corr
from .neighborhood import SpatialIndex, build_index, knn_batch
from .transform import normal_scores, rank_scores

__all__ = [
    "EIG_FLOOR",
    "LocalModel",
    "LocalModelSet",
    "cholesky",
    "decorrelate",
    "recorrelate",
    "floor_eigenvalues",
    "infer_local_correlation",
    "infer_local_models",
    "write_local_models",
    "read_local_models",
]

EIG_FLOOR = 1e-6
CHOL_SHRINK = 1e-8


def cholesky(C):
    """Lower Cholesky factor with positive diagonal.

    A matrix that fails numerically is shrunk toward the identity by
    ``1e-8`` and retried once. Stacks of matrices are factored at once.

    Raises
    ------
    NotSPDError
        If the retry fails as well.
    """
    C = np.asarray(C, dtype=float)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(C.shape[-1])
    try:
        return np.linalg.cholesky((1.0 - CHOL_SHRINK) * C + CHOL_SHRINK * eye)
    except np.linalg.LinAlgError:
        raise NotSPDError("matrix is not positive definite") from None


def decorrelate(y, L):
    """Solve ``L x = y`` by forward substitution.

    ``y`` may be a vector or a ``(p, m)`` block of column vectors.
    """
    L = np.asarray(L, dtype=float)
    if np.any(np.diag(L) == 0):
        raise ZeroDivisionError("zero pivot in triangular factor")
    return solve_triangular(L, np.asarray(y, dtype=float), lower=True)


def recorrelate(x, L):
    """Inverse of :func:`decorrelate`: ``L x``."""
    return np.asarray(L) @ np.asarray(x)


def floor_eigenvalues(C, floor=EIG_FLOOR):
    """Shrink correlation matrices toward ``I`` just enough to lift eigenvalues.

    For a matrix with smallest eigenvalue ``e < floor`` the result is
    ``(1 - s) C + s I`` with ``s = (floor - e) / (1 - e)``, the smallest
    shrinkage reaching the floor. Works on stacks.
    """
    C = np.array(C, dtype=float)
    e = np.linalg.eigvalsh(C)[..., 0]
    low = e < floor
    s = np.where(low, (floor - e) / np.where(low, 1.0 - e, 1.0), 0.0)
    eye = np.eye(C.shape[-1])
    C = (1.0 - s)[..., None, None] * C + s[..., None, None] * eye
    return C, s


@dataclass(frozen=True)
class LocalModel:
    """Local correlation model at one sample.

    Attributes
    ----------
    sample_id : int
    neighbors : ndarray of int
        The ``k`` samples the model was inferred from, nearest first.
    corr : ndarray, shape (p, p)
        ``C_a``.
    chol : ndarray, shape (p, p)
        Lower factor ``L_a`` with ``L_a L_a^T = C_a``.
    gauss : ndarray, shape (p,)
        The sample's normal scores within its neighborhood.
    factor : ndarray, shape (p,)
        ``L_a^-1 gauss``.
    factor_variance : ndarray, shape (p,)
        Variance of the decorrelated neighborhood, a fit diagnostic that is
        one for an exactly Gaussian neighborhood.
    shrinkage : float
        Identity shrinkage applied to lift the smallest eigenvalue.
    """

    sample_id: int
    neighbors: np.ndarray
    corr: np.ndarray
    chol: np.ndarray
    gauss: np.ndarray
    factor: np.ndarray
    factor_variance: np.ndarray
    shrinkage: float = 0.0


@dataclass(frozen=True)
class LocalModelSet:
    """Local models at ``m`` samples, stored as stacked arrays."""

    sample_ids: np.ndarray
    neighbors: np.ndarray
    corr: np.ndarray
    chol: np.ndarray
    gauss: np.ndarray
    factor: np.ndarray
    factor_variance: np.ndarray
    shrinkage: np.ndarray

    def __len__(self):
        return self.sample_ids.size

    def __getitem__(self, i) -> LocalModel:
        return LocalModel(int(self.sample_ids[i]), self.neighbors[i], self.corr[i],
                          self.chol[i], self.gauss[i], self.factor[i],
                          self.factor_variance[i], float(self.shrinkage[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _tie_seed(seed, sample, var):
    return int(np.random.SeedSequence([seed, sample, var]).generate_state(1)[0])


def _row_scores(V, centers, seed, names):
    """Normal scores of each row of ``V`` (m, k, p) within its row."""
    m, k, p = V.shape
    g = rank_scores(k)
    S = np.empty_like(V)
    for j in range(p):
        Vj = V[:, :, j]
        srt = np.sort(Vj, axis=1)
        flat = srt[:, 0] == srt[:, -1]
        if np.any(flat):
            r = int(np.flatnonzero(flat)[0])
            raise DegenerateVariableError(names[j], int(centers[r]))
        ranks = np.argsort(np.argsort(Vj, axis=1, kind="stable"), axis=1, kind="stable")
        S[:, :, j] = g[ranks]
        for r in np.flatnonzero(np.any(np.diff(srt, axis=1) == 0, axis=1)):
            S[r, :, j] = normal_scores(Vj[r], seed=_tie_seed(seed, int(centers[r]), j))
    return S


def _pearson(S):
    Sc = S - S.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", Sc, Sc)
    sd = np.sqrt(np.einsum("mii->mi", cov))
    return cov / (sd[:, :, None] * sd[:, None, :])


def _neighborhoods(samples, index, ids, k):
    nbr, _ = knn_batch(index, samples.locations[ids], k)
    # a sample sharing its location with lower ids might be pushed out;
    # every neighborhood must contain its own center
    missing = ~np.any(nbr == ids[:, None], axis=1)
    nbr[missing, -1] = ids[missing]
    return nbr


def infer_local_models(samples: SampleSet, k: int, seed: int = 0, ids=None,
                       index: SpatialIndex | None = None,
                       chunk: int = 512) -> LocalModelSet:
    """Infer local models at many samples.

    Parameters
    ----------
    samples : SampleSet
        ``p >= 2`` attributes.
    k : int
        Neighborhood size; ``k >= n`` gives one global neighborhood (the
        classical LMC).
    seed : int
        Tie-breaking seed.
    ids : array_like of int, optional
        Samples to model (default all).
    index : SpatialIndex, optional
        Pre-built index over ``samples.locations``.
    chunk : int
        Samples processed per vectorized block.

    Raises
    ------
    DegenerateVariableError
        A variable is constant within some neighborhood.
    """
    if samples.p < 2:
        raise ValueError("local correlation needs p >= 2 attributes")
    ids = np.arange(samples.n) if ids is None else np.asarray(ids, dtype=np.intp)
    index = build_index(samples.locations) if index is None else index
    k = min(int(k), samples.n)
    if k < 2:
        raise ValueError("neighborhoods need at least two samples")
    parts = []
    if k == samples.n:
        # global neighborhood: one model shared by every sample
        nb = np.arange(samples.n)
        S = _row_scores(samples.values[None], ids[:1], seed, samples.names)[0]
        C, s = floor_eigenvalues(_pearson(S[None]))
        C = make_corr(C)
        L = cholesky(C)
        X = decorrelate(S.T, L[0]).T
        parts.append((np.broadcast_to(nb, (ids.size, k)),
                      np.broadcast_to(C, (ids.size,) + C.shape[1:]),
                      np.broadcast_to(L, (ids.size,) + L.shape[1:]),
                      S[ids], X[ids],
                      np.broadcast_to(X.var(axis=0), (ids.size, samples.p)),
                      np.broadcast_to(s, ids.shape)))
    else:
        for start in range(0, ids.size, chunk):
            cid = ids[start:start + chunk]
            nbr = _neighborhoods(samples, index, cid, k)
            S = _row_scores(samples.values[nbr], cid, seed, samples.names)
            C, s = floor_eigenvalues(_pearson(S))
            C = make_corr(C)
            L = cholesky(C)
            X = np.einsum("mij,mkj->mki", np.linalg.inv(L), S)
            pos = np.argmax(nbr == cid[:, None], axis=1)
            rows = np.arange(cid.size)
            parts.append((nbr, C, L, S[rows, pos], X[rows, pos], X.var(axis=1), s))
    cols = [np.concatenate([np.asarray(pt[i]) for pt in parts]) for i in range(7)]
    return LocalModelSet(ids.copy(), *cols)


def infer_local_correlation(samples: SampleSet, index: SpatialIndex, alpha: int, k: int,
                            seed: int = 0) -> LocalModel:
    """Local model at the single sample ``alpha``."""
    return infer_local_models(samples, k, seed, ids=[alpha], index=index)[0]


def write_local_models(path, models: LocalModelSet) -> None:
    """Table of sample id, upper triangle of ``C_a``, factors, diagnostics."""
    p = models.corr.shape[-1]
    iu = np.triu_indices(p, 1)
    header = ["sample"]
    header += [f"rho_{i + 1}_{j + 1}" for i, j in zip(*iu)]
    header += [f"y{i + 1}" for i in range(p)]
    header += [f"f{i + 1}" for i in range(p)]
    header += [f"fvar{i + 1}" for i in range(p)]
    header += ["shrink"]
    M = np.column_stack([
        models.corr[:, iu[0], iu[1]], models.gauss, models.factor,
        models.factor_variance, models.shrinkage,
    ])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for sid, row in zip(models.sample_ids, M):
            fh.write(f"{int(sid)}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_local_models(path):
    """Read :func:`write_local_models` output.

    Returns ``(sample_ids, corr, gauss, factor)``; neighborhoods are not
    stored in the table.
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        M = np.loadtxt(fh, delimiter=",", ndmin=2)
    q = sum(h.startswith("rho_") for h in header)
    p = int(round((1 + np.sqrt(1 + 8 * q)) / 2))
    ids = M[:, 0].astype(np.intp)
    C = np.tile(np.eye(p), (len(ids), 1, 1))
    iu = np.triu_indices(p, 1)
    C[:, iu[0], iu[1]] = M[:, 1:1 + q]
    C[:, iu[1], iu[0]] = M[:, 1:1 + q]
    return ids, C, M[:, 1 + q:1 + q + p], M[:, 1 + q + p:1 + q + 2 * p]
