"""Riemannian geometry of SPD and correlation matrices.

The SPD cone carries the affine-invariant metric
``<X1, X2>_P = tr(X1 P^-1 X2 P^-1)``. Correlation matrices are treated as
the quotient of the cone by the congruence action ``D . S = D S D`` of
positive diagonal matrices, with distances obtained by optimizing over the
fiber of one argument.

All array functions accept stacks of matrices with shape ``(..., p, p)``
unless stated otherwise. Matrix exponentials and logarithms go through the
symmetric eigendecomposition, so only real symmetric input is supported.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConvergenceError,
    DimensionError,
    InvariantError,
    NotSPDError,
    OptimizationError,
)

SYM_RTOL = 1e-12
BOUNDARY_EPS = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and caps shared by the Frechet-mean solvers.

    Parameters
    ----------
    tol : float
        Convergence threshold on the Frobenius norm of the tangent-space
        mean (outer loop) and of the fiber gradient (inner loop).
    step : float
        Initial step size of the fiber descent.
    max_iter : int
        Cap on outer fixed-point iterations.
    max_fiber_iter : int
        Cap on fiber descent iterations per call.
    max_halvings : int
        Consecutive step halvings tolerated before the fiber descent is
        declared divergent.
    """

    tol: float = 1e-8
    step: float = 0.1
    max_iter: int = 200
    max_fiber_iter: int = 500
    max_halvings: int = 30

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.max_iter < 1 or self.max_fiber_iter < 1 or self.max_halvings < 1:
            raise ValueError("iteration caps must be >= 1")


DEFAULT_SOLVER = SolverConfig()


# --------------------------------------------------------------------------
# validation

def _square(A):
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"expected square matrices, got shape {A.shape}")
    return A


def check_sym(X):
    """Return ``X`` as a float array after checking symmetry."""
    X = _square(X)
    scale = np.max(np.abs(X), axis=(-2, -1), keepdims=True)
    asym = np.max(np.abs(X - np.swapaxes(X, -1, -2)), axis=(-2, -1), keepdims=True)
    if np.any(asym > SYM_RTOL * np.maximum(scale, 1.0)):
        raise InvariantError("matrix is not symmetric")
    return X


def check_spd(P):
    """Return ``P`` as a float array after checking it is SPD.

    Symmetry is checked to ``1e-12`` relative and the spectrum must satisfy
    ``min eig > p * 1e-14 * max eig``.
    """
    try:
        P = check_sym(P)
    except InvariantError as exc:
        raise NotSPDError(str(exc)) from None
    if not np.all(np.isfinite(P)):
        raise NotSPDError("matrix has non-finite entries")
    w = np.linalg.eigvalsh(_symmetrize(P))
    p = P.shape[-1]
    if np.any(w[..., 0] <= p * 1e-14 * np.abs(w[..., -1])) or np.any(w[..., -1] <= 0):
        raise NotSPDError("matrix is not positive definite")
    return P


def make_corr(C, eps=BOUNDARY_EPS):
    """Validate a correlation matrix and normalize it.

    The diagonal is set to exactly one. Off-diagonal entries with
    ``|rho| >= 1 - eps`` shrink the whole matrix toward the identity by
    the factor ``1 - eps`` so the result stays strictly inside the
    elliptope.

    Raises
    ------
    InvariantError
        If the input is not symmetric, has ``p < 2``, an off-diagonal
        entry of magnitude greater than one, or is not positive definite
        after shrinkage.
    """
    C = check_sym(C).copy()
    p = C.shape[-1]
    if p < 2:
        raise InvariantError("correlation matrices need p >= 2")
    off = ~np.eye(p, dtype=bool)
    if np.any(np.abs(C[..., off]) > 1.0):
        raise InvariantError("correlation entry outside [-1, 1]")
    idx = np.arange(p)
    C[..., idx, idx] = 1.0
    C = _symmetrize(C)
    near = np.max(np.abs(C[..., off]), axis=-1) >= 1.0 - eps
    if np.any(near):
        C[near] = (1.0 - eps) * C[near] + eps * np.eye(p)
        C[..., idx, idx] = 1.0
    check_spd(C)
    return C


def _symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


# --------------------------------------------------------------------------
# spectral matrix functions

def _eig_apply(A, func):
    w, V = np.linalg.eigh(A)
    return (V * func(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def _spd_eigh(P):
    w, V = np.linalg.eigh(_symmetrize(P))
    if np.any(w <= 0):
        raise NotSPDError("matrix is not positive definite")
    return w, V


def _spd_apply(P, func):
    w, V = _spd_eigh(P)
    return (V * func(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def sym_exp(X):
    """Matrix exponential of a symmetric matrix, via its spectrum."""
    return _eig_apply(_symmetrize(check_sym(X)), np.exp)


def sym_log(V):
    """Principal matrix logarithm of an SPD matrix."""
    return _spd_apply(_square(V), np.log)


def spd_sqrt(P):
    return _spd_apply(_square(P), np.sqrt)


def spd_invsqrt(P):
    return _spd_apply(_square(P), lambda w: 1.0 / np.sqrt(w))


def _sqrt_pair(P):
    w, V = _spd_eigh(P)
    Vt = np.swapaxes(V, -1, -2)
    s = np.sqrt(w)
    return (V * s[..., None, :]) @ Vt, (V * (1.0 / s)[..., None, :]) @ Vt


def _check_same_dim(*mats):
    dims = {m.shape[-1] for m in mats}
    if len(dims) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(dims)}")


# --------------------------------------------------------------------------
# SPD manifold

def spd_exp_map(P, X):
    """Riemannian exponential at ``P``: ``P^1/2 Exp(P^-1/2 X P^-1/2) P^1/2``."""
    P, X = _square(P), check_sym(X)
    _check_same_dim(P, X)
    Ph, Pih = _sqrt_pair(P)
    return _symmetrize(Ph @ _eig_apply(_symmetrize(Pih @ X @ Pih), np.exp) @ Ph)


def spd_log_map(P, V):
    """Riemannian logarithm at ``P`` of ``V``."""
    P, V = _square(P), _square(V)
    _check_same_dim(P, V)
    Ph, Pih = _sqrt_pair(P)
    return _symmetrize(Ph @ _spd_apply(Pih @ V @ Pih, np.log) @ Ph)


def spd_distance(V, W):
    """Affine-invariant distance ``||Log(V^-1/2 W V^-1/2)||_F``."""
    V, W = _square(V), _square(W)
    _check_same_dim(V, W)
    Vih = spd_invsqrt(V)
    w, _ = _spd_eigh(Vih @ W @ Vih)
    return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))


def spd_geodesic(V, X, t):
    """Point at time ``t`` on the geodesic leaving ``V`` with velocity ``X``."""
    return spd_exp_map(V, t * check_sym(X))


def spd_norm(P, X):
    """Length of the tangent vector ``X`` at ``P`` under the metric."""
    Pih = spd_invsqrt(P)
    return np.linalg.norm(Pih @ X @ Pih, axis=(-2, -1))


def _check_weights(weights, n):
    lam = np.asarray(weights, dtype=float).ravel()
    if lam.size != n:
        raise DimensionError(f"{n} matrices but {lam.size} weights")
    if abs(lam.sum() - 1.0) > 1e-10:
        raise ValueError(f"weights must sum to 1 (got {lam.sum():.17g})")
    return lam


def spd_frechet_mean(matrices, weights=None, cfg=DEFAULT_SOLVER, init=None):
    """Weighted Frechet mean of SPD matrices by fixed-point iteration.

    Each step maps the data to the tangent space at the current iterate,
    takes the weighted average there and maps it back with the exponential.
    Iteration stops when the Frobenius norm of the tangent average drops
    below ``cfg.tol``.

    Parameters
    ----------
    matrices : array_like, shape (n, p, p)
    weights : array_like, shape (n,), optional
        Must sum to one. Defaults to uniform weights.
    cfg : SolverConfig
    init : array_like, shape (p, p), optional
        Starting iterate; the identity by default.

    Returns
    -------
    ndarray, shape (p, p)

    Raises
    ------
    ConvergenceError
        After ``cfg.max_iter`` iterations, carrying the last iterate.
    """
    P = _square(matrices)
    if P.ndim != 3 or P.shape[0] == 0:
        raise ValueError("need a non-empty stack of matrices")
    n, p = P.shape[0], P.shape[-1]
    lam = np.full(n, 1.0 / n) if weights is None else _check_weights(weights, n)
    S = np.eye(p) if init is None else check_spd(init)
    residual = np.inf
    for _ in range(cfg.max_iter):
        Sh, Sih = _sqrt_pair(S)
        # tangent mean expressed in whitened coordinates at S
        T = np.einsum("i,ijk->jk", lam, _spd_apply(Sih @ P @ Sih, np.log))
        T = _symmetrize(T)
        Pbar = Sh @ T @ Sh
        residual = np.linalg.norm(Pbar)
        S = _symmetrize(Sh @ _eig_apply(T, np.exp) @ Sh)
        if residual < cfg.tol:
            return S
    raise ConvergenceError(
        f"SPD Frechet mean did not converge in {cfg.max_iter} iterations "
        f"(residual {residual:.3e})", iterate=S, residual=residual)


# --------------------------------------------------------------------------
# correlation quotient

def corr_project(S):
    """Project SPD matrices onto the correlation matrices.

    Returns ``D S D`` with ``D = diag(S)^-1/2``; the diagonal of the result
    is set to exactly one.
    """
    S = _square(S)
    d = np.diagonal(S, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise NotSPDError("non-positive diagonal entry")
    s = 1.0 / np.sqrt(d)
    C = _symmetrize(s[..., :, None] * S * s[..., None, :])
    idx = np.arange(S.shape[-1])
    C[..., idx, idx] = 1.0
    return C


def _fiber_eval(ref_h, ref_ih, Cs, logd, strict=True):
    """Objective and log-coordinate gradient of ``d^2(ref, D C D)``.

    The gradient is ``D^-1 Delta`` with
    ``Delta = I o 2 Sym[D Log(C D ref^-1 D)]``, which reduces to twice the
    diagonal of ``Log(W ref^-1)`` for ``W = D C D``. With ``strict`` false,
    points that are not numerically SPD get an infinite objective.
    """
    d = np.exp(logd)
    W = d[..., :, None] * Cs * d[..., None, :]
    W = np.where(np.isfinite(W), W, 0.0)
    w, V = np.linalg.eigh(_symmetrize(ref_ih @ W @ ref_ih))
    bad = np.any(w <= 0, axis=-1)
    if np.any(bad):
        if strict:
            raise NotSPDError("fiber point left the SPD cone")
        w = np.where(bad[..., None], 1.0, w)
    lw = np.log(w)
    obj = np.where(bad, np.inf, np.sum(lw * lw, axis=-1))
    L = (V * lw[..., None, :]) @ np.swapaxes(V, -1, -2)
    grad = 2.0 * np.diagonal(ref_h @ L @ ref_ih, axis1=-2, axis2=-1)
    return obj, grad


def _fiber_descent(ref, Cs, cfg, d0=None):
    """Batched fiber descent of each ``Cs[i]`` toward ``ref``.

    Returns the optimal diagonals (n, p) and the number of iterations used.
    The step size of an observation is halved whenever a trial step would
    increase its objective; ``cfg.max_halvings`` consecutive halvings raise
    :class:`OptimizationError`.
    """
    n, p = Cs.shape[0], Cs.shape[-1]
    ref_h, ref_ih = _sqrt_pair(ref)
    logd = np.zeros((n, p)) if d0 is None else np.log(np.asarray(d0, dtype=float))
    step = np.full(n, cfg.step)
    halvings = np.zeros(n, dtype=int)
    obj, grad = _fiber_eval(ref_h, ref_ih, Cs, logd)
    active = np.linalg.norm(grad, axis=-1) >= cfg.tol
    it = 0
    while np.any(active):
        if it >= cfg.max_fiber_iter:
            break
        it += 1
        a = np.flatnonzero(active)
        trial = logd[a] - step[a, None] * grad[a]
        t_obj, t_grad = _fiber_eval(ref_h, ref_ih, Cs[a], trial, strict=False)
        ok = t_obj <= obj[a] * (1.0 + 1e-12) + 1e-300
        acc, rej = a[ok], a[~ok]
        logd[acc], obj[acc], grad[acc] = trial[ok], t_obj[ok], t_grad[ok]
        halvings[acc] = 0
        step[rej] *= 0.5
        halvings[rej] += 1
        if np.any(halvings >= cfg.max_halvings):
            bad = int(np.flatnonzero(halvings >= cfg.max_halvings)[0])
            raise OptimizationError(
                f"fiber descent stalled after {cfg.max_halvings} step halvings "
                f"(observation {bad}, gradient {np.linalg.norm(grad[bad]):.3e})")
        active[acc] = np.linalg.norm(t_grad[ok], axis=-1) >= cfg.tol
    return np.exp(logd), it, np.linalg.norm(grad, axis=-1)


def fiber_optimize(C_ref, C_i, cfg=DEFAULT_SOLVER, d0=None):
    """Optimal positive diagonal ``D`` minimizing ``d^2(C_ref, D C_i D)``.

    Gradient descent on the group of positive diagonal matrices, started at
    the identity (or ``d0``), stopping when the gradient norm drops below
    ``cfg.tol``.

    Returns
    -------
    ndarray, shape (p,)
        Diagonal entries of the optimal ``D``.
    """
    C_ref, C_i = make_corr(C_ref), make_corr(C_i)
    _check_same_dim(C_ref, C_i)
    d, _, gnorm = _fiber_descent(C_ref, C_i[None], cfg, None if d0 is None else [d0])
    if gnorm[0] >= cfg.tol:
        raise ConvergenceError(
            f"fiber descent did not converge in {cfg.max_fiber_iter} iterations",
            iterate=d[0], residual=float(gnorm[0]))
    return d[0]


def fiber_objective(C_ref, C_i, d):
    """``d^2(C_ref, D C_i D)`` for the diagonal entries ``d``."""
    d = np.asarray(d, dtype=float)
    W = d[:, None] * np.asarray(C_i, dtype=float) * d[None, :]
    return spd_distance(C_ref, W) ** 2


def corr_distance(C1, C2, cfg=DEFAULT_SOLVER):
    """Quotient distance between two correlation matrices.

    The SPD distance from ``C1`` to the optimal representative
    ``D* C2 D*`` of the fiber over ``C2``.
    """
    C1, C2 = make_corr(C1), make_corr(C2)
    d = fiber_optimize(C1, C2, cfg)
    return float(spd_distance(C1, d[:, None] * C2 * d[None, :]))


@dataclass
class FrechetInfo:
    """Diagnostics returned alongside a correlation Frechet mean."""

    residual: float
    n_iter: int
    fiber_iters: int


def corr_frechet_mean(matrices, weights=None, cfg=DEFAULT_SOLVER, init=None,
                      full_output=False):
    """Weighted Frechet mean of correlation matrices.

    Each outer iteration

    1. moves every observation along its fiber to the representative
       closest to the current iterate,
    2. takes one weighted tangent-space averaging step in the SPD cone at
       the iterate, and
    3. projects the result back onto the correlation matrices.

    Weights must sum to one but may be negative (kriging weights); the
    result is a correlation matrix regardless, since it is produced by the
    exponential map followed by projection.

    Parameters
    ----------
    matrices : array_like, shape (n, p, p)
    weights : array_like, shape (n,), optional
    cfg : SolverConfig
    init : array_like, shape (p, p), optional
        Warm start; the identity by default.
    full_output : bool
        If true, also return a :class:`FrechetInfo`.

    Raises
    ------
    ConvergenceError
        After ``cfg.max_iter`` outer iterations; ``iterate`` holds the last
        correlation-matrix iterate.
    """
    Cs = make_corr(matrices)
    if Cs.ndim != 3 or Cs.shape[0] == 0:
        raise ValueError("need a non-empty stack of correlation matrices")
    n, p = Cs.shape[0], Cs.shape[-1]
    lam = np.full(n, 1.0 / n) if weights is None else _check_weights(weights, n)
    C = np.eye(p) if init is None else make_corr(init)
    # tighter inner tolerance keeps fiber error below the outer threshold
    inner = SolverConfig(tol=0.1 * cfg.tol, step=cfg.step, max_iter=cfg.max_iter,
                         max_fiber_iter=cfg.max_fiber_iter,
                         max_halvings=cfg.max_halvings)
    d = np.ones((n, p))
    residual = np.inf
    fiber_iters = 0
    for t in range(1, cfg.max_iter + 1):
        d, k, _ = _fiber_descent(C, Cs, inner, d0=d)
        fiber_iters += k
        Ct = d[:, :, None] * Cs * d[:, None, :]
        Ch, Cih = _sqrt_pair(C)
        T = _symmetrize(np.einsum("i,ijk->jk", lam, _spd_apply(Cih @ Ct @ Cih, np.log)))
        residual = float(np.linalg.norm(Ch @ T @ Ch))
        C = corr_project(Ch @ _eig_apply(T, np.exp) @ Ch)
        if residual < cfg.tol:
            if full_output:
                return C, FrechetInfo(residual, t, fiber_iters)
            return C
    raise ConvergenceError(
        f"correlation Frechet mean did not converge in {cfg.max_iter} iterations "
        f"(residual {residual:.3e})", iterate=C, residual=residual)


# --------------------------------------------------------------------------
# text serialization

def format_matrix(A):
    """Plain-text form: ``p`` on the first line, then ``p`` rows."""
    A = _square(A)
    lines = [str(A.shape[0])]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in A]
    return "\n".join(lines) + "\n"


def parse_matrix(text):
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    p = int(rows[0][0])
    A = np.array([[float(v) for v in r] for r in rows[1:]])
    if A.shape != (p, p):
        raise DimensionError(f"header says p={p} but body has shape {A.shape}")
    return A


def write_matrix(path, A):
    with open(path, "w") as fh:
        fh.write(format_matrix(A))


def read_matrix(path):
    with open(path) as fh:
        return parse_matrix(fh.read())
