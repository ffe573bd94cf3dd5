"""Brute-force reference computations, independent of the package code.

Everything here works on 2x2 matrices with closed-form generalized
eigenvalues and dense grids, so no eigendecomposition or descent routine
from ``lvlmc`` is involved.
"""

import numpy as np


def corr2(rho):
    return np.array([[1.0, rho], [rho, 1.0]])


def gen_eigs_2x2(a, w11, w12, w22):
    """Eigenvalues of ``C(a)^-1 W`` for ``C(a) = [[1, a], [a, 1]]``.

    Roots of ``(1 - a^2) l^2 - (w11 + w22 - 2 a w12) l + det W = 0``.
    All arguments broadcast.
    """
    A = 1.0 - a * a
    B = w11 + w22 - 2.0 * a * w12
    det = w11 * w22 - w12 * w12
    disc = np.sqrt(np.maximum(B * B - 4.0 * A * det, 0.0))
    return (B + disc) / (2.0 * A), (B - disc) / (2.0 * A)


def spd_dist2_2x2(a, w11, w12, w22):
    l1, l2 = gen_eigs_2x2(a, w11, w12, w22)
    return np.log(l1) ** 2 + np.log(l2) ** 2


def fiber_grid_2d(rho_ref, rho_i, lo=0.5, hi=2.0, step=1e-3):
    """Minimize ``d^2(C(rho_ref), D C(rho_i) D)`` over a dense (d1, d2) grid.

    Returns ``(d1, d2, min objective)``. Raises if the minimum sits on the
    grid boundary, which would mean the box is too small.
    """
    g = np.arange(lo, hi + 0.5 * step, step)
    best = (np.inf, None, None)
    for chunk in np.array_split(np.arange(g.size), 8):
        d1 = g[chunk][:, None]
        d2 = g[None, :]
        f = spd_dist2_2x2(rho_ref, d1 * d1, d1 * d2 * rho_i, d2 * d2)
        k = np.unravel_index(np.argmin(f), f.shape)
        if f[k] < best[0]:
            best = (f[k], chunk[k[0]], k[1])
    fmin, i, j = best
    if i in (0, g.size - 1) or j in (0, g.size - 1):
        raise RuntimeError("fiber grid minimum on the boundary")
    return g[i], g[j], fmin


def corr_dist2_1d(rho_ref, rho_i, log_r):
    """Fiber minimum with the overall scale of ``D`` eliminated in closed form.

    With ``D = s diag(sqrt r, 1/sqrt r)`` the generalized eigenvalues scale
    by ``s^2``; the best ``s`` centres their logs, leaving
    ``(log l1 - log l2)^2 / 2``. What remains is a dense grid over
    ``log r``. ``rho_ref`` and ``rho_i`` broadcast against each other; the
    grid runs along a new trailing axis.
    """
    rho_ref = np.asarray(rho_ref, dtype=float)[..., None]
    rho_i = np.asarray(rho_i, dtype=float)[..., None]
    r = np.exp(log_r)
    l1, l2 = gen_eigs_2x2(rho_ref, r, rho_i, 1.0 / r)
    f = 0.5 * (np.log(l1) - np.log(l2)) ** 2
    return f.min(axis=-1)


def corr_mean_grid(rhos, weights, step=1e-3, log_r_step=1e-3, log_r_max=2.5):
    """Weighted Frechet mean over Corr(2) by dense search on ``rho``.

    Minimizes ``sum_i w_i d^2_Corr(C(rho_i), C(rho))`` over
    ``rho in (-1, 1)`` with grid spacing ``step``; each distance is itself a
    grid minimum over the fiber.
    """
    grid = np.arange(-1.0 + step, 1.0 - 0.5 * step, step)
    log_r = np.arange(-log_r_max, log_r_max + 0.5 * log_r_step, log_r_step)
    total = np.zeros(grid.size)
    for rho_i, w in zip(rhos, weights):
        for chunk in np.array_split(np.arange(grid.size), 16):
            total[chunk] += w * corr_dist2_1d(grid[chunk], rho_i, log_r)
    k = int(np.argmin(total))
    return grid[k], total[k]
