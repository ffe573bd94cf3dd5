"""Normal-score anamorphosis, the Nataf joint CDF and additive log-ratios.

An :class:`AnamorphosisTable` pairs sorted raw values with the standard
normal quantiles ``G^-1((rank - 0.5) / n)``. Forward transforms interpolate
the table and clamp outside it; the back transform adds GSLIB-style tails:
linear in probability down to a lower bound, and hyperbolic above the
largest raw value (linear up to the upper bound when that value is not
positive).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, stats
from scipy.stats import qmc

from .errors import DegenerateError, DimensionError, InvariantError

DESPIKE_SCALE = 1e-9
DEFAULT_TAIL_POWER = 1.5
TAIL_PAD = 0.05


@dataclass(frozen=True)
class AnamorphosisTable:
    """Paired quantiles realizing a variable's normal-score transform.

    Attributes
    ----------
    raw : ndarray
        Strictly increasing raw values.
    gauss : ndarray
        Strictly increasing normal scores, one per raw value.
    lower, upper : float
        Bounds of the back-transformed values in the tails.
    power : float
        Exponent of the hyperbolic upper tail.
    seed : int
        Seed used to break ties.
    """

    raw: np.ndarray
    gauss: np.ndarray
    lower: float
    upper: float
    power: float = DEFAULT_TAIL_POWER
    seed: int = 0

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        gauss = np.asarray(self.gauss, dtype=float)
        if raw.ndim != 1 or raw.shape != gauss.shape or raw.size < 2:
            raise InvariantError("table needs two equal-length columns of >= 2 entries")
        if np.any(np.diff(raw) <= 0) or np.any(np.diff(gauss) <= 0):
            raise InvariantError("table columns must be strictly increasing")
        if not (self.lower <= raw[0] and self.upper >= raw[-1]):
            raise InvariantError("tail bounds must bracket the table")
        if not self.power > 0:
            raise InvariantError("tail exponent must be positive")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "gauss", gauss)

    @property
    def n(self):
        return self.raw.size

    @property
    def cdf(self):
        """Cumulative probabilities ``(rank - 0.5) / n`` of the table rows."""
        return (np.arange(1, self.n + 1) - 0.5) / self.n


@lru_cache(maxsize=64)
def _rank_scores(n):
    s = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    s.setflags(write=False)
    return s


def rank_scores(n):
    """Normal scores ``G^-1((rank - 0.5) / n)`` for ranks ``1..n`` (read-only)."""
    return _rank_scores(int(n))


def despike(values, seed):
    """Break ties by adding tiny seeded uniform noise to tied entries only.

    The noise amplitude is ``1e-9`` times the data range. Untied values are
    returned unchanged.
    """
    z = np.asarray(values, dtype=float)
    _, inverse, counts = np.unique(z, return_inverse=True, return_counts=True)
    tied = counts[inverse] > 1
    if not np.any(tied):
        return z.copy()
    spread = z.max() - z.min()
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=z.size) * DESPIKE_SCALE * spread
    return np.where(tied, z + noise, z)


def default_bounds(values):
    z = np.asarray(values, dtype=float)
    lo, hi = z.min(), z.max()
    pad = TAIL_PAD * (hi - lo)
    lower = lo - pad
    if lo >= 0:
        lower = max(lower, 0.0)
    upper = np.inf if hi > 0 else hi + pad
    return lower, upper


def build_anamorphosis(values, seed=0, lower=None, upper=None, power=DEFAULT_TAIL_POWER):
    """Build the normal-score table of a sample.

    Parameters
    ----------
    values : array_like
        At least two finite values.
    seed : int
        Seed for tie-breaking.
    lower, upper : float, optional
        Tail bounds; by default the data range padded by 5% (the lower bound
        is kept non-negative for non-negative data, the upper one is
        unbounded when the hyperbolic tail applies).
    power : float
        Hyperbolic upper-tail exponent.

    Returns
    -------
    AnamorphosisTable
    """
    z = np.asarray(values, dtype=float).ravel()
    if z.size < 2:
        raise DegenerateError("need at least two values")
    if not np.all(np.isfinite(z)):
        raise ValueError("values must be finite")
    if z.min() == z.max():
        raise DegenerateError("all values are identical")
    zd = np.sort(despike(z, seed))
    lo, hi = default_bounds(zd)
    lower = lo if lower is None else min(lower, zd[0])
    upper = hi if upper is None else max(upper, zd[-1])
    return AnamorphosisTable(zd, rank_scores(zd.size), float(lower), float(upper),
                             float(power), int(seed))


def normal_scores(values, seed=0):
    """Normal score of every value by its (despiked) rank.

    Returns the scores in input order, so ties receive distinct scores.
    """
    z = despike(np.asarray(values, dtype=float).ravel(), seed)
    order = np.argsort(z, kind="stable")
    out = np.empty(z.size)
    out[order] = rank_scores(z.size)
    return out


def _check_nan(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise ValueError("NaN input")
    return x


def gaussianize(table, z):
    """Raw value(s) to normal score(s); clamps outside the table."""
    z = _check_nan(z)
    return np.interp(z, table.raw, table.gauss)


def back_transform(table, y):
    """Normal score(s) to raw value(s), with tail extrapolation."""
    y = _check_nan(y)
    out = np.interp(y, table.gauss, table.raw)
    lo = y < table.gauss[0]
    hi = y > table.gauss[-1]
    if np.any(lo) or np.any(hi):
        p = stats.norm.cdf(y)
        p0, p1 = 0.5 / table.n, 1.0 - 0.5 / table.n
        out = np.where(lo, table.lower + (table.raw[0] - table.lower) * p / p0, out)
        out = np.where(hi, _upper_tail(table, p, p1), out)
    return out[()] if out.ndim == 0 else out


def _upper_tail(table, p, p1):
    return _upper_tail_raw(table.raw[-1], table.upper, table.power, p, p1)


def _upper_tail_raw(zmax, upper, power, p, p1):
    q = np.clip(1.0 - p, 1e-300, None)
    with np.errstate(invalid="ignore", divide="ignore"):
        hyper = np.minimum(zmax * ((1.0 - p1) / q) ** (1.0 / power), upper)
        linear = zmax + (upper - zmax) * np.clip((p - p1) / (1.0 - p1), 0.0, 1.0)
    return np.where(zmax > 0, hyper, linear)


def build_tables_rows(values, seeds=None):
    """Sorted, despiked rows plus default tail bounds for many small tables.

    Parameters
    ----------
    values : ndarray, shape (m, k)
        One sample per row; every row becomes a table sharing
        ``rank_scores(k)``.
    seeds : sequence of int, optional
        Tie-breaking seed per row (default: row index).

    Returns
    -------
    raw, lower, upper : ndarray
        ``raw`` has shape ``(m, k)``; ``lower`` and ``upper`` shape ``(m,)``.
    """
    V0 = np.asarray(values, dtype=float)
    V = np.sort(V0, axis=1)
    tied = np.any(np.diff(V, axis=1) == 0, axis=1)
    for r in np.flatnonzero(tied):
        if V[r, 0] == V[r, -1]:
            raise DegenerateError(f"row {r} has no spread")
        V[r] = np.sort(despike(V0[r], r if seeds is None else seeds[r]))
    lo, hi = V[:, 0], V[:, -1]
    pad = TAIL_PAD * (hi - lo)
    lower = np.where(lo >= 0, np.maximum(lo - pad, 0.0), lo - pad)
    upper = np.where(hi > 0, np.inf, hi + pad)
    return V, lower, upper


def back_transform_rows(raw, y, lower, upper, power=DEFAULT_TAIL_POWER):
    """Row-wise :func:`back_transform` for tables sharing one size ``k``.

    Row ``r`` of ``y`` (shape ``(m,)`` or ``(m, s)``) is mapped through the
    table ``(raw[r], rank_scores(k))`` with bounds ``lower[r]``,
    ``upper[r]``. Equivalent to calling :func:`back_transform` per row.
    """
    raw = np.asarray(raw, dtype=float)
    y = _check_nan(y)
    squeeze = y.ndim == 1
    Y = y[:, None] if squeeze else y
    m, k = raw.shape
    g = rank_scores(k)
    rows = np.arange(m)[:, None]
    j = np.clip(np.searchsorted(g, Y, side="right"), 1, k - 1)
    g0, g1 = g[j - 1], g[j]
    r0, r1 = raw[rows, j - 1], raw[rows, j]
    t = np.clip((Y - g0) / (g1 - g0), 0.0, 1.0)
    out = r0 + t * (r1 - r0)
    lo = Y < g[0]
    hi = Y > g[-1]
    if np.any(lo) or np.any(hi):
        p = stats.norm.cdf(Y)
        p0, p1 = 0.5 / k, 1.0 - 0.5 / k
        L = np.asarray(lower, dtype=float)[:, None]
        U = np.asarray(upper, dtype=float)[:, None]
        out = np.where(lo, L + (raw[:, :1] - L) * p / p0, out)
        out = np.where(hi, _upper_tail_raw(raw[:, -1:], U, power, p, p1), out)
    return out[:, 0] if squeeze else out


def marginal_cdf(table, z):
    """Empirical CDF of the table, extended through the tail models."""
    z = _check_nan(z)
    p0, p1 = 0.5 / table.n, 1.0 - 0.5 / table.n
    out = np.interp(z, table.raw, table.cdf)
    below = z < table.raw[0]
    width = table.raw[0] - table.lower
    if width > 0:
        frac = np.clip((z - table.lower) / width, 0.0, 1.0)
    else:
        frac = np.zeros_like(z)
    out = np.where(below, p0 * frac, out)
    above = z > table.raw[-1]
    if np.any(above):
        zmax = table.raw[-1]
        if zmax > 0:
            zz = np.where(above, z, zmax)
            tail = 1.0 - (1.0 - p1) * (zmax / zz) ** table.power
            tail = np.where(z >= table.upper, 1.0, tail)
        else:
            span = table.upper - zmax
            tail = p1 + (1.0 - p1) * np.clip((z - zmax) / span, 0.0, 1.0)
        out = np.where(above, tail, out)
    return out


def bivariate_normal_cdf(h, k, rho):
    """``P(X <= h, Y <= k)`` for a standard bivariate normal.

    Integrates the density derivative in the correlation,
    ``d/dr Phi2(h, k; r) = phi2(h, k; r)``, from 0 to ``rho``.
    """
    if np.isneginf(h) or np.isneginf(k):
        return 0.0
    if np.isposinf(h):
        return float(stats.norm.cdf(k))
    if np.isposinf(k):
        return float(stats.norm.cdf(h))

    def dens(r):
        s = 1.0 - r * r
        return np.exp(-(h * h - 2 * r * h * k + k * k) / (2 * s)) / (2 * np.pi * np.sqrt(s))

    base = stats.norm.cdf(h) * stats.norm.cdf(k)
    val, _ = integrate.quad(dens, 0.0, rho, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(np.clip(base + val, 0.0, 1.0))


def trivariate_normal_cdf(y, C):
    """Standard trivariate normal CDF by conditioning on the first variable."""
    y = np.asarray(y, dtype=float)
    if np.any(np.isneginf(y)):
        return 0.0
    r12, r13, r23 = C[0, 1], C[0, 2], C[1, 2]
    s2, s3 = np.sqrt(1 - r12 ** 2), np.sqrt(1 - r13 ** 2)
    r = (r23 - r12 * r13) / (s2 * s3)

    def integrand(t):
        return stats.norm.pdf(t) * bivariate_normal_cdf(
            (y[1] - r12 * t) / s2, (y[2] - r13 * t) / s3, r)

    val, _ = integrate.quad(integrand, -np.inf, y[0], epsabs=1e-12, epsrel=1e-10,
                            limit=200)
    return float(np.clip(val, 0.0, 1.0))


QMC_LOG2_POINTS = 17


def nataf_cdf(C, tables, z, seed=0):
    """Joint CDF of raw values coupled through a Gaussian copula.

    ``G_C(G^-1(F_1(z_1)), ..., G^-1(F_p(z_p)))`` with ``F_i`` the marginal
    CDF of table ``i``. Up to three dimensions the Gaussian CDF is computed
    by numerical quadrature; beyond that by scrambled Sobol points
    (``2^17 >= 1e5``), which is only good to about 1e-3.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    p = C.shape[0]
    if C.shape != (p, p) or len(tables) != p or z.size != p:
        raise DimensionError("C, tables and z must agree on p")
    probs = np.array([marginal_cdf(t, zi) for t, zi in zip(tables, z)], dtype=float)
    y = stats.norm.ppf(probs)
    if p == 1:
        return float(probs[0])
    if p == 2:
        return bivariate_normal_cdf(y[0], y[1], C[0, 1])
    if p == 3:
        return trivariate_normal_cdf(y, C)
    if np.any(np.isneginf(y)):
        return 0.0
    u = qmc.Sobol(d=p, scramble=True, seed=seed).random_base2(QMC_LOG2_POINTS)
    g = stats.norm.ppf(np.clip(u, 1e-16, 1 - 1e-16)) @ np.linalg.cholesky(C).T
    return float(np.mean(np.all(g <= y, axis=1)))


# ---------------------------------------------------------------- log-ratios

def alr_forward(c):
    """Additive log-ratio of composition(s), the last part being the reference.

    ``c`` has shape ``(..., p + 1)``; returns ``log(c_i / c_rest)`` with
    shape ``(..., p)``.
    """
    c = np.asarray(c, dtype=float)
    if np.any(~(c > 0)):
        raise ValueError("composition parts must be positive")
    return np.log(c[..., :-1]) - np.log(c[..., -1:])


def alr_inverse(x, closure=100.0):
    """Inverse additive log-ratio, closed to ``closure``.

    Raises
    ------
    OverflowError
        If a part underflows to zero or the input is not finite.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise OverflowError("non-finite log-ratio")
    full = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    parts = closure * e / e.sum(axis=-1, keepdims=True)
    if np.any(parts <= 0) or not np.all(np.isfinite(parts)):
        raise OverflowError("log-ratio too extreme: composition part saturates")
    return parts


def close(c, closure=100.0):
    """Rescale composition(s) to sum to ``closure``."""
    c = np.asarray(c, dtype=float)
    return closure * c / c.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------ serialization

def format_table(table):
    head = [
        "# anamorphosis table",
        f"# lower {table.lower!r}",
        f"# upper {table.upper!r}",
        f"# power {table.power!r}",
        f"# seed {table.seed}",
        "raw gaussian",
    ]
    body = [f"{r:.17g} {g:.17g}" for r, g in zip(table.raw, table.gauss)]
    return "\n".join(head + body) + "\n"


def parse_table(text):
    meta = {}
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            continue
        if line.startswith("raw"):
            continue
        rows.append([float(v) for v in line.split()])
    arr = np.array(rows)
    return AnamorphosisTable(arr[:, 0], arr[:, 1], float(meta["lower"]),
                             float(meta["upper"]), float(meta["power"]),
                             int(meta.get("seed", 0)))


def write_table(path, table):
    with open(path, "w") as fh:
        fh.write(format_table(table))


def read_table(path):
    with open(path) as fh:
        return parse_table(fh.read())
