"""Omnidirectional experimental variograms and nested variogram models.

Ranges follow the practical-range convention: an exponential structure
reaches 95% of its sill at ``h = range`` (``1 - exp(-3 h / a)``), and the
Gaussian structure likewise (``1 - exp(-3 h^2 / a^2)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .errors import FitError, InvariantError

__all__ = [
    "STRUCTURE_TYPES",
    "Structure",
    "VariogramModel",
    "ExperimentalVariogram",
    "LagPairs",
    "lag_pairs",
    "experimental_variogram",
    "fit_exponential",
    "covariance_eval",
    "write_experimental_csv",
    "format_model",
    "parse_model",
]

STRUCTURE_TYPES = ("exponential", "spherical", "gaussian")
# a structure whose correlation at the first lag is below this is
# indistinguishable from nugget and gets merged into it
COLLAPSE_LEVEL = 1e-3


@dataclass(frozen=True)
class Structure:
    kind: str
    range: float
    sill: float

    def __post_init__(self):
        if self.kind not in STRUCTURE_TYPES:
            raise InvariantError(f"unknown structure type {self.kind!r}")
        if not self.range > 0:
            raise InvariantError("structure range must be positive")
        if not self.sill >= 0:
            raise InvariantError("structure sill must be non-negative")

    def correlation(self, h):
        r = np.asarray(h, dtype=float) / self.range
        if self.kind == "exponential":
            return np.exp(-3.0 * r)
        if self.kind == "gaussian":
            return np.exp(-3.0 * r * r)
        rc = np.minimum(r, 1.0)
        return 1.0 - 1.5 * rc + 0.5 * rc ** 3


@dataclass(frozen=True)
class VariogramModel:
    """Nugget plus nested structures.

    Attributes
    ----------
    nugget : float
    structures : tuple of Structure
    """

    nugget: float = 0.0
    structures: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.nugget >= 0:
            raise InvariantError("nugget must be non-negative")
        object.__setattr__(self, "structures", tuple(self.structures))

    @classmethod
    def exponential(cls, range_, sill=1.0, nugget=0.0):
        return cls(nugget, (Structure("exponential", float(range_), float(sill)),))

    @property
    def total_sill(self) -> float:
        return self.nugget + sum(s.sill for s in self.structures)

    def covariance(self, h):
        """``C(h)``; ``C(0)`` includes the nugget."""
        h = np.asarray(h, dtype=float)
        if np.any(h < 0):
            raise ValueError("lag distances must be non-negative")
        c = np.zeros_like(h)
        for s in self.structures:
            c = c + s.sill * s.correlation(h)
        return np.where(h == 0, self.total_sill, c)

    def gamma(self, h):
        """``gamma(h) = C(0) - C(h)``."""
        return self.total_sill - self.covariance(h)

    def scaled(self, factor: float) -> "VariogramModel":
        return VariogramModel(
            self.nugget * factor,
            tuple(Structure(s.kind, s.range, s.sill * factor) for s in self.structures),
        )


def covariance_eval(model: VariogramModel, h):
    """Covariance of ``model`` at lag ``h`` (metres, non-negative)."""
    return model.covariance(h)


@dataclass(frozen=True)
class ExperimentalVariogram:
    """Binned semivariogram estimates between variables ``i`` and ``j``.

    ``lags`` holds the mean pair distance in each bin (the bin centre when
    empty); ``empty`` flags bins without pairs, whose ``gamma`` is NaN.
    """

    lags: np.ndarray
    gamma: np.ndarray
    pairs: np.ndarray
    variables: tuple = (0, 0)

    @property
    def empty(self) -> np.ndarray:
        return self.pairs == 0


@dataclass(frozen=True)
class LagPairs:
    """Point pairs grouped into lag bins, reusable across value sets."""

    i: np.ndarray
    j: np.ndarray
    bin: np.ndarray
    dist: np.ndarray
    lag_width: float
    n_lags: int


def lag_pairs(locations, lag_width: float, n_lags: int) -> LagPairs:
    """Enumerate pairs with distance in ``[(k - 1/2) w, (k + 1/2) w)``, ``k = 1..n``."""
    if not lag_width > 0:
        raise ValueError("lag width must be positive")
    X = np.asarray(locations, dtype=float)
    rmax = (n_lags + 0.5) * lag_width
    P = cKDTree(X).query_pairs(rmax, output_type="ndarray")
    P = P[np.lexsort((P[:, 1], P[:, 0]))] if P.size else P.reshape(0, 2)
    d = np.sqrt(np.sum((X[P[:, 0]] - X[P[:, 1]]) ** 2, axis=1))
    b = np.floor(d / lag_width + 0.5).astype(np.intp)
    keep = (b >= 1) & (b <= n_lags)
    return LagPairs(P[keep, 0], P[keep, 1], b[keep] - 1, d[keep], float(lag_width), int(n_lags))


def experimental_variogram(locations, values_i, values_j=None, lag_width: float = 1.0,
                           n_lags: int = 10, pairs: LagPairs | None = None,
                           variables=(0, 0)) -> ExperimentalVariogram:
    """Classical (cross-)semivariogram estimator.

    ``gamma_ij(h) = 1/(2 N(h)) sum (v_i(u) - v_i(u+h)) (v_j(u) - v_j(u+h))``
    over all pairs in the lag bin, regardless of direction.

    Parameters
    ----------
    locations : array_like, shape (n, 3)
    values_i, values_j : array_like, shape (n,)
        ``values_j`` defaults to ``values_i`` (direct variogram).
    lag_width : float
    n_lags : int
    pairs : LagPairs, optional
        Precomputed pairs for the same locations, overriding the lag
        arguments.
    """
    vi = np.asarray(values_i, dtype=float)
    vj = vi if values_j is None else np.asarray(values_j, dtype=float)
    if vi.shape != vj.shape or vi.shape[0] != np.shape(locations)[0]:
        raise ValueError("locations and value arrays must have equal length")
    if pairs is None:
        pairs = lag_pairs(locations, lag_width, n_lags)
    n = pairs.n_lags
    prod = (vi[pairs.i] - vi[pairs.j]) * (vj[pairs.i] - vj[pairs.j])
    cnt = np.bincount(pairs.bin, minlength=n)
    s = np.bincount(pairs.bin, weights=prod, minlength=n)
    dsum = np.bincount(pairs.bin, weights=pairs.dist, minlength=n)
    centers = pairs.lag_width * np.arange(1, n + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(cnt > 0, s / (2.0 * cnt), np.nan)
        lags = np.where(cnt > 0, dsum / cnt, centers)
    return ExperimentalVariogram(lags, gamma, cnt, tuple(variables))


def _exp_gamma(params, h):
    c0, a, c = params
    return c0 + c * (1.0 - np.exp(-3.0 * h / a))


def fit_exponential(ev: ExperimentalVariogram, min_range: float | None = None,
                    max_range: float | None = None) -> VariogramModel:
    """Weighted least-squares fit of ``nugget + sill (1 - exp(-3h/range))``.

    Weights are ``N(h) / h^2`` normalized to sum one, so the fit does not
    depend on the overall scale of the pair counts. A structure whose
    correlation has died out by the first lag is merged into the nugget
    and its range set to ``min_range``; so is a structure with vanishing
    sill.

    Parameters
    ----------
    ev : ExperimentalVariogram
        At least three non-empty lags.
    min_range, max_range : float, optional
        Range bounds; default ``1e-3`` and ``100`` times the largest lag.

    Raises
    ------
    FitError
        Too few lags or optimizer failure; ``residuals`` carries the last
        weighted residual vector.
    """
    ok = ~ev.empty
    if ok.sum() < 3:
        raise FitError("need at least three non-empty lags")
    h, g, n = ev.lags[ok], ev.gamma[ok], ev.pairs[ok].astype(float)
    w = n / (h * h)
    sw = np.sqrt(w / w.sum())
    hmax = h.max()
    lo = 1e-3 * hmax if min_range is None else float(min_range)
    hi = 100.0 * hmax if max_range is None else float(max_range)
    gscale = max(float(np.max(np.abs(g))), 1e-300)

    def resid(q):
        return sw * (_exp_gamma(q, h) - g)

    best = None
    for frac in (0.1, 0.3, 1.0):
        for nug in (0.0, 0.5):
            x0 = [nug * gscale, min(max(frac * hmax, lo), hi), (1 - nug) * gscale]
            try:
                r = least_squares(resid, x0, bounds=([0.0, lo, 0.0], [np.inf, hi, np.inf]),
                                  x_scale=[gscale, hmax, gscale], xtol=1e-14, ftol=1e-14,
                                  gtol=1e-14, max_nfev=5000)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise FitError(f"variogram fit failed: {exc}", resid(x0)) from None
            if best is None or r.cost < best.cost:
                best = r
    if not np.all(np.isfinite(best.x)):
        raise FitError("variogram fit produced non-finite parameters", best.fun)
    c0, a, c = (float(v) for v in best.x)
    if np.exp(-3.0 * h.min() / a) < COLLAPSE_LEVEL or c <= 1e-9 * (c0 + c):
        c0, a, c = c0 + c, lo, 0.0
    return VariogramModel.exponential(a, c, c0)


def write_experimental_csv(path, evs) -> None:
    """CSV with ``i,j,lag,gamma,pairs`` rows for one or more variograms."""
    with open(path, "w", newline="\n") as fh:
        fh.write("i,j,lag,gamma,pairs\n")
        for ev in evs:
            for h, g, n in zip(ev.lags, ev.gamma, ev.pairs):
                fh.write(f"{ev.variables[0]},{ev.variables[1]},{h:.10g},{g:.10g},{int(n)}\n")


def format_model(model: VariogramModel) -> str:
    """Text block: ``nugget <c0>`` then one ``<type> <range> <sill>`` per line."""
    lines = [f"nugget {model.nugget:.17g}"]
    lines += [f"{s.kind} {s.range:.17g} {s.sill:.17g}" for s in model.structures]
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> VariogramModel:
    nugget, structs = 0.0, []
    for ln in text.strip().splitlines():
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "nugget":
            nugget = float(tok[1])
        else:
            structs.append(Structure(tok[0], float(tok[1]), float(tok[2])))
    return VariogramModel(nugget, tuple(structs))
