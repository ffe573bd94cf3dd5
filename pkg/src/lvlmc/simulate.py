"""Factor simulation, correlation-field interpolation and the full pipeline.

Unconditional factors come from the spectral turning-bands method: each of
``L`` lines carries one random frequency drawn from the spectral density
of the covariance, and the field is ``sqrt(2/L) sum cos(w_l . x + phi_l)``.
Because the field is a closed-form function of position, it can be
evaluated at grid nodes and at data locations alike, which is what
conditioning by kriging of residuals needs.

Randomness for realization ``r`` and factor ``f`` comes from a generator
keyed by ``(seed, r, f)``; nugget noise is a counter-based hash of the
quantized coordinates and the same key. Results therefore do not depend
on evaluation order or on the number of worker threads.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data import Grid, SampleSet
from .errors import LvlmcError, StageError
from .kriging import KrigingOperator, SearchParams, kriging_operator
from .local_model import LocalModelSet, cholesky, infer_local_models
from .manifold import DEFAULT_SOLVER, SolverConfig, corr_frechet_mean, make_corr
from .neighborhood import build_index, knn_batch
from .transform import alr_forward, alr_inverse, back_transform_rows, build_tables_rows
from .variogram import (
    ExperimentalVariogram,
    VariogramModel,
    experimental_variogram,
    fit_exponential,
    lag_pairs,
)

__all__ = [
    "Grid",
    "CorrelationField",
    "Realization",
    "PipelineConfig",
    "PipelineResult",
    "spectral_field",
    "turning_bands",
    "condition",
    "interpolate_correlation_field",
    "fit_factor_variogram",
    "back_transform_nodes",
    "run_pipeline",
    "FLAG_OK",
    "FLAG_UNESTIMATED",
    "FLAG_FALLBACK",
]

log = logging.getLogger(__name__)

FLAG_OK = 0
FLAG_UNESTIMATED = 1
FLAG_FALLBACK = 2

_CHUNK = 1 << 21  # points x lines evaluated per block
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# --------------------------------------------------------------------------
# unconditional simulation

def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return x ^ (x >> np.uint64(31))


def _white_noise(points, key64):
    """Standard normal noise that is a pure function of position and key."""
    q = np.rint(points * 1e6).astype(np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = np.full(q.shape[0], key64, dtype=np.uint64)
        for a in range(3):
            h = _splitmix64(h ^ q[:, a])
        h2 = _splitmix64(h ^ np.uint64(0xD1B54A32D192ED03))
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    u2 = ((h2 >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0 ** 53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _frequencies(structure, n_lines, rng):
    b = structure.range / 3.0
    if structure.kind == "exponential":
        # multivariate Cauchy: spectral density of exp(-|h|/b) in 3D
        g = np.abs(rng.standard_normal(n_lines))
        return rng.standard_normal((n_lines, 3)) / (b * np.maximum(g, 1e-300))[:, None]
    if structure.kind == "gaussian":
        return rng.standard_normal((n_lines, 3)) * (np.sqrt(6.0) / structure.range)
    raise ValueError(f"unsupported structure type {structure.kind!r} for spectral simulation")


def spectral_field(model: VariogramModel, points, n_lines: int = 1200, key=0,
                   origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unconditional Gaussian field with covariance ``model`` at ``points``.

    Parameters
    ----------
    model : VariogramModel
        Exponential and Gaussian structures plus nugget; the total sill sets
        the variance.
    points : array_like, shape (m, 3)
    n_lines : int
        Random lines (frequencies) per structure.
    key : int or sequence of int
        Seed material; equal keys give equal fields.
    origin : 3-vector
        Reference point subtracted from coordinates. Every call that must
        share a field has to use the same origin.

    Raises
    ------
    ValueError
        Unsupported structure type or ``n_lines < 1``.
    """
    if n_lines < 1:
        raise ValueError("need at least one line")
    P = np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(origin, dtype=float)
    key = [int(k) for k in np.atleast_1d(key)]
    rng = np.random.default_rng(key)
    out = np.zeros(P.shape[0])
    step = max(1, _CHUNK // n_lines)
    for s in model.structures:
        w = _frequencies(s, n_lines, rng)
        phi = rng.uniform(0.0, 2.0 * np.pi, n_lines)
        amp = np.sqrt(2.0 * s.sill / n_lines)
        for a in range(0, P.shape[0], step):
            x = P[a:a + step]
            arg = x[:, 0:1] * w[:, 0] + x[:, 1:2] * w[:, 1] + x[:, 2:3] * w[:, 2] + phi
            out[a:a + step] += amp * np.add.reduce(np.cos(arg), axis=1)
    if model.nugget > 0:
        key64 = np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0]
        out += np.sqrt(model.nugget) * _white_noise(P, key64)
    return out


def turning_bands(model: VariogramModel, grid: Grid, n_lines: int = 1200,
                  seed: int = 0) -> np.ndarray:
    """Unconditional field at every grid node (x fastest).

    Raises
    ------
    ValueError
        ``n_lines < 100`` or a structure type without a spectral sampler.
    """
    if n_lines < 100:
        raise ValueError("turning bands needs at least 100 lines")
    return spectral_field(model, grid.nodes(), n_lines, seed, grid.origin)


def condition(unconditional_nodes, unconditional_data, data_values,
              operator: KrigingOperator) -> np.ndarray:
    """Condition by kriging of residuals.

    ``result = unconditional + K (data - unconditional at data)``, with
    ``K`` the kriging operator from data to nodes. Nodes without data in
    reach keep their unconditional value. Values may carry a trailing
    realization axis.
    """
    resid = np.asarray(data_values, dtype=float) - np.asarray(unconditional_data, dtype=float)
    return np.asarray(unconditional_nodes, dtype=float) + operator.apply(resid)


# --------------------------------------------------------------------------
# correlation field

@dataclass(frozen=True)
class CorrelationField:
    """Interpolated correlation matrices at target points.

    ``flag`` is :data:`FLAG_OK`, :data:`FLAG_UNESTIMATED` (no local model
    within reach; the nearest one is copied) or :data:`FLAG_FALLBACK`
    (the Frechet solver failed; the nearest converged node is copied).
    """

    corr: np.ndarray
    residual: np.ndarray
    flag: np.ndarray
    iterations: np.ndarray

    @property
    def n_fallback(self) -> int:
        return int(np.sum(self.flag == FLAG_FALLBACK))


def _frechet_row(rows, Cs, op, cfg):
    out = []
    prev = None
    for t in rows:
        if not op.estimated[t]:
            out.append((t, Cs[op.nearest[t]], np.nan, FLAG_UNESTIMATED, 0))
            prev = None
            continue
        w = op.weights[t]
        use = w != 0
        ids, w = op.ids[t][use], w[use]
        M = Cs[ids]
        if np.all(M == M[0]):
            out.append((t, M[0].copy(), 0.0, FLAG_OK, 0))
            prev = M[0]
            continue
        init = prev if prev is not None else Cs[op.nearest[t]]
        try:
            C, info = corr_frechet_mean(M, w, cfg, init=init, full_output=True)
            out.append((t, C, info.residual, FLAG_OK, info.n_iter))
            prev = C
        except (LvlmcError, np.linalg.LinAlgError) as exc:
            res = getattr(exc, "residual", np.nan)
            out.append((t, None, res, FLAG_FALLBACK, cfg.max_iter))
            prev = None
    return out


def interpolate_correlation_field(corrs, data_locations, targets, model: VariogramModel,
                                  search: SearchParams = SearchParams(),
                                  cfg: SolverConfig = DEFAULT_SOLVER, rows=None,
                                  threads: int = 1,
                                  operator: KrigingOperator | None = None) -> CorrelationField:
    """Weighted Frechet mean of local correlation matrices at each target.

    Weights are ordinary kriging weights of the local models' locations.
    Targets are processed in ``rows`` (lists of target indices, in scan
    order); each node is warm-started from the previous node of its row,
    or from the nearest local model at a row start. Rows are independent
    work units, so the thread count does not affect results.

    Parameters
    ----------
    corrs : array_like, shape (n, p, p)
        Local correlation matrices at ``data_locations``.
    targets : array_like, shape (m, 3)
    rows : list of array_like of int, optional
        Default: every target on its own.
    """
    Cs = make_corr(np.asarray(corrs, dtype=float))
    T = np.asarray(targets, dtype=float).reshape(-1, 3)
    op = kriging_operator(model, data_locations, T, search) if operator is None else operator
    if rows is None:
        rows = [[t] for t in range(T.shape[0])]
    p = Cs.shape[-1]
    corr = np.empty((T.shape[0], p, p))
    resid = np.full(T.shape[0], np.nan)
    flag = np.zeros(T.shape[0], dtype=np.int8)
    iters = np.zeros(T.shape[0], dtype=np.int32)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        results = list(ex.map(lambda r: _frechet_row(r, Cs, op, cfg), rows))
    for chunk in results:
        for t, C, r, f, k in chunk:
            if C is not None:
                corr[t] = C
            resid[t], flag[t], iters[t] = r, f, k
    bad = np.flatnonzero(flag == FLAG_FALLBACK)
    if bad.size:
        good = np.flatnonzero(flag == FLAG_OK)
        log.warning("Frechet mean failed at %d nodes; using nearest converged node", bad.size)
        if good.size:
            _, j = cKDTree(T[good]).query(T[bad])
            corr[bad] = corr[good[j]]
        else:
            corr[bad] = Cs[op.nearest[bad]]
    return CorrelationField(corr, resid, flag, iters)


# --------------------------------------------------------------------------
# pipeline pieces

def fit_factor_variogram(locations, factors, lag_width: float, n_lags: int):
    """One exponential model for all factors, standardized to unit sill.

    The pooled experimental variogram (pair-weighted mean of the factors'
    direct variograms, which share pairs) is fitted and the fitted model is
    rescaled to a total sill of one.

    Returns
    -------
    model : VariogramModel
    experimental : list of ExperimentalVariogram
        Direct variograms per factor followed by the pooled one.
    raw_sill : float
        Total sill before standardization.
    """
    F = np.asarray(factors, dtype=float)
    pairs = lag_pairs(locations, lag_width, n_lags)
    evs = [experimental_variogram(locations, F[:, j], pairs=pairs, variables=(j, j))
           for j in range(F.shape[1])]
    pooled = ExperimentalVariogram(evs[0].lags, np.mean([e.gamma for e in evs], axis=0),
                                   evs[0].pairs, (-1, -1))
    fitted = fit_exponential(pooled)
    sill = fitted.total_sill
    return fitted.scaled(1.0 / sill), evs + [pooled], sill


def back_transform_nodes(values, sample_locations, targets, y, k: int, chunk: int = 1024):
    """Back-transform Gaussian values at targets with local tables.

    The table at each target is built from the raw values of its ``k``
    nearest samples. ``y`` has shape ``(m,)`` or ``(m, s)``.
    """
    v = np.asarray(values, dtype=float)
    T = np.asarray(targets, dtype=float).reshape(-1, 3)
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    if k >= v.size:
        raw, lo, hi = build_tables_rows(v[None, :], seeds=[0])
        for s in range(0, T.shape[0], chunk):
            sl = slice(s, s + chunk)
            m = y[sl].shape[0]
            out[sl] = back_transform_rows(np.broadcast_to(raw, (m, raw.shape[1])), y[sl],
                                          np.repeat(lo, m), np.repeat(hi, m))
        return out
    index = build_index(sample_locations)
    for s in range(0, T.shape[0], chunk):
        sl = slice(s, s + chunk)
        nb, _ = knn_batch(index, T[sl], k)
        raw, lo, hi = build_tables_rows(v[nb], seeds=np.arange(s, s + nb.shape[0]))
        out[sl] = back_transform_rows(raw, y[sl], lo, hi)
    return out


@dataclass(frozen=True)
class Realization:
    """One simulated realization at the target points.

    ``factors`` are the conditioned independent factors, ``gauss`` the
    recorrelated Gaussians ``L(u) factors`` and ``values`` the
    back-transformed values (after the alr inverse when enabled).
    """

    index: int
    seed: int
    factors: np.ndarray
    gauss: np.ndarray
    values: np.ndarray


@dataclass
class PipelineConfig:
    """Settings for :func:`run_pipeline`.

    Exactly one of ``grid`` or ``targets`` defines where to simulate;
    ``active`` optionally restricts a grid to a subset of its nodes.
    """

    samples: SampleSet
    grid: Grid | None = None
    targets: np.ndarray | None = None
    active: np.ndarray | None = None
    k: int = 300
    backtransform_k: int | None = None
    global_neighborhood: bool = False
    seed: int = 0
    n_realizations: int = 1
    n_lines: int = 1200
    search: SearchParams = field(default_factory=SearchParams)
    solver: SolverConfig = DEFAULT_SOLVER
    variogram: VariogramModel | None = None
    lag_width: float | None = None
    n_lags: int = 15
    alr: bool = False
    closure: float = 100.0
    threads: int = 1
    mask_far: bool = True


@dataclass
class PipelineResult:
    targets: np.ndarray
    target_ids: np.ndarray
    local_models: LocalModelSet
    model: VariogramModel
    raw_sill: float
    experimental: list
    field: CorrelationField
    chol: np.ndarray
    estimated: np.ndarray
    realizations: list
    timings: dict
    reports: dict

    def values(self) -> np.ndarray:
        """Realization values stacked as ``(n_realizations, m, q)``."""
        return np.stack([r.values for r in self.realizations])

    def mean(self) -> np.ndarray:
        return self.values().mean(axis=0)


def _stage(name, timings):
    class _Ctx:
        def __enter__(self):
            self.t = time.perf_counter()
            log.info("stage %s", name)

        def __exit__(self, et, ev, tb):
            timings[name] = time.perf_counter() - self.t
            if ev is not None and not isinstance(ev, StageError):
                raise StageError(name, ev) from ev
            return False
    return _Ctx()


def _target_rows(cfg, ids):
    """Scan-order rows of targets for warm starting."""
    if cfg.grid is None:
        return [[t] for t in range(ids.size)]
    nx = cfg.grid.counts[0]
    row = ids // nx
    starts = np.flatnonzero(np.r_[True, row[1:] != row[:-1]])
    bounds = np.r_[starts, ids.size]
    return [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _simulate_factors(r, cfg, model, sim_points, n_t, op, factors, chol, origin):
    p = factors.shape[1]
    Yf = np.empty((n_t, p))
    for f in range(p):
        u = spectral_field(model, sim_points, cfg.n_lines, (cfg.seed, r, f), origin)
        Yf[:, f] = condition(u[:n_t], u[n_t:], factors[:, f], op)
    return Yf, np.einsum("tij,tj->ti", chol, Yf)


def run_pipeline(cfg: PipelineConfig, local_models: LocalModelSet | None = None) -> PipelineResult:
    """Run local inference, variography, interpolation and simulation.

    Parameters
    ----------
    cfg : PipelineConfig
    local_models : LocalModelSet, optional
        Precomputed local models (one per sample, in sample order); the
        inference stage is skipped when given.

    Raises
    ------
    StageError
        Tagged with the failing stage; per-node Frechet failures do not
        raise and are counted in ``reports["fallback_nodes"]``.
    """
    timings = {}
    reports = {}
    samples = cfg.samples
    with _stage("prepare", timings):
        values_z = samples.values
        if cfg.alr:
            values_z = alr_forward(values_z)
            samples = SampleSet(samples.locations, values_z,
                                tuple(f"alr{i + 1}" for i in range(values_z.shape[1])))
        if cfg.grid is not None:
            all_nodes = cfg.grid.nodes()
            ids = (np.arange(cfg.grid.size) if cfg.active is None
                   else np.flatnonzero(np.asarray(cfg.active, dtype=bool)))
            targets = all_nodes[ids]
            origin = cfg.grid.origin
        else:
            targets = np.asarray(cfg.targets, dtype=float).reshape(-1, 3)
            ids = np.arange(targets.shape[0])
            origin = tuple(samples.locations.min(axis=0))
        k = samples.n if cfg.global_neighborhood else min(cfg.k, samples.n)
        bk = samples.n if cfg.global_neighborhood else (cfg.backtransform_k or k)
    with _stage("infer", timings):
        lm = infer_local_models(samples, k, cfg.seed) if local_models is None else local_models
        fv = np.asarray(lm.factor_variance)
        reports["factor_variance_mean"] = fv.mean(axis=0).tolist()
    with _stage("variogram", timings):
        if cfg.variogram is not None:
            model, evs, raw_sill = cfg.variogram, [], cfg.variogram.total_sill
        else:
            ext = np.ptp(samples.locations, axis=0).max()
            lw = cfg.lag_width or ext / (2.0 * cfg.n_lags)
            model, evs, raw_sill = fit_factor_variogram(samples.locations, lm.factor, lw,
                                                        cfg.n_lags)
        reports["raw_sill"] = raw_sill
        reports["factor_sample_variance"] = np.var(lm.factor, axis=0).tolist()
        if abs(raw_sill - 1.0) > 0.05:
            log.info("fitted factor sill %.3f standardized to 1", raw_sill)
    with _stage("kriging", timings):
        op = kriging_operator(model, samples.locations, targets, cfg.search)
    with _stage("correlation_field", timings):
        cf = interpolate_correlation_field(lm.corr, samples.locations, targets, model,
                                           cfg.search, cfg.solver, _target_rows(cfg, ids),
                                           cfg.threads, op)
        chol = cholesky(cf.corr)
        reports["fallback_nodes"] = cf.n_fallback
        reports["unestimated_nodes"] = int(np.sum(cf.flag == FLAG_UNESTIMATED))
    with _stage("simulate", timings):
        sim_points = np.vstack([targets, samples.locations])

        def one(r):
            return _simulate_factors(r, cfg, model, sim_points, targets.shape[0], op,
                                     lm.factor, chol, origin)

        with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as ex:
            sims = list(ex.map(one, range(cfg.n_realizations)))
    with _stage("back_transform", timings):
        G = np.stack([g for _, g in sims], axis=1)  # (m, R, p)
        Z = np.empty_like(G)
        for j in range(G.shape[2]):
            Z[:, :, j] = back_transform_nodes(values_z[:, j], samples.locations, targets,
                                              G[:, :, j], bk)
        if cfg.alr:
            Z = alr_inverse(Z, cfg.closure)
        reals = [Realization(r, cfg.seed, sims[r][0], sims[r][1], Z[:, r])
                 for r in range(cfg.n_realizations)]
    estimated = op.estimated if cfg.mask_far else np.ones(targets.shape[0], dtype=bool)
    return PipelineResult(targets, ids, lm, model, raw_sill, evs, cf, chol, estimated, reals,
                          timings, reports)
