"""Synthetic deposit with a known, spatially varying correlation.

Two independent unit-sill exponential factors are mixed by
``L(u) = [[1, 0], [rho(u), sqrt(1 - rho(u)^2)]]`` with ``rho`` linear in
the east coordinate, then mapped to lognormal grades
``Z = exp(mu(u) + sigma Y)``. Pseudo-drillholes with random azimuth and
dip sample the truth at grid nodes. Validation metrics and accuracy-plot
data live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Grid, SampleSet
from .errors import InvariantError
from .simulate import spectral_field
from .variogram import VariogramModel

__all__ = [
    "SyntheticConfig",
    "SyntheticTruth",
    "ValidationReport",
    "generate_synthetic",
    "drillhole_nodes",
    "drillhole_sample",
    "holdout_split",
    "error_metrics",
    "accuracy_plot_data",
    "validation_report",
    "write_reports",
    "format_table",
    "NOMINAL_P",
]

NOMINAL_P = np.round(np.arange(1, 10) / 10, 10)


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings; lengths in metres.

    ``mu1`` is ``mu1_base + mu1_amp * (1 - s^2)`` and ``mu2`` is
    ``mu2_base + mu2_slope * s``, with ``s`` the east coordinate scaled to
    ``[-1, 1]`` across the domain.
    """

    extent: tuple = (400.0, 400.0, 40.0)
    spacing: tuple = (5.0, 5.0, 5.0)
    range: float = 50.0
    rho_west: float = 0.9
    rho_east: float = -0.9
    mu1_base: float = 0.0
    mu1_amp: float = 1.0
    mu2_base: float = 0.5
    mu2_slope: float = 0.5
    sigma: float = 0.5
    hole_spacing: float = 25.0
    sample_interval: float | None = None
    max_dip: float = 30.0
    collar_jitter: float = 0.0
    n_lines: int = 1200
    seed: int = 0

    def __post_init__(self):
        if not (abs(self.rho_west) < 1 and abs(self.rho_east) < 1):
            raise InvariantError("edge correlations must lie in (-1, 1)")
        if not self.sigma > 0:
            raise InvariantError("sigma must be positive")
        if min(self.extent) <= 0 or min(self.spacing) <= 0 or self.range <= 0:
            raise InvariantError("extents, spacing and range must be positive")
        if self.hole_spacing <= 0:
            raise InvariantError("drillhole spacing must be positive")

    @property
    def grid(self) -> Grid:
        counts = [max(1, int(round(e / s))) for e, s in zip(self.extent, self.spacing)]
        origin = [0.5 * s for s in self.spacing]
        return Grid(origin, self.spacing, counts)

    def east_fraction(self, x):
        """East coordinate mapped to ``[0, 1]`` across the domain."""
        return np.asarray(x, dtype=float) / self.extent[0]

    def rho(self, x):
        f = self.east_fraction(x)
        return self.rho_west + (self.rho_east - self.rho_west) * f

    def mu(self, x):
        s = 2.0 * self.east_fraction(x) - 1.0
        return np.column_stack([self.mu1_base + self.mu1_amp * (1.0 - s * s),
                                self.mu2_base + self.mu2_slope * s])


@dataclass(frozen=True)
class SyntheticTruth:
    """Truth on the grid: factors, correlated Gaussians, grades, imposed rho."""

    grid: Grid
    factors: np.ndarray
    gauss: np.ndarray
    values: np.ndarray
    rho: np.ndarray


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticTruth:
    """Simulate the truth fields on ``cfg.grid``.

    Factor ``f`` uses the generator key ``(seed, f)``.
    """
    grid = cfg.grid
    nodes = grid.nodes()
    model = VariogramModel.exponential(cfg.range)
    F = np.column_stack([spectral_field(model, nodes, cfg.n_lines, (cfg.seed, f), grid.origin)
                         for f in range(2)])
    rho = cfg.rho(nodes[:, 0])
    Y = np.column_stack([F[:, 0], rho * F[:, 0] + np.sqrt(1.0 - rho * rho) * F[:, 1]])
    Z = np.exp(cfg.mu(nodes[:, 0]) + cfg.sigma * Y)
    return SyntheticTruth(grid, F, Y, Z, rho)


def drillhole_nodes(cfg: SyntheticConfig):
    """Grid nodes hit by the pseudo-drillholes.

    Collars sit on a square pattern of ``hole_spacing`` (optionally
    jittered) at the top of the domain. Each hole has uniform azimuth and
    a dip within ``max_dip`` degrees of vertical, and is sampled every
    ``sample_interval`` metres (default: the vertical grid spacing) at the
    nearest grid node. Nodes hit twice are kept once.

    Returns
    -------
    nodes, holes : ndarray of int
        Flat node indices in drilling order and the hole of each.

    Raises
    ------
    ValueError
        If the hole spacing exceeds the domain, leaving no holes.
    """
    grid = cfg.grid
    ex, ey, ez = cfg.extent
    hs = cfg.hole_spacing
    if hs > ex or hs > ey:
        raise ValueError("drillhole spacing larger than the domain: no samples")
    rng = np.random.default_rng([cfg.seed, 7])
    cx = np.arange(0.5 * hs, ex, hs)
    cy = np.arange(0.5 * hs, ey, hs)
    CX, CY = np.meshgrid(cx, cy, indexing="xy")
    collars = np.column_stack([CX.ravel(), CY.ravel()])
    n = collars.shape[0]
    collars = collars + rng.uniform(-1, 1, size=(n, 2)) * cfg.collar_jitter
    az = rng.uniform(0.0, 2.0 * np.pi, n)
    dip = np.deg2rad(rng.uniform(0.0, cfg.max_dip, n))
    step = cfg.sample_interval or cfg.spacing[2]
    nodes, holes = [], []
    seen = set()
    lo = np.zeros(3)
    hi = np.array(cfg.extent)
    for h in range(n):
        d = np.array([np.sin(dip[h]) * np.cos(az[h]), np.sin(dip[h]) * np.sin(az[h]),
                      -np.cos(dip[h])])
        start = np.array([collars[h, 0], collars[h, 1], ez])
        t = 0.5 * step
        while True:
            pt = start + t * d
            if np.any(pt < lo) or np.any(pt > hi):
                break
            node = int(grid.nearest_index(pt)[0])
            if node not in seen:
                seen.add(node)
                nodes.append(node)
                holes.append(h)
            t += step
    if not nodes:
        raise ValueError("drillhole configuration produced no samples")
    return np.array(nodes, dtype=np.intp), np.array(holes, dtype=np.intp)


def drillhole_sample(truth: SyntheticTruth, cfg: SyntheticConfig):
    """Sample the truth along pseudo-drillholes.

    Returns
    -------
    samples : SampleSet
        Grades ``z1, z2`` at node centres.
    nodes : ndarray of int
        Flat grid index of every sample.
    """
    nodes, _ = drillhole_nodes(cfg)
    locs = truth.grid.nodes()[nodes]
    return SampleSet(locs, truth.values[nodes], ("z1", "z2")), nodes


def holdout_split(n: int, fraction: float = 0.3, seed: int = 0):
    """Random ``(train, test)`` index split with ``round(fraction n)`` test ids."""
    rng = np.random.default_rng([seed, 11])
    perm = rng.permutation(n)
    m = int(round(fraction * n))
    return np.sort(perm[m:]), np.sort(perm[:m])


def error_metrics(predicted, truth):
    """``(ME, MAE, RMSE)`` of ``predicted - truth``.

    Raises
    ------
    ValueError
        Empty or mismatched inputs.
    """
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("need equal-length, non-empty inputs")
    e = p - t
    return float(e.mean()), float(np.abs(e).mean()), float(np.sqrt(np.mean(e * e)))


def accuracy_plot_data(realizations, truth, nominal=NOMINAL_P):
    """Coverage of symmetric probability intervals.

    Parameters
    ----------
    realizations : array_like, shape (R, m)
        Simulated values at ``m`` nodes.
    truth : array_like, shape (m,)
    nominal : sequence of float
        Interval probabilities ``p``.

    Returns
    -------
    ndarray, shape (len(nominal), 2)
        Rows ``(p, fraction of nodes whose truth lies in the
        [(1-p)/2, (1+p)/2] quantile interval)``.

    Raises
    ------
    ValueError
        Fewer than 20 realizations, or too few to resolve the outermost
        quantile.
    """
    R = np.asarray(realizations, dtype=float)
    t = np.asarray(truth, dtype=float)
    if R.ndim != 2 or R.shape[1] != t.size or t.size == 0:
        raise ValueError("realizations must be (R, m) with m = len(truth) >= 1")
    nominal = np.asarray(nominal, dtype=float)
    tail = 0.5 * (1.0 - nominal.max())
    if R.shape[0] < 20 or R.shape[0] * tail < 1.0 - 1e-9:
        raise ValueError(f"{R.shape[0]} realizations cannot resolve the requested quantiles")
    out = np.empty((nominal.size, 2))
    for i, p in enumerate(nominal):
        lo = np.quantile(R, 0.5 * (1.0 - p), axis=0)
        hi = np.quantile(R, 0.5 * (1.0 + p), axis=0)
        out[i] = p, np.mean((t >= lo) & (t <= hi))
    return out


@dataclass
class ValidationReport:
    """Per-variable error metrics and accuracy-plot data."""

    names: tuple
    me: np.ndarray
    mae: np.ndarray
    rmse: np.ndarray
    accuracy: dict = field(default_factory=dict)

    @property
    def max_calibration_error(self) -> float:
        if not self.accuracy:
            return float("nan")
        return max(float(np.max(np.abs(a[:, 1] - a[:, 0]))) for a in self.accuracy.values())


def validation_report(predicted, truth, names=None, realizations=None) -> ValidationReport:
    """Metrics for every column of ``predicted``/``truth`` (shape ``(m, q)``).

    ``realizations`` (shape ``(R, m, q)``), when given, adds accuracy-plot
    data per variable.
    """
    P = np.asarray(predicted, dtype=float)
    T = np.asarray(truth, dtype=float)
    P = P[:, None] if P.ndim == 1 else P
    T = T[:, None] if T.ndim == 1 else T
    q = P.shape[1]
    names = tuple(names) if names else tuple(f"v{i + 1}" for i in range(q))
    m = np.array([error_metrics(P[:, j], T[:, j]) for j in range(q)])
    acc = {}
    if realizations is not None:
        Rz = np.asarray(realizations, dtype=float)
        Rz = Rz[..., None] if Rz.ndim == 2 else Rz
        acc = {names[j]: accuracy_plot_data(Rz[:, :, j], T[:, j]) for j in range(q)}
    return ValidationReport(names, m[:, 0], m[:, 1], m[:, 2], acc)


def format_table(reports: dict) -> str:
    """Plain-text metric table: one row per metric, one column per method/variable."""
    cols = [(method, j, name) for method, r in reports.items() for j, name in enumerate(r.names)]
    head = ["metric"] + [f"{method}:{name}" for method, _, name in cols]
    lines = ["  ".join(f"{h:>14s}" for h in head)]
    for metric in ("me", "mae", "rmse"):
        row = [metric.upper()] + [f"{getattr(reports[m], metric)[j]:.6g}" for m, j, _ in cols]
        lines.append("  ".join(f"{v:>14s}" for v in row))
    return "\n".join(lines) + "\n"


def write_reports(out_dir, reports: dict):
    """Write ``metrics.csv``, ``accuracy.csv`` and ``report.txt``.

    ``reports`` maps a method label to its :class:`ValidationReport`.
    Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "accuracy.csv", out / "report.txt"]
    with open(paths[0], "w", newline="\n") as fh:
        fh.write("method,variable,me,mae,rmse\n")
        for method, rep in reports.items():
            for j, n in enumerate(rep.names):
                fh.write(f"{method},{n},{rep.me[j]:.10g},{rep.mae[j]:.10g},"
                         f"{rep.rmse[j]:.10g}\n")
    with open(paths[1], "w", newline="\n") as fh:
        fh.write("method,variable,nominal,observed\n")
        for method, rep in reports.items():
            for n, a in rep.accuracy.items():
                for p, o in a:
                    fh.write(f"{method},{n},{p:.2f},{o:.10g}\n")
    text = format_table(reports)
    for method, rep in reports.items():
        if rep.accuracy:
            text += f"{method}: max |observed - nominal| = {rep.max_calibration_error:.4f}\n"
    paths[2].write_text(text)
    return paths
