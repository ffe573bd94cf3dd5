"""Sample sets, regular grids, and their plain-text file formats.

Two sample formats are read: CSV with an ``x,y,z,v1..vp`` header, and
GSLIB GeoEAS (title line, variable count, one name per line, then
whitespace-separated rows). Grids are written as GeoEAS with ``x``
cycling fastest, then ``y``, then ``z``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvariantError

__all__ = [
    "SampleSet",
    "Grid",
    "read_samples",
    "write_samples_csv",
    "write_gslib_grid",
    "read_gslib_grid",
    "DataFormatError",
]


class DataFormatError(ValueError):
    """A data file could not be parsed; the message names file and line."""


@dataclass(frozen=True)
class SampleSet:
    """``n`` located records with ``p`` attribute values.

    Attributes
    ----------
    locations : ndarray, shape (n, 3)
        Coordinates in metres.
    values : ndarray, shape (n, p)
    names : tuple of str
        Attribute names, length ``p``.
    """

    locations: np.ndarray
    values: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.locations, dtype=float)
        V = np.asarray(self.values, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        if X.ndim != 2 or X.shape[1] != 3 or V.shape[0] != X.shape[0]:
            raise DimensionError(f"locations {X.shape} and values {V.shape} disagree")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V))):
            raise InvariantError("samples contain non-finite entries")
        names = tuple(self.names) or tuple(f"v{i + 1}" for i in range(V.shape[1]))
        if len(names) != V.shape[1]:
            raise DimensionError("one name per attribute column is required")
        object.__setattr__(self, "locations", X)
        object.__setattr__(self, "values", V)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def subset(self, ids) -> "SampleSet":
        ids = np.asarray(ids)
        return SampleSet(self.locations[ids], self.values[ids], self.names)


@dataclass(frozen=True)
class Grid:
    """Regular 3D lattice; ``origin`` is the centre of the first node."""

    origin: tuple
    spacing: tuple
    counts: tuple

    def __post_init__(self):
        o = tuple(float(v) for v in self.origin)
        s = tuple(float(v) for v in self.spacing)
        c = tuple(int(v) for v in self.counts)
        if len(o) != 3 or len(s) != 3 or len(c) != 3:
            raise DimensionError("grid needs three origins, spacings and counts")
        if min(s) <= 0 or min(c) <= 0:
            raise InvariantError("grid spacing and counts must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "spacing", s)
        object.__setattr__(self, "counts", c)

    @property
    def size(self) -> int:
        nx, ny, nz = self.counts
        return nx * ny * nz

    def axes(self):
        return [o + s * np.arange(c) for o, s, c in zip(self.origin, self.spacing, self.counts)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, ``(size, 3)``, x fastest."""
        x, y, z = self.axes()
        Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def flat_index(self, i, j, k):
        nx, ny, _ = self.counts
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def nearest_index(self, points) -> np.ndarray:
        """Flat index of the node nearest each point (clamped to the grid)."""
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        ijk = [
            np.clip(np.rint((P[:, a] - self.origin[a]) / self.spacing[a]), 0, self.counts[a] - 1)
            .astype(np.intp)
            for a in range(3)
        ]
        return self.flat_index(*ijk)


def _float_rows(path, lines, start):
    rows = []
    for ln, line in enumerate(lines, start=start):
        if not line.strip():
            continue
        try:
            rows.append([float(t) for t in line.replace(",", " ").split()])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{ln}: {exc}") from None
        if len(rows[-1]) != len(rows[0]):
            raise DataFormatError(f"{path}:{ln}: expected {len(rows[0])} fields")
    return np.array(rows, dtype=float)


def read_samples(path, columns=None) -> SampleSet:
    """Read samples from CSV or GeoEAS.

    Parameters
    ----------
    path : path-like
    columns : sequence of str, optional
        Attribute columns to keep (default: every column after x, y, z).

    Raises
    ------
    FileNotFoundError
        Missing file.
    DataFormatError
        Malformed content; the message carries ``path:line``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sample file not found: {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 2:
        raise DataFormatError(f"{path}: too few lines")
    if lines[1].strip().isdigit():
        nvar = int(lines[1])
        names = [ln.strip() for ln in lines[2:2 + nvar]]
        body = _float_rows(path, lines[2 + nvar:], 3 + nvar)
    else:
        names = [h.strip() for h in next(csv.reader([lines[0]]))]
        body = _float_rows(path, lines[1:], 2)
    if body.size == 0:
        raise DataFormatError(f"{path}: no data rows")
    if body.shape[1] != len(names):
        raise DataFormatError(f"{path}: {len(names)} names but {body.shape[1]} columns")
    lower = [n.lower() for n in names]
    try:
        xyz = [lower.index(c) for c in ("x", "y", "z")]
    except ValueError:
        xyz = [0, 1, 2]
    keep = [i for i in range(len(names)) if i not in xyz]
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise DataFormatError(f"{path}: columns not found: {missing}")
        keep = [names.index(c) for c in columns]
    return SampleSet(body[:, xyz], body[:, keep], tuple(names[i] for i in keep))


def write_samples_csv(path, samples: SampleSet, extra: dict | None = None) -> None:
    """Write ``x,y,z,<names>[,extra...]`` with 17 significant digits."""
    cols = [samples.locations, samples.values]
    header = ["x", "y", "z", *samples.names]
    for name, col in (extra or {}).items():
        col = np.asarray(col, dtype=float).reshape(samples.n, -1)
        header += [name] if col.shape[1] == 1 else [f"{name}{i + 1}" for i in range(col.shape[1])]
        cols.append(col)
    M = np.hstack(cols)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, M, fmt="%.17g", delimiter=",")


def write_gslib_grid(path, title: str, names, columns, fmt: str = "%.10g") -> None:
    """Write grid columns (each of length ``grid.size``, x fastest) as GeoEAS."""
    M = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{title}\n{len(names)}\n")
        for n in names:
            fh.write(f"{n}\n")
        np.savetxt(fh, M, fmt=fmt, delimiter=" ")


def read_gslib_grid(path):
    """Read a GeoEAS file written by :func:`write_gslib_grid`.

    Returns ``(title, names, data)`` with ``data`` of shape ``(rows, nvar)``.
    """
    lines = Path(path).read_text().splitlines()
    nvar = int(lines[1])
    names = [ln.strip() for ln in lines[2:2 + nvar]]
    return lines[0], names, _float_rows(path, lines[2 + nvar:], 3 + nvar).reshape(-1, nvar)
