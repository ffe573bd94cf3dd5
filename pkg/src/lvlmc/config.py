"""YAML run configuration with line-numbered validation errors.

Relative paths in a config resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import yaml

__all__ = ["ConfigError", "RunConfig", "load_config", "DEFAULTS"]

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "out",
    "nodata": -999.0,
    "samples": None,
    "columns": None,
    "targets": None,
    "k": 300,
    "grid": None,
    "active": None,
    "local_models": None,
    "simulation": {
        "realizations": 1,
        "lines": 1200,
        "backtransform_k": None,
        "global_neighborhood": False,
        "alr": False,
        "closure": 100.0,
        "mask_far": True,
    },
    "search": {"radius": 100.0, "max_samples": 25},
    "solver": {"tol": 1e-8, "step": 0.1, "max_iter": 200, "max_fiber_iter": 500},
    "variogram": None,
    "lags": {"width": None, "count": 15},
    "synthetic": {
        "extent": [400.0, 400.0, 40.0],
        "spacing": [5.0, 5.0, 5.0],
        "range": 50.0,
        "rho_west": 0.9,
        "rho_east": -0.9,
        "mu1_base": 0.0,
        "mu1_amp": 1.0,
        "mu2_base": 0.5,
        "mu2_slope": 0.5,
        "sigma": 0.5,
        "hole_spacing": 25.0,
        "sample_interval": None,
        "max_dip": 30.0,
        "collar_jitter": 0.0,
        "lines": 1200,
        "holdout": 0.3,
    },
    "validate": {"truth": None, "runs": {}},
}

# keys whose value is free-form and not checked against DEFAULTS
_OPEN = {("variogram",), ("validate", "runs"), ("grid",)}


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and line."""


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=True)
    lines = {}
    for k, _ in node.value:
        lines[k.value] = k.start_mark.line + 1
    mapping["__lines__"] = lines
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _strip(d):
    if isinstance(d, dict):
        return {k: _strip(v) for k, v in d.items() if k != "__lines__"}
    if isinstance(d, list):
        return [_strip(v) for v in d]
    return d


def _merge(defaults, given, path, source):
    lines = given.get("__lines__", {}) if isinstance(given, dict) else {}
    out = dict(defaults)
    for k, v in given.items():
        if k == "__lines__":
            continue
        where = f"{source}:{lines.get(k, '?')}"
        if k not in defaults:
            raise ConfigError(f"{where}: unknown key {'.'.join(path + (k,))!r}")
        if isinstance(defaults[k], dict) and path + (k,) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: {'.'.join(path + (k,))} must be a mapping")
            out[k] = _merge(defaults[k], v, path + (k,), source)
        else:
            out[k] = _strip(v)
        out.setdefault("__lines__", {})[k] = lines.get(k)
    return out


@dataclass
class RunConfig:
    """Parsed configuration plus its origin."""

    data: dict
    path: Path
    digest: str

    def __getitem__(self, key):
        return self.data[key]

    def resolve(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.path.parent / p)

    def line(self, *keys):
        d = self.data
        for k in keys[:-1]:
            d = d[k]
        return d.get("__lines__", {}).get(keys[-1], "?")

    def fail(self, message, *keys):
        where = f"{self.path}:{self.line(*keys)}" if keys else str(self.path)
        return ConfigError(f"{where}: {message}")


def load_config(path) -> RunConfig:
    """Read and validate a YAML config against :data:`DEFAULTS`.

    Raises
    ------
    FileNotFoundError
    ConfigError
        YAML syntax errors and unknown or mistyped keys, with line numbers.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        given = yaml.load(raw.decode(), Loader=_LineLoader) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(given, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    data = _merge(DEFAULTS, given, (), str(path))
    cfg = RunConfig(data, path.resolve(), hashlib.sha256(raw).hexdigest())
    _check_types(cfg)
    return cfg


def _check_types(cfg):
    d = cfg.data
    if not isinstance(d["seed"], int) or d["seed"] < 0:
        raise cfg.fail("seed must be a non-negative integer", "seed")
    if not isinstance(d["k"], int) or d["k"] < 2:
        raise cfg.fail("k must be an integer >= 2", "k")
    sim = d["simulation"]
    if not isinstance(sim["realizations"], int) or sim["realizations"] < 1:
        raise cfg.fail("realizations must be a positive integer", "simulation", "realizations")
    if not isinstance(sim["lines"], int) or sim["lines"] < 100:
        raise cfg.fail("lines must be an integer >= 100", "simulation", "lines")
    g = d["grid"]
    if g is not None:
        for key in ("origin", "spacing", "counts"):
            if key not in g or len(g[key]) != 3:
                raise cfg.fail(f"grid.{key} must list three numbers", "grid")
