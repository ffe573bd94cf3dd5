"""Command-line workflow: ``lvlmc {synth,infer,simulate,validate}``.

Every command reads one YAML config, writes into an output directory and
finishes with ``manifest.json`` listing each emitted file with its SHA-256
digest. Exit status is zero only when every stage succeeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataFormatError,
    Grid,
    SampleSet,
    read_samples,
    write_gslib_grid,
    write_samples_csv,
)
from .errors import LvlmcError, StageError
from .kriging import SearchParams
from .local_model import LocalModelSet, cholesky, infer_local_models, write_local_models
from .manifold import SolverConfig
from .simulate import PipelineConfig, run_pipeline
from .synthetic import (
    SyntheticConfig,
    drillhole_sample,
    generate_synthetic,
    holdout_split,
    validation_report,
    write_reports,
)
from .transform import alr_forward
from .variogram import Structure, VariogramModel, format_model, write_experimental_csv

log = logging.getLogger("lvlmc")


# --------------------------------------------------------------------------
# helpers

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, seed: int, timings: dict,
                   files: list) -> Path:
    """Write ``manifest.json`` listing ``files`` (paths inside ``out``)."""
    inventory = [{"path": str(Path(f).relative_to(out)), "sha256": _sha256(f),
                  "bytes": Path(f).stat().st_size} for f in sorted(files)]
    manifest = {
        "tool": "lvlmc",
        "version": __version__,
        "command": command,
        "config_sha256": cfg.digest,
        "seed": seed,
        "stage_seconds": {k: round(v, 6) for k, v in timings.items()},
        "files": inventory,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(out) -> bool:
    """True when every file listed in ``out/manifest.json`` matches its digest."""
    out = Path(out)
    m = json.loads((out / "manifest.json").read_text())
    return all(_sha256(out / f["path"]) == f["sha256"] for f in m["files"])


class _Timer:
    def __init__(self):
        self.t = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.t[name] = timer.t.get(name, 0.0) + time.perf_counter() - self.start
                return False
        return _Ctx()


def _samples(cfg: RunConfig) -> SampleSet:
    if cfg["samples"] is None:
        raise cfg.fail("no sample file configured")
    return read_samples(cfg.resolve(cfg["samples"]), cfg["columns"])


def _solver(cfg):
    s = cfg["solver"]
    return SolverConfig(tol=float(s["tol"]), step=float(s["step"]),
                        max_iter=int(s["max_iter"]), max_fiber_iter=int(s["max_fiber_iter"]))


def _search(cfg):
    s = cfg["search"]
    return SearchParams(float(s["radius"]), int(s["max_samples"]))


def _variogram(cfg):
    v = cfg["variogram"]
    if v is None:
        return None
    structs = [Structure(s.get("type", "exponential"), float(s["range"]), float(s["sill"]))
               for s in v.get("structures", [])]
    return VariogramModel(float(v.get("nugget", 0.0)), tuple(structs))


def _grid(cfg):
    g = cfg["grid"]
    return None if g is None else Grid(g["origin"], g["spacing"], g["counts"])


def _inference_samples(cfg, samples):
    if cfg["simulation"]["alr"]:
        v = alr_forward(samples.values)
        return SampleSet(samples.locations, v, tuple(f"alr{i + 1}" for i in range(v.shape[1])))
    return samples


def _k(cfg, n):
    return n if cfg["simulation"]["global_neighborhood"] else cfg["k"]


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig, out: Path, seed: int, threads: int, timer):
    s = cfg["synthetic"]
    sc = SyntheticConfig(
        extent=tuple(s["extent"]), spacing=tuple(s["spacing"]), range=float(s["range"]),
        rho_west=float(s["rho_west"]), rho_east=float(s["rho_east"]),
        mu1_base=float(s["mu1_base"]), mu1_amp=float(s["mu1_amp"]),
        mu2_base=float(s["mu2_base"]), mu2_slope=float(s["mu2_slope"]),
        sigma=float(s["sigma"]), hole_spacing=float(s["hole_spacing"]),
        sample_interval=s["sample_interval"], max_dip=float(s["max_dip"]),
        collar_jitter=float(s["collar_jitter"]), n_lines=int(s["lines"]), seed=seed)
    with timer("generate"):
        truth = generate_synthetic(sc)
    with timer("sample"):
        samples, nodes = drillhole_sample(truth, sc)
    files = []
    with timer("write"):
        g = truth.grid
        p = out / "truth.gslib"
        write_gslib_grid(p, f"synthetic truth {g.counts[0]} {g.counts[1]} {g.counts[2]}",
                         ["f1", "f2", "y1", "y2", "z1", "z2", "rho"],
                         [truth.factors[:, 0], truth.factors[:, 1], truth.gauss[:, 0],
                          truth.gauss[:, 1], truth.values[:, 0], truth.values[:, 1], truth.rho])
        files.append(p)
        write_samples_csv(out / "samples.csv", samples)
        files.append(out / "samples.csv")
        hold = float(s["holdout"])
        if hold > 0:
            tr, te = holdout_split(samples.n, hold, seed)
            write_samples_csv(out / "train.csv", samples.subset(tr))
            write_samples_csv(out / "test.csv", samples.subset(te))
            files += [out / "train.csv", out / "test.csv"]
        with open(out / "sample_truth.csv", "w", newline="\n") as fh:
            fh.write("sample,node,rho,f1,f2\n")
            for i, nd in enumerate(nodes):
                fh.write(f"{i},{nd},{truth.rho[nd]:.17g},{truth.factors[nd, 0]:.17g},"
                         f"{truth.factors[nd, 1]:.17g}\n")
        files.append(out / "sample_truth.csv")
    log.info("synthetic: %d samples", samples.n)
    return files


def cmd_infer(cfg: RunConfig, out: Path, seed: int, threads: int, timer):
    with timer("read"):
        samples = _inference_samples(cfg, _samples(cfg))
    with timer("infer"):
        lm = infer_local_models(samples, _k(cfg, samples.n), seed)
    files = [out / "local_models.csv", out / "factors.csv", out / "scatter.csv"]
    with timer("write"):
        write_local_models(files[0], lm)
        p = samples.p
        fac = SampleSet(samples.locations, lm.factor, tuple(f"f{i + 1}" for i in range(p)))
        fvar = {f"fvar{i + 1}": lm.factor_variance[:, i] for i in range(p)}
        write_samples_csv(files[1], fac, fvar)
        iu = np.triu_indices(p, 1)
        with open(files[2], "w", newline="\n") as fh:
            fh.write("x,y,z," + ",".join(f"rho_{i + 1}_{j + 1}" for i, j in zip(*iu)) + "\n")
            M = np.column_stack([samples.locations, lm.corr[:, iu[0], iu[1]]])
            np.savetxt(fh, M, fmt="%.17g", delimiter=",")
    return files


def _read_local_models(path, samples) -> LocalModelSet:
    from .local_model import read_local_models

    ids, C, y, f = read_local_models(path)
    if ids.size != samples.n or np.any(ids != np.arange(samples.n)):
        raise DataFormatError(f"{path}: local models do not match the sample file")
    L = cholesky(C)
    p = C.shape[-1]
    return LocalModelSet(ids, np.zeros((ids.size, 0), dtype=np.intp), C, L, y, f,
                         np.ones((ids.size, p)), np.zeros(ids.size))


def _read_points(path):
    S = read_samples(path)
    return S.locations, S


def cmd_simulate(cfg: RunConfig, out: Path, seed: int, threads: int, timer):
    sim = cfg["simulation"]
    with timer("read"):
        raw_samples = _samples(cfg)
        inf_samples = _inference_samples(cfg, raw_samples)
        lm = None
        if cfg["local_models"] is not None:
            lm = _read_local_models(cfg.resolve(cfg["local_models"]), inf_samples)
        grid = _grid(cfg)
        targets = None
        active = None
        if grid is None:
            if cfg["targets"] is None:
                raise cfg.fail("simulate needs a grid or a targets file")
            targets, _ = _read_points(cfg.resolve(cfg["targets"]))
        elif cfg["active"] is not None:
            active = np.loadtxt(cfg.resolve(cfg["active"]), dtype=np.int64, ndmin=1)
            mask = np.zeros(grid.size, dtype=bool)
            mask[active] = True
            active = mask
    pc = PipelineConfig(
        samples=raw_samples, grid=grid, targets=targets, active=active, k=cfg["k"],
        backtransform_k=sim["backtransform_k"], global_neighborhood=bool(sim["global_neighborhood"]),
        seed=seed, n_realizations=int(sim["realizations"]), n_lines=int(sim["lines"]),
        search=_search(cfg), solver=_solver(cfg), variogram=_variogram(cfg),
        lag_width=cfg["lags"]["width"], n_lags=int(cfg["lags"]["count"]),
        alr=bool(sim["alr"]), closure=float(sim["closure"]), threads=threads,
        mask_far=bool(sim["mask_far"]))
    res = run_pipeline(pc, local_models=lm)
    timer.t.update(res.timings)
    nodata = float(cfg["nodata"])
    names = list(raw_samples.names)
    files = []
    with timer("write"):
        keep = res.estimated
        if grid is not None:
            full = np.full((grid.size, len(names)), nodata)
            for r in res.realizations:
                vals = np.where(keep[:, None], r.values, nodata)
                full[res.target_ids] = vals
                p = out / f"real_{r.index + 1:05d}.gslib"
                write_gslib_grid(p, f"realization {r.index + 1} seed {seed}", names, full.T)
                files.append(p)
            full[res.target_ids] = np.where(keep[:, None], res.mean(), nodata)
            write_gslib_grid(out / "mean.gslib", "mean of realizations", names, full.T)
            files.append(out / "mean.gslib")
            node_ids = res.target_ids
        else:
            with open(out / "realizations.csv", "w", newline="\n") as fh:
                fh.write("realization,point,x,y,z," + ",".join(names) + "\n")
                for r in res.realizations:
                    vals = np.where(keep[:, None], r.values, nodata)
                    for t in range(vals.shape[0]):
                        fh.write(f"{r.index + 1},{t}," + ",".join(
                            f"{v:.10g}" for v in (*res.targets[t], *vals[t])) + "\n")
            mean = np.where(keep[:, None], res.mean(), nodata)
            write_samples_csv(out / "mean.csv", SampleSet(res.targets, mean, tuple(names)))
            files += [out / "realizations.csv", out / "mean.csv"]
            node_ids = np.arange(res.targets.shape[0])
        p = res.field.corr.shape[-1]
        iu = np.triu_indices(p, 1)
        with open(out / "corr_field.csv", "w", newline="\n") as fh:
            fh.write("node," + ",".join(f"rho_{i + 1}_{j + 1}" for i, j in zip(*iu))
                     + ",residual,flag\n")
            for t, nd in enumerate(node_ids):
                rho = ",".join(f"{v:.10g}" for v in res.field.corr[t][iu])
                fh.write(f"{nd},{rho},{res.field.residual[t]:.6g},{res.field.flag[t]}\n")
        files.append(out / "corr_field.csv")
        if res.experimental:
            write_experimental_csv(out / "variogram.csv", res.experimental)
            files.append(out / "variogram.csv")
        (out / "model.txt").write_text(format_model(res.model))
        files.append(out / "model.txt")
        lines = [f"samples {raw_samples.n}", f"targets {res.targets.shape[0]}",
                 f"realizations {len(res.realizations)}",
                 f"fitted factor sill before standardization {res.raw_sill:.6g}"]
        lines += [f"{k} {v}" for k, v in sorted(res.reports.items())]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        files.append(out / "summary.txt")
    return files


def _load_run(path, truth: SampleSet):
    path = Path(path)
    if path.is_dir():
        rp = path / "realizations.csv"
        with open(rp) as fh:
            header = fh.readline().strip().split(",")
            M = np.loadtxt(fh, delimiter=",", ndmin=2)
        q = len(header) - 5
        R = int(M[:, 0].max())
        m = int(M[:, 1].max()) + 1
        if m != truth.n or M.shape[0] != R * m:
            raise DataFormatError(f"{rp}: expected {truth.n} points per realization")
        M = M[np.lexsort((M[:, 1], M[:, 0]))]
        locs = M[:m, 2:5]
        reals = M[:, 5:].reshape(R, m, q)
        pred = reals.mean(axis=0)
    else:
        P = read_samples(path)
        locs, pred, reals = P.locations, P.values, None
        if P.n != truth.n:
            raise DataFormatError(f"{path}: {P.n} rows but truth has {truth.n}")
    if np.max(np.abs(locs - truth.locations)) > 1e-6:
        raise DataFormatError(f"{path}: locations do not match the truth file")
    return pred, reals


def cmd_validate(cfg: RunConfig, out: Path, seed: int, threads: int, timer):
    v = cfg["validate"]
    if v["truth"] is None or not v["runs"]:
        raise cfg.fail("validate needs 'truth' and at least one entry in 'runs'", "validate")
    with timer("read"):
        truth = read_samples(cfg.resolve(v["truth"]))
        runs = {name: _load_run(cfg.resolve(p), truth) for name, p in sorted(v["runs"].items())}
    with timer("metrics"):
        reports = {name: validation_report(pred, truth.values, truth.names, reals)
                   for name, (pred, reals) in runs.items()}
    with timer("write"):
        files = write_reports(out, reports)
    return files


COMMANDS = {
    "synth": cmd_synth,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvlmc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"lvlmc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="worker threads")
        sp.add_argument("--out", help="output directory (overrides the config)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("LVLMC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        seed = cfg["seed"] if args.seed is None else args.seed
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        threads = max(1, args.threads if args.threads is not None else int(cfg["threads"]))
        out = Path(args.out) if args.out else cfg.resolve(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        timer = _Timer()
        files = COMMANDS[args.command](cfg, out, seed, threads, timer)
        write_manifest(out, args.command, cfg, seed, timer.t, files)
    except (FileNotFoundError, ConfigError, DataFormatError) as exc:
        print(f"lvlmc: error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"lvlmc: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return 1
    except (LvlmcError, ValueError, OSError) as exc:
        print(f"lvlmc: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
