"""The datasets x w_R x seeds reproduction grid: per-cell runs, restartable,
aggregated into median tables and scatter data."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .config import Config
from .datasets import cell_masses
from .errors import ConfigError, NumericError
from .metrics import GridDistribution, grid_histogram, outside_fraction, rank_correlation, w2_squared_grid, write_pgm
from .potential import PotentialScore, load_checkpoint
from .samplers import sample_ode, sample_reverse_sde
from .training import heldout_dsm, heldout_residual, save_training, train, write_trace

log = logging.getLogger(__name__)

TABLES = {
    "w2_ode_sde": "table_w2sq_ode_sde.csv",
    "w2_ode_p0": "table_w2sq_ode_p0.csv",
    "w2_sde_p0": "table_w2sq_sde_p0.csv",
}


@dataclass
class RunReport:
    dataset: str
    w_r: float
    seed: int
    status: str = "ok"
    dsm_loss: float = math.nan
    combined_loss: float = math.nan
    heldout_residual: float = math.nan
    heldout_dsm: float = math.nan
    w2_ode_sde: float = math.nan
    w2_ode_p0: float = math.nan
    w2_sde_p0: float = math.nan
    ode_outside: float = math.nan
    sde_outside: float = math.nan
    checkpoint: str = ""
    wall_clock: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


def cell_name(dataset: str, w_r: float, seed: int) -> str:
    return f"{dataset}_w{w_r:g}_s{seed}"


def reference_grid(cfg: Config, kind: str, out: Path) -> GridDistribution:
    """Cell masses of the exact data density (cached per dataset)."""
    res = cfg.values["metrics"]["resolution"]
    path = out / "reference" / f"{kind}_p0_grid.csv"
    if path.exists():
        return GridDistribution.from_csv(path)
    ds = cfg.dataset(kind)
    grid = GridDistribution(cell_masses(ds, res, cfg.domain), cfg.domain)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(path)
    return grid


def run_cell(cfg: Config, kind: str, w_r: float, seed: int, out) -> RunReport:
    """Train, sample both ways, and measure; skipped if a finished report exists."""
    out = Path(out)
    cdir = out / "cells" / cell_name(kind, w_r, seed)
    report_path = cdir / "report.json"
    if report_path.exists():
        rep = RunReport.load(report_path)
        if rep.ok:
            return rep
    cdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rep = RunReport(kind, float(w_r), int(seed))
    try:
        spec = cfg.sde()
        mlp = cfg.mlp()
        ds = cfg.dataset(kind)
        tcfg = cfg.train(w_r=w_r, seed=seed)
        ckpt_path = cdir / "checkpoint.fpck"
        if ckpt_path.exists():  # trained earlier; sampling or metrics did not finish
            theta = load_checkpoint(ckpt_path).theta
        else:
            result = train(tcfg, ds, spec, mlp)
            write_trace(cdir / "trace.csv", result.trace)
            save_training(ckpt_path, result, tcfg, spec, ds)
            theta = result.theta
        if ckpt_path.exists():
            rep.checkpoint = str(ckpt_path.relative_to(out))
        trace = _read_trace(cdir / "trace.csv")
        if trace:
            rep.dsm_loss = float(trace[-1]["dsm_loss"])
            rep.combined_loss = float(trace[-1]["combined_loss"])
        exp = cfg.values["experiment"]
        rep.heldout_residual = heldout_residual(theta, mlp, spec, cfg.domain, n=exp["heldout_colloc"])
        rep.heldout_dsm = heldout_dsm(theta, mlp, spec, ds, n=exp["heldout_dsm"], t_eps=tcfg.t_eps)

        score = PotentialScore(theta, mlp)
        scfg = cfg.sampler(seed=seed)
        res = cfg.values["metrics"]["resolution"]
        grids, problems = {}, []
        for name, fn in (("ode", sample_ode), ("sde", sample_reverse_sde)):
            gpath = cdir / f"{name}_grid.csv"
            fpath = cdir / f"{name}_failure.json"
            if gpath.exists():
                grids[name] = GridDistribution.from_csv(gpath)
                setattr(rep, f"{name}_outside", grids[name].outside_fraction)
                continue
            if fpath.exists():  # deterministic, so a recorded failure is final
                info = json.loads(fpath.read_text())
                setattr(rep, f"{name}_outside", info["outside"])
                problems.append(f"{name}: {info['error']}")
                continue
            try:
                batch = fn(score, spec, scfg)
                setattr(rep, f"{name}_outside", outside_fraction(batch.points, cfg.domain))
                grids[name] = grid_histogram(batch, res, cfg.domain)
            except NumericError as exc:
                # one sampler blowing up still leaves the other one's metrics
                problems.append(f"{name}: {exc}")
                fpath.write_text(json.dumps({"error": str(exc), "outside": getattr(rep, f"{name}_outside")}))
                continue
            grids[name].to_csv(gpath)
            write_pgm(cdir / f"{name}_grid.pgm", grids[name].mass)
        p0 = reference_grid(cfg, kind, out)
        method = cfg.values["metrics"]["w2_method"]
        if "ode" in grids and "sde" in grids:
            rep.w2_ode_sde = w2_squared_grid(grids["ode"], grids["sde"], method)
        if "ode" in grids:
            rep.w2_ode_p0 = w2_squared_grid(grids["ode"], p0, method)
        if "sde" in grids:
            rep.w2_sde_p0 = w2_squared_grid(grids["sde"], p0, method)
        if problems:
            raise NumericError("; ".join(problems))
        bad = [k for k, v in asdict(rep).items()
               if isinstance(v, float) and k != "wall_clock" and not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite report fields: {bad}")
    except (NumericError, ArithmeticError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        rep.status = "failed"
        rep.error = f"{type(exc).__name__}: {exc}"
        log.error("cell %s failed: %s", cdir.name, rep.error)
        log.debug("%s", traceback.format_exc())
    rep.wall_clock = time.perf_counter() - start
    rep.save(report_path)
    return rep


def _read_trace(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cell_job(args):
    values, preset, source, kind, w_r, seed, out = args
    torch.set_num_threads(1)
    return run_cell(Config(values, preset, source), kind, w_r, seed, out)


def run_grid(cfg: Config, out, workers: int | None = None) -> list[RunReport]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.values["experiment"]
    if not exp["datasets"] or not exp["w_r_grid"] or not exp["seeds"]:
        raise ConfigError("experiment grid needs at least one dataset, one w_r and one seed")
    for kind in exp["datasets"]:
        cfg.dataset(kind).check_domain(cfg.domain)
    cells = [(k, w, s) for k in exp["datasets"] for w in exp["w_r_grid"] for s in exp["seeds"]]
    workers = workers or exp["workers"]
    if workers <= 1:
        reports = [run_cell(cfg, k, w, s, out) for k, w, s in cells]
    else:
        jobs = [(cfg.values, cfg.preset, cfg.source, k, w, s, str(out)) for k, w, s in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_cell_job, jobs))
    aggregate(cfg, reports, out)
    return reports


# -- aggregation -------------------------------------------------------------

def _median(vals):
    vals = [v for v in vals if math.isfinite(v)]
    return statistics.median(vals) if vals else math.nan


def cell_medians(reports: list[RunReport], field: str) -> dict:
    """Seed median per (dataset, w_R); failed runs contribute whatever they measured."""
    groups = {}
    for r in reports:
        groups.setdefault((r.dataset, r.w_r), []).append(getattr(r, field))
    return {k: _median(v) for k, v in groups.items()}


def normalized_dsm(reports: list[RunReport]) -> dict:
    """Held-out DSM loss divided by the matching (dataset, seed) w_R = 0 run."""
    base = {(r.dataset, r.seed): r.heldout_dsm for r in reports
            if r.w_r == 0 and math.isfinite(r.heldout_dsm)}
    return {(r.dataset, r.w_r, r.seed): r.heldout_dsm / base[(r.dataset, r.seed)]
            for r in reports if (r.dataset, r.seed) in base and math.isfinite(r.heldout_dsm)}


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(v) -> str:
    return "failed" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def aggregate(cfg: Config, reports: list[RunReport], out) -> dict:
    out = Path(out)
    exp = cfg.values["experiment"]
    kinds, weights = list(exp["datasets"]), list(exp["w_r_grid"])
    for field, fname in TABLES.items():
        med = cell_medians(reports, field)
        lines = ["w_r," + ",".join(kinds)]
        for w in weights:
            lines.append(f"{w:g}," + ",".join(_fmt(med.get((k, float(w)), math.nan)) for k in kinds))
        _atomic_write(out / fname, "\n".join(lines) + "\n")

    ordered = sorted(reports, key=lambda r: (kinds.index(r.dataset), r.w_r, r.seed))
    norm = normalized_dsm(reports)
    rows = ["dataset,w_r,seed,heldout_residual,w2_ode_sde"]
    rows += [f"{r.dataset},{r.w_r:g},{r.seed},{r.heldout_residual!r},{math.sqrt(r.w2_ode_sde)!r}"
             for r in ordered if math.isfinite(r.w2_ode_sde) and math.isfinite(r.heldout_residual)]
    _atomic_write(out / "scatter_residual_vs_w2.csv", "\n".join(rows) + "\n")
    rows = ["dataset,w_r,seed,heldout_residual,dsm_normalized"]
    rows += [f"{r.dataset},{r.w_r:g},{r.seed},{r.heldout_residual!r},{norm[(r.dataset, r.w_r, r.seed)]!r}"
             for r in ordered if (r.dataset, r.w_r, r.seed) in norm and math.isfinite(r.heldout_residual)]
    _atomic_write(out / "scatter_residual_vs_dsm.csv", "\n".join(rows) + "\n")

    failed = [cell_name(r.dataset, r.w_r, r.seed) for r in reports if not r.ok]
    cors = {k: (v if math.isfinite(v) else None) for k, v in correlations(reports).items()}
    summary = {"cells": len(reports), "failed": failed, "correlations": cors}
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    try:
        from .plotting import render_report

        render_report(out, reports, kinds, weights)
    except ImportError:  # plotting is optional at runtime
        log.warning("matplotlib unavailable; figures skipped")
    return summary


def correlations(reports: list[RunReport]) -> dict:
    """Spearman correlations over seed-median (dataset, w_R) points."""
    res = cell_medians(reports, "heldout_residual")
    w2 = cell_medians(reports, "w2_ode_sde")
    norm = normalized_dsm(reports)
    dsm = {}
    for (k, w, _), v in norm.items():
        dsm.setdefault((k, w), []).append(v)
    dsm = {key: _median(v) for key, v in dsm.items()}
    out = {}
    keys = [k for k in res if k in w2]
    if len(keys) >= 3:
        out["residual_vs_w2_ode_sde"] = rank_correlation([(res[k], math.sqrt(w2[k])) for k in keys])
    keys = [k for k in res if k in dsm]
    if len(keys) >= 3:
        out["residual_vs_dsm_normalized"] = rank_correlation([(res[k], dsm[k]) for k in keys])
    return out


def load_reports(out) -> list[RunReport]:
    return [RunReport.load(p) for p in sorted(Path(out).glob("cells/*/report.json"))]
