"""Command-line entry point: train, sample, diagnose, reproduce, metrics.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 partial grid failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import load_config, write_config
from .errors import ConfigError, DomainError, NumericError

log = logging.getLogger("fpgap")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (section.key or a unique bare key); repeatable")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel grid cells")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpgap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)

    p = sub.add_parser("sample", help="sample a trained model with the ODE or SDE sampler")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--kind", choices=("ode", "sde"), default="ode")
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("diagnose", help="residuals, curl, or likelihood of a model or builtin oracle")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", choices=("stationary", "gaussian"))
    p.add_argument("--which", choices=("lfp", "sfp", "fp", "curl", "loglik"), required=True)
    p.add_argument("--t", type=float, default=0.0, help="evaluation time for curl")
    p.add_argument("--x", action="append", default=[], metavar="X1,X2", help="likelihood point; repeatable")
    p.add_argument("--points", type=int, default=1000, help="collocation points for residuals")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("reproduce", help="run the datasets x w_R x seeds grid and emit tables")
    _common(p)

    p = sub.add_parser("metrics", help="W2 between two grid or sample CSV files")
    _common(p)
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.preset)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


# -- subcommands ---------------------------------------------------------------

def cmd_train(cfg, args) -> int:
    from .experiment import RunReport
    from .training import TrainingDiverged, heldout_dsm, heldout_residual, save_training, train, write_trace
    from .potential import save_checkpoint

    kind = cfg.get("run", "dataset")
    spec, mlp, ds, tcfg = cfg.sde(), cfg.mlp(), cfg.dataset(kind), cfg.train()
    out = args.out
    write_config(cfg, out / "config_used.ini")
    start = time.perf_counter()
    try:
        result = train(tcfg, ds, spec, mlp)
    except TrainingDiverged as exc:
        save_checkpoint(out / "last_good.fpck", exc.checkpoint)
        raise
    write_trace(out / "trace.csv", result.trace)
    ckpt = save_training(out / "checkpoint.fpck", result, tcfg, spec, ds)
    rep = RunReport(kind, tcfg.w_r, tcfg.seed, checkpoint=ckpt.name)
    if result.trace:
        rep.dsm_loss = result.trace[-1]["dsm_loss"]
        rep.combined_loss = result.trace[-1]["combined_loss"]
    exp = cfg.values["experiment"]
    if mlp.out_dim == 1:
        rep.heldout_residual = heldout_residual(result.theta, mlp, spec, cfg.domain, n=exp["heldout_colloc"])
    rep.heldout_dsm = heldout_dsm(result.theta, mlp, spec, ds, n=exp["heldout_dsm"], t_eps=tcfg.t_eps)
    rep.wall_clock = time.perf_counter() - start
    rep.save(out / "report.json")
    log.info("trained %s w_r=%g seed=%d in %.1fs", kind, tcfg.w_r, tcfg.seed, rep.wall_clock)
    return EXIT_OK


def _load_model(cfg, args):
    from .potential import load_checkpoint, make_score

    ckpt = load_checkpoint(args.checkpoint)
    if args.config is not None or any(o.split("=")[0].strip() in ("hidden", "model.hidden", "model.kind")
                                      for o in args.overrides):
        want = cfg.mlp()
        if want != ckpt.cfg:
            raise ConfigError(f"checkpoint architecture {ckpt.cfg} does not match the configured {want}")
    return ckpt, make_score(ckpt.theta, ckpt.cfg)


def cmd_sample(cfg, args) -> int:
    from .metrics import grid_histogram, write_pgm
    from .plotting import plot_field
    from .samplers import SamplerConfig, sample_ode, sample_reverse_sde

    ckpt, score = _load_model(cfg, args)
    s = cfg.values["sampler"]
    scfg = SamplerConfig(n=args.n or s["n"], steps=args.steps or s["steps"], seed=args.seed, chunk=s["chunk"])
    fn = sample_ode if args.kind == "ode" else sample_reverse_sde
    batch = fn(score, cfg.sde(), scfg)
    batch.meta["checkpoint"] = args.checkpoint.name
    batch.to_csv(args.out / f"samples_{args.kind}.csv")
    grid = grid_histogram(batch, cfg.values["metrics"]["resolution"], cfg.domain)
    grid.to_csv(args.out / f"grid_{args.kind}.csv")
    write_pgm(args.out / f"grid_{args.kind}.pgm", grid.mass)
    plot_field(grid.mass, args.out / f"grid_{args.kind}.png", cfg.domain, f"{args.kind.upper()} samples")
    log.info("wrote %d samples (%g%% clipped)", len(batch), 100 * grid.outside_fraction)
    return EXIT_OK


def _oracle(name: str, spec):
    from .datasets import DatasetSpec, gaussian_state
    from .sde import GaussianState, analytic_potential

    if name == "stationary":
        gs = GaussianState(np.zeros(spec.dim), spec.stationary_variance * np.eye(spec.dim), 0.0)
    else:
        if spec.dim != 2:
            raise ConfigError("the gaussian oracle is two-dimensional")
        gs = gaussian_state(DatasetSpec("gaussian_oracle"))
    return analytic_potential(gs, spec)


def cmd_diagnose(cfg, args) -> int:
    from .losses import PotentialDensity, fp_residual, lfp_residual, make_collocation_batch, sfp_residual
    from .metrics import curl_field, write_pgm
    from .samplers import ode_loglik

    spec = cfg.sde()
    if args.oracle:
        potential = _oracle(args.oracle, spec)
        score = potential.score()
        label = f"oracle:{args.oracle}"
    else:
        ckpt, score = _load_model(cfg, args)
        potential = score if ckpt.cfg.out_dim == 1 else None
        label = str(args.checkpoint)
    rows = []
    if args.which in ("lfp", "fp", "sfp"):
        if args.which != "sfp" and potential is None:
            raise ConfigError(f"{args.which} needs a potential model; direct score networks support sfp and curl")
        batch = make_collocation_batch(spec, args.points, cfg.domain, np.random.default_rng(args.seed))
        if args.which == "lfp":
            val = lfp_residual(potential, batch, spec)
        elif args.which == "fp":
            val = fp_residual(PotentialDensity(potential), batch, spec)
        else:
            val = sfp_residual(score, batch, spec)
        rows.append((args.which, float(val)))
    elif args.which == "curl":
        if spec.dim != 2:
            raise ConfigError("curl needs d = 2")
        field = curl_field(score, args.t, cfg.values["metrics"]["resolution"], cfg.domain)
        field.to_csv(args.out / "curl_grid.csv")
        write_pgm(args.out / "curl_grid.pgm", np.abs(field.values))
        from .plotting import plot_field

        plot_field(field.values, args.out / "curl_grid.png", cfg.domain, f"curl at t = {args.t:g}", "coolwarm")
        a = np.abs(field.values)
        rows += [("curl_max_abs", float(a.max())), ("curl_median_abs", float(np.median(a)))]
    else:
        pts = [[float(v) for v in s.split(",")] for s in args.x] or [[0.0] * spec.dim]
        x = torch.tensor(pts, dtype=torch.float64)
        if x.shape[1] != spec.dim:
            raise ConfigError(f"likelihood points need {spec.dim} coordinates")
        ll = ode_loglik(score, spec, x, steps=cfg.values["sampler"]["steps"])
        rows += [(f"loglik[{','.join(f'{v:g}' for v in p)}]", float(v)) for p, v in zip(pts, ll)]
    with open(args.out / f"diagnose_{args.which}.csv", "w") as fh:
        fh.write(f"# model={label}\nquantity,value\n")
        for k, v in rows:
            fh.write(f'"{k}",{v!r}\n')
    for k, v in rows:
        print(f"{k}\t{v:.10g}")
    return EXIT_OK


def cmd_reproduce(cfg, args) -> int:
    from .experiment import run_grid

    write_config(cfg, args.out / "config_used.ini")
    reports = run_grid(cfg, args.out, args.workers)
    failed = [r for r in reports if not r.ok]
    log.info("%d cells, %d failed", len(reports), len(failed))
    if failed:
        return EXIT_PARTIAL
    return EXIT_OK


def _read_grid(path: Path, cfg):
    from .metrics import GridDistribution, grid_histogram
    from .samplers import SampleBatch

    head = path.read_text().split("\n", 2)[:2]
    if any(line.startswith("# domain=") for line in head):
        return GridDistribution.from_csv(path)
    return grid_histogram(SampleBatch.from_csv(path), cfg.values["metrics"]["resolution"], cfg.domain)


def cmd_metrics(cfg, args) -> int:
    from .metrics import w2_squared_grid

    P, Q = _read_grid(args.first, cfg), _read_grid(args.second, cfg)
    w2sq = w2_squared_grid(P, Q, cfg.values["metrics"]["w2_method"])
    res = {"w2": math.sqrt(w2sq), "w2_squared": w2sq}
    with open(args.out / "metrics.csv", "w") as fh:
        fh.write(f"# first={args.first}\n# second={args.second}\nquantity,value\n")
        for k, v in res.items():
            fh.write(f"{k},{v!r}\n")
    print(json.dumps(res))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "reproduce": cmd_reproduce,
    "metrics": cmd_metrics,
}

if __name__ == "__main__":
    run()
