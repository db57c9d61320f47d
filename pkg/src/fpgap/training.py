"""Adam training of potential (or direct score) networks on the combined
DSM + residual objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasets import DatasetSpec, draw
from .errors import ConfigError, NumericError
from .fields import DTYPE
from .losses import (combined_loss, dsm_loss, lfp_integrand, make_collocation_batch,
                     make_dsm_batch, sm_loss)
from .potential import (Checkpoint, DirectScore, MlpConfig, PotentialScore, derivatives_eval,
                        init_params, load_checkpoint, save_checkpoint)
from .sde import SdeSpec

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("iteration", "lr", "dsm_loss", "lfp_residual", "combined_loss")


@dataclass
class TrainConfig:
    iterations: int = 20_000
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    schedule: str = "exponential"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_dsm: int = 512
    batch_colloc: int = 512
    w_r: float = 0.0
    seed: int = 0
    t_eps: float = 1e-3
    t_low: float = 0.0
    domain: tuple[float, float] = (-2.0, 2.0)
    record_every: int = 100
    divergence_threshold: float = 1e6

    def __post_init__(self):
        self.domain = tuple(float(v) for v in self.domain)
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.schedule != "exponential":
            raise ConfigError(f"unsupported learning-rate schedule {self.schedule!r}")
        if self.w_r < 0:
            raise ConfigError("w_r must be nonnegative")
        if self.batch_dsm < 1 or self.batch_colloc < 1 or self.record_every < 1:
            raise ConfigError("batch sizes and record interval must be positive")


def lr_at(cfg: TrainConfig, it: int) -> float:
    """Log-linear decay from lr_start (first step) to lr_end (last step)."""
    if not 0 <= it < cfg.iterations:
        raise ConfigError(f"iteration {it} outside [0, {cfg.iterations})")
    if cfg.iterations == 1:
        return cfg.lr_start
    frac = it / (cfg.iterations - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, theta: torch.Tensor) -> "AdamState":
        return cls(torch.zeros_like(theta), torch.zeros_like(theta), 0)


def adam_step(theta, grad, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (theta, state)."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ConfigError("Adam shapes do not match the parameter vector")
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite gradient entries: {int((~torch.isfinite(grad)).sum())}")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    theta = theta - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, step)


@dataclass
class TrainState:
    theta: torch.Tensor
    adam: AdamState
    iteration: int
    rng: np.random.Generator


@dataclass
class TrainResult:
    theta: torch.Tensor
    mlp: MlpConfig
    trace: list = field(default_factory=list)
    state: TrainState | None = None

    def final(self, key: str) -> float:
        rows = [r for r in self.trace if not math.isnan(r[key])]
        return rows[-1][key] if rows else math.nan


class TrainingDiverged(NumericError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def initial_state(mlp: MlpConfig, cfg: TrainConfig) -> TrainState:
    theta = init_params(mlp, cfg.seed)
    # parameter init and batch streams use separate seeds derived from cfg.seed
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(theta, AdamState.zeros_like(theta), 0, rng)


def to_checkpoint(state: TrainState, mlp: MlpConfig, cfg: TrainConfig, spec: SdeSpec,
                  dataset: DatasetSpec | None) -> Checkpoint:
    meta = {
        "kind": "potential" if mlp.out_dim == 1 else "score",
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "train": {**asdict(cfg), "domain": list(cfg.domain)},
        "sde": asdict(spec),
    }
    if dataset is not None:
        meta["dataset"] = {"kind": dataset.kind, "params": dataset.params, "scale": dataset.scale}
    return Checkpoint(state.theta.detach().clone(), mlp, cfg.seed, state.iteration,
                      {"adam_m": state.adam.m, "adam_v": state.adam.v}, meta)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    rng = np.random.default_rng()
    if "rng_state" not in ckpt.meta or "adam_m" not in ckpt.arrays:
        raise ConfigError("checkpoint carries no optimizer/RNG state to resume from")
    rng.bit_generator.state = ckpt.meta["rng_state"]
    adam = AdamState(ckpt.arrays["adam_m"], ckpt.arrays["adam_v"], int(ckpt.meta["adam_step"]))
    return TrainState(ckpt.theta.clone(), adam, ckpt.iteration, rng)


def train(cfg: TrainConfig, dataset: DatasetSpec, spec: SdeSpec, mlp: MlpConfig | None = None,
          state: TrainState | None = None, stop_at: int | None = None) -> TrainResult:
    """Minimize DSM + w_r * residual with Adam.

    ``state`` resumes an interrupted run; ``stop_at`` halts early (the
    schedule still spans ``cfg.iterations``).
    """
    mlp = mlp or MlpConfig.potential(spec.dim, (64, 64))
    if mlp.dim != spec.dim:
        raise ConfigError("network input dimension does not match the SDE")
    potential = mlp.out_dim == 1
    if not potential and cfg.w_r > 0:
        raise ConfigError("the residual penalty needs a potential network (out_dim = 1)")
    dataset.check_domain(cfg.domain)
    state = state or initial_state(mlp, cfg)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    trace = []
    theta = state.theta
    adam = state.adam
    rng = state.rng
    last_good = None
    for it in range(state.iteration, end):
        x0 = draw(dataset, cfg.batch_dsm, rng)
        dsm_batch = make_dsm_batch(spec, x0, rng, cfg.t_eps)
        colloc = make_collocation_batch(spec, cfg.batch_colloc, cfg.domain, rng, cfg.t_low)
        record = it % cfg.record_every == 0 or it == cfg.iterations - 1
        th = theta.detach().requires_grad_(True)
        if potential and cfg.w_r > 0:
            terms = combined_loss(th, mlp, cfg.w_r, dsm_batch, colloc, spec)
        else:
            score = PotentialScore(th, mlp) if potential else DirectScore(th, mlp)
            dsm = dsm_loss(score, dsm_batch, spec)
            terms = {"dsm": dsm, "total": dsm}
        total = terms["total"]
        val = float(total.detach())
        if not math.isfinite(val) or val > cfg.divergence_threshold:
            ckpt = last_good or to_checkpoint(TrainState(theta, adam, it, rng), mlp, cfg, spec, dataset)
            raise TrainingDiverged(f"loss {val:.4g} at iteration {it}", ckpt)
        (grad,) = torch.autograd.grad(total, th)
        if record:
            lfp = terms.get("lfp")
            if lfp is None and potential:
                with torch.no_grad():
                    d = derivatives_eval(theta, mlp, colloc.x, colloc.s)
                    lfp = (lfp_integrand(d, colloc.x, colloc.s, spec) ** 2).mean()
            trace.append({
                "iteration": it,
                "lr": lr_at(cfg, it),
                "dsm_loss": float(terms["dsm"].detach()),
                "lfp_residual": float(lfp.detach()) if lfp is not None else math.nan,
                "combined_loss": val,
            })
            log.debug("iter %d total %.4g", it, val)
        theta, adam = adam_step(theta.detach(), grad, adam, lr_at(cfg, it),
                                cfg.beta1, cfg.beta2, cfg.adam_eps)
        if it % 1000 == 0:
            last_good = to_checkpoint(TrainState(theta, adam, it + 1, rng), mlp, cfg, spec, dataset)
    final = TrainState(theta.detach(), adam, max(end, state.iteration), rng)
    return TrainResult(final.theta, mlp, trace, final)


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- held-out evaluation -------------------------------------------------------

def heldout_residual(theta, mlp: MlpConfig, spec: SdeSpec, domain=(-2.0, 2.0), n: int = 4096,
                     seed: int = 7, t_low: float = 0.0, chunk: int = 4096) -> float:
    """Log-Fokker-Planck residual on a fixed collocation set (common across runs)."""
    batch = make_collocation_batch(spec, n, domain, np.random.default_rng(seed), t_low)
    total = 0.0
    with torch.no_grad():
        for i in range(0, n, chunk):
            x, s = batch.x[i:i + chunk], batch.s[i:i + chunk]
            d = derivatives_eval(theta, mlp, x, s)
            total += float((lfp_integrand(d, x, s, spec) ** 2).sum())
    return total / n


def heldout_dsm(theta, mlp: MlpConfig, spec: SdeSpec, dataset: DatasetSpec, n: int = 16384,
                seed: int = 11, t_eps: float = 1e-3) -> float:
    rng = np.random.default_rng(seed)
    batch = make_dsm_batch(spec, draw(dataset, n, rng), rng, t_eps)
    score = PotentialScore(theta, mlp) if mlp.out_dim == 1 else DirectScore(theta, mlp)
    with torch.no_grad():
        return float(dsm_loss(score, batch, spec))


def heldout_sm(theta, mlp: MlpConfig, spec: SdeSpec, truth, data_state, n: int = 16384,
               seed: int = 13, t_eps: float = 1e-3) -> float:
    """Exact score-matching error against a Gaussian oracle's marginal score."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_eps, spec.T, n)
    # x_t = e^{-t} x0 + sigma(t) z with x0 ~ N(mu, Sigma)
    L = np.linalg.cholesky(data_state.cov)
    x0 = data_state.mean + rng.standard_normal((n, spec.dim)) @ L.T
    xt = np.exp(-t)[:, None] * x0 + np.sqrt(spec.variance(t))[:, None] * rng.standard_normal((n, spec.dim))
    score = PotentialScore(theta, mlp) if mlp.out_dim == 1 else DirectScore(theta, mlp)
    with torch.no_grad():
        return float(sm_loss(score, truth, torch.from_numpy(t), torch.from_numpy(xt), spec))


def save_training(path, result: TrainResult, cfg: TrainConfig, spec: SdeSpec,
                  dataset: DatasetSpec | None) -> Path:
    return save_checkpoint(path, to_checkpoint(result.state, result.mlp, cfg, spec, dataset))


def resume(path) -> tuple[TrainState, Checkpoint]:
    ckpt = load_checkpoint(path)
    return state_from_checkpoint(ckpt), ckpt


__all__ = [
    "AdamState", "TrainConfig", "TrainResult", "TrainState", "TrainingDiverged", "adam_step",
    "heldout_dsm", "heldout_residual", "heldout_sm", "initial_state", "lr_at", "resume",
    "save_training", "state_from_checkpoint", "to_checkpoint", "train", "write_trace", "DTYPE",
]
