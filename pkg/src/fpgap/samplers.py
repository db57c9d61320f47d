"""Euler-Maruyama / Euler samplers for the reverse-time dynamics and the
probability-flow log-likelihood."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .fields import DTYPE, ScoreField, as_points
from .sde import SdeSpec, ode_drift, ode_drift_divergence, reverse_drift


@dataclass
class SamplerConfig:
    n: int = 100_000
    steps: int = 1000
    seed: int = 0
    chunk: int = 50_000

    def __post_init__(self):
        if self.n < 1 or self.steps < 1:
            raise ConfigError("sampler needs n >= 1 and steps >= 1")


@dataclass
class SampleBatch:
    points: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ConfigError("sample batch must be an (n, d) array")

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        for k in sorted(self.meta):
            buf.write(f"# {k}={self.meta[k]}\n")
        d = self.points.shape[1]
        buf.write(",".join(f"x{i + 1}" for i in range(d)) + "\n")
        np.savetxt(buf, self.points, delimiter=",", fmt="%.17g")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "SampleBatch":
        meta, lines = {}, Path(path).read_text().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line and not line[0].isalpha():
                body.append(line)
        pts = np.loadtxt(body, delimiter=",", ndmin=2) if body else np.zeros((0, 2))
        return cls(pts, meta)


def prior_sample(spec: SdeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return math.sqrt(spec.stationary_variance) * rng.standard_normal((n, spec.dim))


def prior_log_density(spec: SdeSpec, x: torch.Tensor) -> torch.Tensor:
    var = spec.stationary_variance
    d = x.shape[1]
    return -0.5 * (x**2).sum(1) / var - 0.5 * d * math.log(2 * math.pi * var)


def _check(x: torch.Tensor, step: int, kind: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"{kind} sampler produced non-finite states at step {step}")


def sample_reverse_sde(score: ScoreField, spec: SdeSpec, cfg: SamplerConfig,
                       init=None, noise: bool = True) -> SampleBatch:
    """Euler-Maruyama on the reversed-time approximate SDE, from the prior to t = 0.

    ``init`` overrides the prior draw; ``noise=False`` drops the Brownian
    increment (used to check single steps by hand).
    """
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(init, dtype=np.float64) if init is not None else prior_sample(spec, cfg.n, rng)
    x = torch.as_tensor(x0, dtype=DTYPE).reshape(-1, spec.dim).clone()
    dtau = spec.T / cfg.steps
    sq = math.sqrt(dtau)
    with torch.no_grad():
        for k in range(cfg.steps):
            t = spec.T - k * dtau
            drift = _chunked(lambda xc: reverse_drift(spec, score, xc, t), x, cfg.chunk)
            x = x - drift * dtau
            if noise:
                xi = torch.from_numpy(rng.standard_normal(x.shape))
                x = x + spec.g * sq * xi
            _check(x, k, "SDE")
    return SampleBatch(x.numpy(), {"sampler": "sde", "seed": cfg.seed, "steps": cfg.steps})


def sample_ode(score: ScoreField, spec: SdeSpec, cfg: SamplerConfig, init=None) -> SampleBatch:
    """Euler on the reversed-time probability flow ODE, from the prior to t = 0."""
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(init, dtype=np.float64) if init is not None else prior_sample(spec, cfg.n, rng)
    x = torch.as_tensor(x0, dtype=DTYPE).reshape(-1, spec.dim).clone()
    dtau = spec.T / cfg.steps
    with torch.no_grad():
        for k in range(cfg.steps):
            t = spec.T - k * dtau
            x = x - _chunked(lambda xc: ode_drift(spec, score, xc, t), x, cfg.chunk) * dtau
            _check(x, k, "ODE")
    return SampleBatch(x.numpy(), {"sampler": "ode", "seed": cfg.seed, "steps": cfg.steps})


def _chunked(fn, x: torch.Tensor, chunk: int) -> torch.Tensor:
    if x.shape[0] <= chunk:
        return fn(x)
    return torch.cat([fn(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)])


def ode_loglik(score: ScoreField, spec: SdeSpec, x, steps: int = 1000) -> torch.Tensor:
    """log p_ODE(x, 0) by integrating the flow from t = 0 to T.

    log p(x_0, 0) = log pi(x_T) + int_0^T div f_ODE(x_t, t) dt, with the same
    explicit Euler grid as the samplers.
    """
    x = as_points(x).clone()
    dt = spec.T / steps
    acc = torch.zeros(x.shape[0], dtype=DTYPE)
    with torch.no_grad():
        for k in range(steps):
            t = k * dt
            div = ode_drift_divergence(spec, score, x, t)
            v = ode_drift(spec, score, x, t)
            acc = acc + div * dt
            x = x + v * dt
            _check(x, k, "log-likelihood")
    return prior_log_density(spec, x) + acc
