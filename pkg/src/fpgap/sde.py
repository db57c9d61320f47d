"""Forward diffusion process, its closed-form Gaussian kernels and the
approximate reverse-time / probability-flow drifts built from a score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DomainError
from .fields import DTYPE, PointDerivatives, ScoreField, as_points, as_times

SUPPORTED_KINDS = ("ou",)


@dataclass(frozen=True)
class SdeSpec:
    """dx = f(x, t) dt + g(t) dW on [0, T] in R^d.

    Only the Ornstein-Uhlenbeck process f(x, t) = -x with a constant
    diffusion coefficient ships; ``g`` defaults to 1.
    """

    kind: str = "ou"
    dim: int = 2
    T: float = 10.0
    g: float = 1.0

    def __post_init__(self):
        if self.kind not in SUPPORTED_KINDS:
            raise ConfigError(f"unsupported SDE kind {self.kind!r}; expected one of {SUPPORTED_KINDS}")
        if self.dim < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.dim}")
        if not self.T > 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if not self.g > 0:
            raise ConfigError(f"diffusion coefficient must be positive, got {self.g}")

    def diffusion(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        return torch.full_like(t, self.g)

    def variance(self, t):
        """Kernel variance sigma^2(t) = g^2 (1 - exp(-2t)) / 2 (per coordinate)."""
        if isinstance(t, torch.Tensor):
            return self.g**2 * (-torch.expm1(-2.0 * t)) / 2.0
        if isinstance(t, np.ndarray):
            return self.g**2 * (-np.expm1(-2.0 * t)) / 2.0
        return self.g**2 * (-math.expm1(-2.0 * t)) / 2.0

    @property
    def stationary_variance(self) -> float:
        return self.g**2 / 2.0

    def prior(self) -> "GaussianState":
        d = self.dim
        return GaussianState(np.zeros(d), self.stationary_variance * np.eye(d), 0.0)

    def check_time(self, t: float) -> None:
        if t < 0 or t > self.T:
            raise DomainError(f"time {t} outside [0, {self.T}]")


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray
    time: float = 0.0
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ConfigError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-12:
            raise ConfigError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-12:
            raise ConfigError("covariance is not positive semi-definite")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x - self.mean
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise DomainError("singular covariance has no density")
        sol = np.linalg.solve(self.cov, diff.T).T
        return -0.5 * (np.sum(diff * sol, axis=1) + logdet + self.dim * math.log(2 * math.pi))


# -- drift and its derivatives ---------------------------------------------

def drift(spec: SdeSpec, x, t=0.0) -> torch.Tensor:
    return -as_points(x)


def drift_divergence(spec: SdeSpec) -> float:
    return -float(spec.dim)


def drift_jacobian(spec: SdeSpec) -> torch.Tensor:
    return -torch.eye(spec.dim, dtype=DTYPE)


# -- closed-form Gaussian evolution ------------------------------------------

def perturbation_kernel(spec: SdeSpec, x0, t: float) -> GaussianState:
    """Transition law p(x_t, t | x_0, 0) = N(x0 e^{-t}, sigma^2(t) I)."""
    spec.check_time(t)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    return GaussianState(x0 * math.exp(-t), spec.variance(t) * np.eye(x0.shape[0]), t)


def kernel_score(spec: SdeSpec, x_t, x0, t) -> torch.Tensor:
    """Exact grad log p(x_t, t | x0, 0), batched over rows."""
    x_t = as_points(x_t)
    x0 = as_points(x0)
    t = as_times(t, x_t.shape[0])
    if (t <= 0).any():
        raise DomainError("perturbation kernel is degenerate at t <= 0")
    var = spec.variance(t)[:, None]
    return (x0 * torch.exp(-t)[:, None] - x_t) / var


def gaussian_evolution(spec: SdeSpec, p0: GaussianState, t: float) -> GaussianState:
    """Marginal of the forward process at time t for Gaussian data p0."""
    if p0.time != 0:
        raise DomainError("gaussian_evolution expects an initial state at time 0")
    spec.check_time(t)
    decay = math.exp(-t)
    cov = p0.cov * decay**2 + spec.variance(t) * np.eye(p0.dim)
    return GaussianState(p0.mean * decay, 0.5 * (cov + cov.T), t)


def _marginal_moments(spec: SdeSpec, p0: GaussianState, t: torch.Tensor):
    """Batched mean (n, d), covariance (n, d, d) and its time derivative."""
    mu0 = torch.as_tensor(p0.mean, dtype=DTYPE)
    cov0 = torch.as_tensor(p0.cov, dtype=DTYPE)
    eye = torch.eye(p0.dim, dtype=DTYPE)
    decay = torch.exp(-t)
    mean = decay[:, None] * mu0
    cov = (decay**2)[:, None, None] * cov0 + spec.variance(t)[:, None, None] * eye
    dcov = -2.0 * cov + spec.g**2 * eye
    return mean, cov, dcov


class GaussianScore(ScoreField):
    """Exact marginal score of the forward process started from Gaussian p0."""

    def __init__(self, spec: SdeSpec, p0: GaussianState):
        self.spec = spec
        self.p0 = p0
        self.dim = p0.dim

    def precision(self, t: torch.Tensor) -> torch.Tensor:
        _, cov, _ = _marginal_moments(self.spec, self.p0, t)
        return torch.linalg.inv(cov)

    def __call__(self, x, t):
        x = as_points(x)
        t = as_times(t, x.shape[0])
        mean, cov, _ = _marginal_moments(self.spec, self.p0, t)
        # explicit inverse: batched solve loses its forward-mode tangents under vmap
        return -torch.einsum("nij,nj->ni", torch.linalg.inv(cov), x - mean)

    def jacobian(self, x, t):
        x = as_points(x)
        return -self.precision(as_times(t, x.shape[0]))

    def divergence(self, x, t):
        return torch.diagonal(self.jacobian(x, t), dim1=-2, dim2=-1).sum(-1)


class GaussianPotential:
    """Exact log-density u = log p of a Gaussian and its derivatives.

    With an SDE attached, ``derivatives(x, t)`` evaluates the evolved
    marginal at time t (time derivative included); without one the state is
    static and ``dt`` is zero.
    """

    def __init__(self, gs: GaussianState, spec: SdeSpec | None = None):
        if np.linalg.eigvalsh(gs.cov).min() <= 0:
            raise DomainError("analytic potential needs a positive definite covariance")
        if spec is not None and gs.time != 0:
            raise DomainError("evolving potential needs an initial state at time 0")
        self.gs = gs
        self.spec = spec
        self.dim = gs.dim

    def derivatives(self, x, t=0.0) -> PointDerivatives:
        x = as_points(x)
        n, d = x.shape
        t = as_times(t, n)
        if self.spec is None:
            mean = torch.as_tensor(self.gs.mean, dtype=DTYPE).expand(n, d)
            cov = torch.as_tensor(self.gs.cov, dtype=DTYPE).expand(n, d, d)
            dmean = torch.zeros(n, d, dtype=DTYPE)
            dcov = torch.zeros(n, d, d, dtype=DTYPE)
        else:
            mean, cov, dcov = _marginal_moments(self.spec, self.gs, t)
            dmean = -mean
        prec = torch.linalg.inv(cov)
        diff = x - mean
        pd = torch.einsum("nij,nj->ni", prec, diff)
        logdet = torch.logdet(cov)
        value = -0.5 * ((diff * pd).sum(-1) + logdet + d * math.log(2 * math.pi))
        grad = -pd
        lap = -torch.diagonal(prec, dim1=-2, dim2=-1).sum(-1)
        # d/dt of -1/2 [diff' P diff + logdet] with dP = -P dcov P
        dt = (
            (pd * dmean).sum(-1)
            + 0.5 * torch.einsum("ni,nij,nj->n", pd, dcov, pd)
            - 0.5 * torch.einsum("nij,nji->n", prec, dcov)
        )
        return PointDerivatives(value, grad, lap, dt)

    def score(self) -> ScoreField:
        if self.spec is None:
            return _StaticGaussianScore(self.gs)
        return GaussianScore(self.spec, self.gs)


class _StaticGaussianScore(ScoreField):
    def __init__(self, gs: GaussianState):
        self.gs = gs
        self.dim = gs.dim

    def __call__(self, x, t=0.0):
        x = as_points(x)
        prec = torch.as_tensor(np.linalg.inv(self.gs.cov), dtype=DTYPE)
        return -(x - torch.as_tensor(self.gs.mean, dtype=DTYPE)) @ prec.T


def analytic_potential(gs: GaussianState, spec: SdeSpec | None = None) -> GaussianPotential:
    return GaussianPotential(gs, spec)


# -- approximate drifts ------------------------------------------------------

def reverse_drift(spec: SdeSpec, score: ScoreField, x, t) -> torch.Tensor:
    """f(x, t) - g^2(t) s(x, t): drift of the approximate reverse SDE."""
    x = as_points(x)
    t = as_times(t, x.shape[0])
    return drift(spec, x, t) - (spec.diffusion(t) ** 2)[:, None] * score(x, t)


def ode_drift(spec: SdeSpec, score: ScoreField, x, t) -> torch.Tensor:
    """f(x, t) - g^2(t) s(x, t) / 2: drift of the approximate probability flow."""
    x = as_points(x)
    t = as_times(t, x.shape[0])
    return drift(spec, x, t) - 0.5 * (spec.diffusion(t) ** 2)[:, None] * score(x, t)


def ode_drift_divergence(spec: SdeSpec, score: ScoreField, x, t) -> torch.Tensor:
    x = as_points(x)
    t = as_times(t, x.shape[0])
    return drift_divergence(spec) - 0.5 * spec.diffusion(t) ** 2 * score.divergence(x, t)
