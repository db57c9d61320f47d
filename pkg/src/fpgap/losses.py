"""Monte Carlo estimators: denoising / exact score matching and the
Fokker-Planck residuals (density, log-density and score forms)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.func import jacfwd, vmap

from .errors import ConfigError, DomainError, NumericError
from .fields import DTYPE, FunctionScore, PointDerivatives, ScoreField
from .sde import SdeSpec, drift, drift_divergence, drift_jacobian, kernel_score, reverse_drift


@dataclass
class DsmBatch:
    t: torch.Tensor
    x0: torch.Tensor
    xt: torch.Tensor
    weight: torch.Tensor

    def __len__(self):
        return self.t.shape[0]


@dataclass
class CollocationBatch:
    x: torch.Tensor
    s: torch.Tensor
    domain: tuple[float, float]

    def __len__(self):
        return self.s.shape[0]


def make_dsm_batch(spec: SdeSpec, x0, rng: np.random.Generator, t_eps: float = 1e-3) -> DsmBatch:
    """t ~ U(t_eps, T), x_t ~ p(. , t | x0); weight lambda(t) = g(t)^2."""
    x0 = torch.as_tensor(np.asarray(x0), dtype=DTYPE)
    n = x0.shape[0]
    t = torch.from_numpy(rng.uniform(t_eps, spec.T, n))
    noise = torch.from_numpy(rng.standard_normal((n, spec.dim)))
    xt = x0 * torch.exp(-t)[:, None] + torch.sqrt(spec.variance(t))[:, None] * noise
    return DsmBatch(t, x0, xt, spec.diffusion(t) ** 2)


def make_collocation_batch(spec: SdeSpec, n: int, domain, rng: np.random.Generator,
                           t_low: float = 0.0) -> CollocationBatch:
    """s ~ U(t_low, T), x ~ U(domain^d)."""
    lo, hi = domain
    s = torch.from_numpy(rng.uniform(t_low, spec.T, n))
    x = torch.from_numpy(rng.uniform(lo, hi, (n, spec.dim)))
    return CollocationBatch(x, s, (lo, hi))


def dsm_loss(score: ScoreField, batch: DsmBatch, spec: SdeSpec) -> torch.Tensor:
    if len(batch) == 0:
        raise DomainError("empty DSM batch")
    target = kernel_score(spec, batch.xt, batch.x0, batch.t)
    err = ((target - score(batch.xt, batch.t)) ** 2).sum(1)
    return (batch.weight * err).mean()


def sm_loss(score: ScoreField, truth: ScoreField, t, xt, spec: SdeSpec) -> torch.Tensor:
    """Score matching against a known marginal score (oracle setting only)."""
    t = torch.as_tensor(t, dtype=DTYPE)
    xt = torch.as_tensor(xt, dtype=DTYPE)
    err = ((truth(xt, t) - score(xt, t)) ** 2).sum(1)
    return (spec.diffusion(t) ** 2 * err).mean()


# -- log-density residual ----------------------------------------------------

def lfp_integrand(d: PointDerivatives, x, t, spec: SdeSpec) -> torch.Tensor:
    """du/dt + div f + grad u . f - g^2 |grad u|^2 / 2 - g^2 lap u / 2."""
    g2 = spec.diffusion(t) ** 2
    f = drift(spec, x, t)
    return (d.dt + drift_divergence(spec) + (d.grad * f).sum(1)
            - 0.5 * g2 * (d.grad**2).sum(1) - 0.5 * g2 * d.laplacian)


def lfp_integrand_reverse(d: PointDerivatives, x, t, spec: SdeSpec) -> torch.Tensor:
    """Same residual written with the approximate reverse drift f - g^2 grad u:
    du/dt + div f_rev + grad u . f_rev + g^2 |grad u|^2 / 2 + g^2 lap u / 2."""
    g2 = spec.diffusion(t) ** 2
    score = FunctionScore(lambda _x, _t: d.grad, spec.dim)
    f_rev = reverse_drift(spec, score, x, t)
    div_rev = drift_divergence(spec) - g2 * d.laplacian
    return (d.dt + div_rev + (d.grad * f_rev).sum(1)
            + 0.5 * g2 * (d.grad**2).sum(1) + 0.5 * g2 * d.laplacian)


def lfp_residual(potential, batch: CollocationBatch, spec: SdeSpec) -> torch.Tensor:
    """Mean squared log-Fokker-Planck residual of ``potential`` over the batch.

    ``potential`` exposes ``derivatives(x, t) -> PointDerivatives`` (a network
    potential or an analytic Gaussian log-density).
    """
    d = potential.derivatives(batch.x, batch.s)
    r = lfp_integrand(d, batch.x, batch.s, spec)
    if not torch.isfinite(r).all():
        raise NumericError("non-finite log-Fokker-Planck residual")
    return (r**2).mean()


# -- density residual ----------------------------------------------------------

@dataclass
class DensityDerivatives:
    p: torch.Tensor
    grad: torch.Tensor
    laplacian: torch.Tensor
    dt: torch.Tensor


class PotentialDensity:
    """p = c * exp(u) for a potential u, with derivatives from those of u."""

    def __init__(self, potential, scale: float = 1.0):
        self.potential = potential
        self.scale = scale

    def derivatives(self, x, t) -> DensityDerivatives:
        d = self.potential.derivatives(x, t)
        p = self.scale * torch.exp(d.value)
        return DensityDerivatives(
            p=p,
            grad=p[:, None] * d.grad,
            laplacian=p * (d.laplacian + (d.grad**2).sum(1)),
            dt=p * d.dt,
        )


def fp_integrand(dd: DensityDerivatives, x, t, spec: SdeSpec) -> torch.Tensor:
    """dp/dt + div(f p) - g^2 lap p / 2, with div(f p) = p div f + f . grad p."""
    g2 = spec.diffusion(t) ** 2
    f = drift(spec, x, t)
    return dd.dt + dd.p * drift_divergence(spec) + (f * dd.grad).sum(1) - 0.5 * g2 * dd.laplacian


def fp_residual(density, batch: CollocationBatch, spec: SdeSpec) -> torch.Tensor:
    dd = density.derivatives(batch.x, batch.s)
    r = fp_integrand(dd, batch.x, batch.s, spec)
    if not torch.isfinite(r).all():
        raise NumericError("non-finite Fokker-Planck residual")
    return (r**2).mean()


# -- score residual --------------------------------------------------------------

def sfp_integrand(score: ScoreField, x, t, spec: SdeSpec) -> torch.Tensor:
    """Vector residual of the score equation, shape (n, d).

    With (grad s)_{ij} = d s_j / d x_i:
    ds/dt + grad(div f) + (grad s) f + (grad f) s - g^2 (grad s) s - g^2 grad(div s) / 2.
    For OU, grad(div f) = 0 and grad f = -I.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE).expand(x.shape[0])

    def s_point(xi, ti):
        return score(xi[None, :], ti[None])[0]

    def div_point(xi, ti):
        return torch.trace(jacfwd(s_point, argnums=0)(xi, ti))

    s = score(x, t)
    J = vmap(jacfwd(s_point, argnums=0))(x, t)  # J[k, j, i] = d s_j / d x_i
    ds_dt = vmap(jacfwd(s_point, argnums=1))(x, t)
    grad_div = vmap(jacfwd(div_point, argnums=0))(x, t)
    gs = J.transpose(1, 2)  # (grad s)_{ij}
    f = drift(spec, x, t)
    grad_f = drift_jacobian(spec).T
    g2 = (spec.diffusion(t) ** 2)[:, None]
    return (ds_dt
            + torch.einsum("kij,kj->ki", gs, f)
            + s @ grad_f.T
            - g2 * torch.einsum("kij,kj->ki", gs, s)
            - 0.5 * g2 * grad_div)


def sfp_residual(score: ScoreField, batch: CollocationBatch, spec: SdeSpec) -> torch.Tensor:
    r = sfp_integrand(score, batch.x, batch.s, spec)
    if not torch.isfinite(r).all():
        raise NumericError("non-finite score-Fokker-Planck residual")
    return (r**2).sum(1).mean()


# -- training objective ------------------------------------------------------------

def combined_loss(theta, cfg, w_r: float, dsm_batch: DsmBatch, colloc: CollocationBatch,
                  spec: SdeSpec) -> dict:
    """DSM loss of grad phi plus w_r times the log-Fokker-Planck residual.

    Returns the named terms; the objective is ``terms["dsm"] + w_r * terms["lfp"]``.
    """
    from .potential import PotentialScore, derivatives_eval

    if w_r < 0:
        raise ConfigError("residual weight must be nonnegative")
    dsm = dsm_loss(PotentialScore(theta, cfg), dsm_batch, spec)
    terms = {"dsm": dsm}
    if colloc is not None:
        d = derivatives_eval(theta, cfg, colloc.x, colloc.s)
        r = lfp_integrand(d, colloc.x, colloc.s, spec)
        terms["lfp"] = (r**2).mean()
        terms["total"] = dsm + w_r * terms["lfp"]
    elif w_r > 0:
        raise ConfigError("a positive residual weight needs a collocation batch")
    else:
        terms["total"] = dsm
    return terms
