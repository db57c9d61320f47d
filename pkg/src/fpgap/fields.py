"""Common containers for score fields and potential derivatives.

Everything here works on batched float64 torch tensors: points are ``(n, d)``
and times are ``(n,)`` (a Python scalar is broadcast).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.func import jacfwd, vmap

from .errors import NumericError

DTYPE = torch.float64


def as_points(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    return x


def as_times(t, n: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.ndim == 0:
        t = t.expand(n)
    return t


@dataclass
class PointDerivatives:
    """Value, spatial gradient, Laplacian and time derivative of a potential.

    Batched: ``value`` (n,), ``grad`` (n, d), ``laplacian`` (n,), ``dt`` (n,).
    """

    value: torch.Tensor
    grad: torch.Tensor
    laplacian: torch.Tensor
    dt: torch.Tensor

    def check_finite(self, where: str = "potential") -> "PointDerivatives":
        for name in ("value", "grad", "laplacian", "dt"):
            v = getattr(self, name)
            if not torch.isfinite(v).all():
                raise NumericError(f"non-finite {name} in {where} derivatives")
        return self


class ScoreField:
    """A vector field s(x, t) standing in for the score of a density.

    Subclasses implement ``__call__``. The default Jacobian and divergence
    use forward-mode autodiff through ``__call__``, so implementations
    must be written in plain differentiable torch ops.
    """

    dim: int

    def __call__(self, x: torch.Tensor, t) -> torch.Tensor:
        raise NotImplementedError

    def _pointwise(self, xi, ti):
        return self(xi[None, :], ti[None])[0]

    def jacobian(self, x, t) -> torch.Tensor:
        """Batched Jacobian with ``J[k, j, i] = d s_j / d x_i`` at point k."""
        x = as_points(x)
        t = as_times(t, x.shape[0])
        return vmap(jacfwd(self._pointwise, argnums=0))(x, t)

    def divergence(self, x, t) -> torch.Tensor:
        return torch.diagonal(self.jacobian(x, t), dim1=-2, dim2=-1).sum(-1)


class ZeroScore(ScoreField):
    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, x, t):
        x = as_points(x)
        return torch.zeros_like(x)

    def jacobian(self, x, t):
        x = as_points(x)
        n, d = x.shape
        return torch.zeros(n, d, d, dtype=DTYPE)

    def divergence(self, x, t):
        return torch.zeros(as_points(x).shape[0], dtype=DTYPE)


class FunctionScore(ScoreField):
    """Wrap a plain callable ``fn(x, t) -> (n, d)`` as a score field."""

    def __init__(self, fn, dim: int):
        self.fn = fn
        self.dim = dim

    def __call__(self, x, t):
        x = as_points(x)
        return self.fn(x, as_times(t, x.shape[0]))
