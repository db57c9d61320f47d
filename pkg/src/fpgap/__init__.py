"""Potential-parameterized score models with Fokker-Planck residual
regularization, ODE/SDE samplers, and Wasserstein diagnostics in 2D."""

from .errors import ConfigError, DomainError, NumericError
from .sde import SdeSpec

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "NumericError", "SdeSpec", "__version__"]
