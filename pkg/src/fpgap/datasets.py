"""Two-dimensional target distributions with samplers and exact densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError

KINDS = ("mixture", "circles", "checkerboard", "gaussian_oracle")

DEFAULTS = {
    "mixture": {
        "means": [[0.8, 0.8], [-0.8, 0.8], [-0.8, -0.8], [0.8, -0.8]],
        "weights": [0.25, 0.25, 0.25, 0.25],
        "variance": 0.02,
    },
    "circles": {"radii": [0.5, 1.0], "radial_std": 0.05, "weights": [0.5, 0.5]},
    "checkerboard": {"extent": 1.2, "tiles": 4},
    "gaussian_oracle": {"mean": [0.0, 0.0], "cov": [[0.25, 0.0], [0.0, 0.25]]},
}


@dataclass
class DatasetSpec:
    kind: str
    params: dict = field(default_factory=dict)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        merged = dict(DEFAULTS[self.kind])
        merged.update(self.params)
        self.params = merged
        if not self.scale > 0:
            raise ConfigError("dataset scale must be positive")
        p = self.params
        if self.kind in ("mixture", "circles"):
            w = np.asarray(p["weights"], dtype=float)
            if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{self.kind} weights must be positive and sum to 1")
        if self.kind == "mixture" and len(p["means"]) != len(p["weights"]):
            raise ConfigError("mixture needs one weight per component mean")
        if self.kind == "circles":
            if len(p["radii"]) != len(p["weights"]) or min(p["radii"]) <= 0 or p["radial_std"] <= 0:
                raise ConfigError("circles need positive radii, one weight each, and positive radial_std")
        if self.kind == "checkerboard" and (p["tiles"] < 2 or p["extent"] <= 0):
            raise ConfigError("checkerboard needs at least 2 tiles per side and a positive extent")

    @property
    def name(self) -> str:
        return self.kind

    def support_radius(self) -> float:
        """Box half-width holding all but a negligible fraction of the mass (4 sd)."""
        p, s = self.params, self.scale
        if self.kind == "mixture":
            return s * (np.abs(p["means"]).max() + 4 * math.sqrt(p["variance"]))
        if self.kind == "circles":
            return s * (max(p["radii"]) + 4 * p["radial_std"])
        if self.kind == "checkerboard":
            return s * p["extent"]
        cov = np.asarray(p["cov"], dtype=float)
        return s * (np.abs(p["mean"]).max() + 4 * math.sqrt(np.linalg.eigvalsh(cov).max()))

    def check_domain(self, domain: tuple[float, float]) -> None:
        lo, hi = domain
        r = self.support_radius()
        if not (lo <= -r and r <= hi):
            raise ConfigError(f"{self.kind} support (|x| <= {r:.3g}) is not inside the domain {domain}")


def draw(spec: DatasetSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. points, shape (n, 2), drawn with ``rng``."""
    if n < 1:
        raise ConfigError("need at least one sample")
    p, s = spec.params, spec.scale
    if spec.kind == "mixture":
        means = np.asarray(p["means"], dtype=float)
        comp = rng.choice(len(means), size=n, p=np.asarray(p["weights"], dtype=float))
        x = means[comp] + math.sqrt(p["variance"]) * rng.standard_normal((n, 2))
    elif spec.kind == "circles":
        radii = np.asarray(p["radii"], dtype=float)
        comp = rng.choice(len(radii), size=n, p=np.asarray(p["weights"], dtype=float))
        r = radii[comp] + p["radial_std"] * rng.standard_normal(n)
        bad = r <= 0
        while bad.any():  # truncate the radial law to r > 0
            r[bad] = radii[comp[bad]] + p["radial_std"] * rng.standard_normal(bad.sum())
            bad = r <= 0
        angle = rng.uniform(0.0, 2 * math.pi, n)
        x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    elif spec.kind == "checkerboard":
        k, e = p["tiles"], p["extent"]
        width = 2 * e / k
        on = np.array([(i, j) for i in range(k) for j in range(k) if (i + j) % 2 == 0])
        tile = on[rng.integers(len(on), size=n)]
        x = -e + width * (tile + rng.uniform(size=(n, 2)))
    else:
        mean = np.asarray(p["mean"], dtype=float)
        L = np.linalg.cholesky(np.asarray(p["cov"], dtype=float))
        x = mean + rng.standard_normal((n, 2)) @ L.T
    return s * x


def sample_data(spec: DatasetSpec, n: int, seed: int):
    from .samplers import SampleBatch

    pts = draw(spec, n, np.random.default_rng(seed))
    return SampleBatch(pts, {"source": "data", "dataset": spec.kind, "seed": seed})


def exact_density(spec: DatasetSpec, x) -> np.ndarray:
    """Normalized density at the rows of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float)) / spec.scale
    jac = 1.0 / spec.scale**2
    p = spec.params
    if spec.kind == "mixture":
        var = p["variance"]
        out = np.zeros(len(x))
        for m, w in zip(p["means"], p["weights"]):
            d2 = np.sum((x - np.asarray(m)) ** 2, axis=1)
            out += w * np.exp(-d2 / (2 * var)) / (2 * math.pi * var)
        return out * jac
    if spec.kind == "circles":
        r = np.linalg.norm(x, axis=1)
        sd = p["radial_std"]
        out = np.zeros(len(x))
        with np.errstate(divide="ignore", invalid="ignore"):
            for r0, w in zip(p["radii"], p["weights"]):
                z = ndtr(r0 / sd)  # mass of the untruncated radial law on r > 0
                radial = np.exp(-((r - r0) ** 2) / (2 * sd**2)) / (math.sqrt(2 * math.pi) * sd * z)
                out += w * np.where(r > 0, radial / (2 * math.pi * r), 0.0)
        return out * jac
    if spec.kind == "checkerboard":
        k, e = p["tiles"], p["extent"]
        width = 2 * e / k
        n_on = sum(1 for i in range(k) for j in range(k) if (i + j) % 2 == 0)
        idx = np.floor((x + e) / width).astype(int)
        inside = np.all((x >= -e) & (x < e), axis=1)
        on = inside & ((idx.sum(axis=1) % 2) == 0)
        return np.where(on, 1.0 / (n_on * width**2), 0.0) * jac
    mean = np.asarray(p["mean"], dtype=float)
    cov = np.asarray(p["cov"], dtype=float)
    diff = x - mean
    sol = np.linalg.solve(cov, diff.T).T
    norm = 2 * math.pi * math.sqrt(np.linalg.det(cov))
    return np.exp(-0.5 * np.sum(diff * sol, axis=1)) / norm * jac


def cell_masses(spec: DatasetSpec, resolution: int = 64, domain=(-2.0, 2.0), sub: int = 8) -> np.ndarray:
    """Probability of each grid cell; mass[i, j] is x1 cell i, x2 cell j.

    The checkerboard is integrated exactly (tile/cell overlap areas), the
    smooth kinds by midpoint quadrature with sub x sub points per cell.
    """
    lo, hi = domain
    if spec.kind != "checkerboard":
        n = resolution * sub
        c = lo + (hi - lo) / n * (np.arange(n) + 0.5)
        X, Y = np.meshgrid(c, c, indexing="ij")
        vals = exact_density(spec, np.stack([X.ravel(), Y.ravel()], axis=1)).reshape(n, n)
        cell = ((hi - lo) / n) ** 2
        return vals.reshape(resolution, sub, resolution, sub).sum(axis=(1, 3)) * cell
    k, e = spec.params["tiles"], spec.params["extent"] * spec.scale
    width = 2 * e / k
    edges = np.linspace(lo, hi, resolution + 1)
    # overlap[c, i]: length of grid cell c inside tile column i
    a = np.maximum(edges[:-1, None], -e + width * np.arange(k)[None, :])
    b = np.minimum(edges[1:, None], -e + width * (np.arange(k)[None, :] + 1))
    overlap = np.clip(b - a, 0.0, None)
    on = np.array([[(i + j) % 2 == 0 for j in range(k)] for i in range(k)], dtype=float)
    n_on = on.sum()
    return overlap @ on @ overlap.T / (n_on * width**2)


def on_tile(spec: DatasetSpec, x) -> np.ndarray:
    """Membership test for checkerboard "on" tiles (closed tiles)."""
    if spec.kind != "checkerboard":
        raise ConfigError("on_tile applies to the checkerboard dataset only")
    x = np.atleast_2d(np.asarray(x, dtype=float)) / spec.scale
    k, e = spec.params["tiles"], spec.params["extent"]
    width = 2 * e / k
    idx = np.clip(np.floor((x + e) / width).astype(int), 0, k - 1)
    inside = np.all((x >= -e) & (x <= e), axis=1)
    return inside & ((idx.sum(axis=1) % 2) == 0)


def gaussian_state(spec: DatasetSpec):
    """The GaussianState of the oracle dataset (scale applied)."""
    from .sde import GaussianState

    if spec.kind != "gaussian_oracle":
        raise ConfigError("only the gaussian_oracle dataset has a Gaussian law")
    s = spec.scale
    return GaussianState(s * np.asarray(spec.params["mean"], dtype=float),
                         s**2 * np.asarray(spec.params["cov"], dtype=float), 0.0)
