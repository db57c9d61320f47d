"""Grid histograms, Wasserstein-2 distances, curl diagnostics, rank correlation."""

from __future__ import annotations

import io
import itertools
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

# POT probes every installed array backend on import; only numpy is used here.
for _key in ("TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_key}", "1")
import ot  # noqa: E402
from scipy import optimize, stats

from .errors import ConfigError, DomainError, NumericError
from .fields import DTYPE, ScoreField

DEFAULT_DOMAIN = (-2.0, 2.0)
MAX_OUTSIDE = 1e-3


@dataclass
class GridDistribution:
    """Normalized masses on a square grid over [lo, hi]^2.

    ``mass[i, j]`` is the cell with x1 index i and x2 index j.
    """

    mass: np.ndarray
    domain: tuple[float, float] = DEFAULT_DOMAIN
    outside_fraction: float = 0.0

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.ndim != 2 or self.mass.shape[0] != self.mass.shape[1]:
            raise ConfigError("grid masses must be a square 2D array")
        if (self.mass < 0).any():
            raise ConfigError("grid masses must be nonnegative")
        total = self.mass.sum()
        if not total > 0:
            raise ConfigError("grid has no mass")
        self.mass = self.mass / total
        self.domain = (float(self.domain[0]), float(self.domain[1]))

    @property
    def resolution(self) -> int:
        return self.mass.shape[0]

    @property
    def cell(self) -> float:
        lo, hi = self.domain
        return (hi - lo) / self.resolution

    def centers(self) -> np.ndarray:
        lo = self.domain[0]
        return lo + self.cell * (np.arange(self.resolution) + 0.5)

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        buf.write(f"# domain={self.domain[0]:.17g},{self.domain[1]:.17g}\n")
        buf.write(f"# resolution={self.resolution}\n")
        buf.write(f"# outside_fraction={self.outside_fraction!r}\n")
        buf.write("# layout=row-major, row i is x1 cell i, column j is x2 cell j\n")
        np.savetxt(buf, self.mass, delimiter=",", fmt="%.17g")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "GridDistribution":
        meta, body = {}, []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line.strip():
                body.append(line)
        lo, hi = (float(v) for v in meta["domain"].split(","))
        mass = np.loadtxt(body, delimiter=",", ndmin=2)
        if mass.shape[0] != int(meta["resolution"]):
            raise ConfigError(f"{path}: resolution header does not match the data")
        return cls(mass, (lo, hi), float(meta.get("outside_fraction", 0.0)))


def outside_fraction(points, domain=DEFAULT_DOMAIN) -> float:
    """Fraction of samples with any coordinate outside [lo, hi]."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    lo, hi = domain
    return float(np.any(~((pts >= lo) & (pts <= hi)), axis=1).mean())


def grid_histogram(points, resolution: int = 64, domain=DEFAULT_DOMAIN) -> GridDistribution:
    """Bin samples into cells; stray points are clipped into boundary cells
    only while they make up less than 0.1% of the batch."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ConfigError("grid_histogram needs a nonempty (n, 2) sample array")
    if not np.isfinite(pts).all():
        raise NumericError("non-finite samples cannot be binned")
    lo, hi = domain
    frac = outside_fraction(pts, domain)
    if frac >= MAX_OUTSIDE:
        raise NumericError(f"{100 * frac:.3g}% of samples fall outside the domain {domain}")
    idx = np.floor((pts - lo) / (hi - lo) * resolution).astype(np.int64)
    idx = np.clip(idx, 0, resolution - 1)
    mass = np.zeros((resolution, resolution))
    np.add.at(mass, (idx[:, 0], idx[:, 1]), 1.0)
    return GridDistribution(mass, (lo, hi), frac)


def density_grid(density, resolution: int = 64, domain=DEFAULT_DOMAIN, sub: int = 8) -> GridDistribution:
    """Cell masses of a density by midpoint quadrature with sub x sub points per cell."""
    lo, hi = domain
    n = resolution * sub
    c = lo + (hi - lo) / n * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(c, c, indexing="ij")
    vals = density(np.stack([X.ravel(), Y.ravel()], axis=1)).reshape(n, n)
    mass = vals.reshape(resolution, sub, resolution, sub).sum(axis=(1, 3))
    return GridDistribution(mass, domain)


def downsample(grid: GridDistribution, factor: int) -> GridDistribution:
    r = grid.resolution
    if r % factor:
        raise ConfigError(f"resolution {r} is not divisible by {factor}")
    m = grid.mass.reshape(r // factor, factor, r // factor, factor).sum(axis=(1, 3))
    return GridDistribution(m, grid.domain)


# -- optimal transport -------------------------------------------------------

def _check_pair(P: GridDistribution, Q: GridDistribution) -> None:
    if P.resolution != Q.resolution or not np.allclose(P.domain, Q.domain):
        raise ConfigError("W2 needs grids with the same resolution and domain")


def w2_squared_grid(P: GridDistribution, Q: GridDistribution, method: str = "emd",
                    max_support: int = 64) -> float:
    """Squared W2 between grid distributions (cost: squared distance of cell centers).

    ``emd`` solves the exact transport problem with a network simplex over
    the occupied cells only; ``lp`` routes through ``w2_exact_small``
    and is meant for coarse grids.
    """
    _check_pair(P, Q)
    pts = cell_centers(P.resolution, P.domain)
    a, b = P.mass.ravel(), Q.mass.ravel()
    if method == "lp":
        return w2_exact_small(pts, a, pts, b, max_support=max_support) ** 2
    if method != "emd":
        raise ConfigError(f"unknown W2 method {method!r}")
    ia, ib = a > 0, b > 0
    wa, wb = a[ia], b[ib]
    wb = wb * (wa.sum() / wb.sum())
    M = ot.dist(pts[ia], pts[ib], metric="sqeuclidean")
    plan, log = ot.emd(wa, wb, M, numItermax=10_000_000, log=True)
    if log.get("warning"):
        raise NumericError(f"network simplex did not finish: {log['warning']}")
    return float(max((plan * M).sum(), 0.0))


def w2_grid(P: GridDistribution, Q: GridDistribution, method: str = "emd", **kw) -> float:
    """W2 between grid distributions, in the domain's native units."""
    return math.sqrt(w2_squared_grid(P, Q, method, **kw))


def w2_exact_small(xs, a, ys, b, max_support: int = 64) -> float:
    """Exact W2 between small discrete distributions by linear programming."""
    xs, ys = np.atleast_2d(np.asarray(xs, float)), np.atleast_2d(np.asarray(ys, float))
    a, b = np.asarray(a, float), np.asarray(b, float)
    if abs(a.sum() - b.sum()) > 1e-9:
        raise DomainError(f"marginals carry different mass ({a.sum():.12g} vs {b.sum():.12g})")
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    if max(len(ia), len(ib)) > max_support:
        raise ConfigError(f"support of size {max(len(ia), len(ib))} exceeds the exact-solver limit {max_support}")
    xs, a, ys, b = xs[ia], a[ia], ys[ib], b[ib]
    m, n = len(a), len(b)
    C = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(-1)
    rows = np.zeros((m + n, m * n))
    for i in range(m):
        rows[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        rows[m + j, j::n] = 1.0
    res = optimize.linprog(C.ravel(), A_eq=rows[:-1], b_eq=np.concatenate([a, b])[:-1],
                           bounds=(0, None), method="highs",
                           options={"primal_feasibility_tolerance": 1e-10,
                                    "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise NumericError(f"exact OT solver failed: {res.message}")
    return math.sqrt(max(res.fun, 0.0))


def w2_brute_force(xs, a, ys, b) -> float:
    """Enumerate vertices of the transport polytope (tiny supports only).

    Vertices are the plans whose support forms a spanning forest of the
    bipartite graph; each is found by solving the equality system on a
    candidate edge set of size m + n - 1.
    """
    xs, ys = np.atleast_2d(np.asarray(xs, float)), np.atleast_2d(np.asarray(ys, float))
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, n = len(a), len(b)
    C = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(-1)
    edges = [(i, j) for i in range(m) for j in range(n)]
    rhs = np.concatenate([a, b])
    best = math.inf
    for subset in itertools.combinations(range(len(edges)), m + n - 1):
        A = np.zeros((m + n, m + n - 1))
        for col, e in enumerate(subset):
            i, j = edges[e]
            A[i, col] = 1.0
            A[m + j, col] = 1.0
        sol, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
        if rank < m + n - 1 or np.abs(A @ sol - rhs).max() > 1e-12 or sol.min() < -1e-12:
            continue
        cost = sum(sol[col] * C[edges[e]] for col, e in enumerate(subset))
        best = min(best, cost)
    return math.sqrt(max(best, 0.0))


# -- curl --------------------------------------------------------------------

@dataclass
class CurlField:
    values: np.ndarray
    t: float
    domain: tuple[float, float] = DEFAULT_DOMAIN

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        buf.write(f"# domain={self.domain[0]:.17g},{self.domain[1]:.17g}\n")
        buf.write(f"# resolution={self.values.shape[0]}\n# t={self.t:.17g}\n")
        np.savetxt(buf, self.values, delimiter=",", fmt="%.17g")
        Path(path).write_text(buf.getvalue())


def cell_centers(resolution: int, domain=DEFAULT_DOMAIN) -> np.ndarray:
    lo, hi = domain
    c = lo + (hi - lo) / resolution * (np.arange(resolution) + 0.5)
    X, Y = np.meshgrid(c, c, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def curl_field(score: ScoreField, t: float = 0.0, resolution: int = 64, domain=DEFAULT_DOMAIN) -> CurlField:
    """d s_1/d x_2 - d s_2/d x_1 at cell centers, from the exact Jacobian."""
    if score.dim != 2:
        raise ConfigError("curl diagnostic needs a two-dimensional field")
    pts = torch.as_tensor(cell_centers(resolution, domain), dtype=DTYPE)
    with torch.no_grad():
        J = score.jacobian(pts, t)
    curl = (J[:, 0, 1] - J[:, 1, 0]).numpy().reshape(resolution, resolution)
    if not np.isfinite(curl).all():
        raise NumericError("non-finite curl values")
    return CurlField(curl, float(t), domain)


# -- statistics --------------------------------------------------------------

def rank_correlation(pairs) -> float:
    """Spearman rank correlation with average ranks for ties."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 3:
        raise ConfigError("rank correlation needs at least 3 (a, b) pairs")
    rho = stats.spearmanr(arr[:, 0], arr[:, 1]).statistic
    return float(rho)


def write_pgm(path, values: np.ndarray) -> None:
    """Grayscale heatmap (binary PGM); brightest cell is the maximum.

    Row 0 of the image is the top (largest x2), column 0 the smallest x1.
    """
    v = np.asarray(values, dtype=float)
    img = np.flipud(v.T)
    span = img.max() - img.min()
    scaled = np.zeros_like(img) if span == 0 else (img - img.min()) / span
    data = np.round(255 * scaled).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
