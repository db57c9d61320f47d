"""Matplotlib figures for the reproduction report (written to files only)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import GridDistribution  # noqa: E402

_LABELS = {
    "w2_ode_sde": r"$W_2^2$(ODE, SDE)",
    "w2_ode_p0": r"$W_2^2$(ODE, $p_0$)",
    "w2_sde_p0": r"$W_2^2$(SDE, $p_0$)",
}


def plot_field(values, path, domain=(-2.0, 2.0), title: str = "", cmap: str = "viridis") -> None:
    """values[i, j] at x1 cell i, x2 cell j."""
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(np.asarray(values).T, origin="lower", extent=(*domain, *domain), cmap=cmap)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _positive(lines, axis: int) -> bool:
    vals = np.concatenate([np.asarray(ln.get_data()[axis], float) for ln in lines]) if lines else np.array([])
    vals = vals[np.isfinite(vals)]
    return vals.size > 0 and (vals > 0).all()


def _metric_panels(out: Path, reports, kinds, weights):
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    pos = np.arange(len(weights))
    for ax, (field, label) in zip(axes, _LABELS.items()):
        for kind in kinds:
            med = []
            for w in weights:
                vals = [getattr(r, field) for r in reports if r.dataset == kind and r.w_r == w]
                vals = [v for v in vals if math.isfinite(v)]
                med.append(np.median(vals) if vals else np.nan)
            ax.plot(pos, med, marker="o", label=kind)
        ax.set_xticks(pos, [f"{w:g}" for w in weights])
        ax.set_xlabel("$w_R$")
        if _positive(ax.get_lines(), axis=1):
            ax.set_yscale("log")
        ax.set_title(label)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "fig_tables.png", dpi=120)
    plt.close(fig)


def _scatter(out: Path, reports, kinds, yfield: str, fname: str, ylabel: str, norm=None):
    fig, ax = plt.subplots(figsize=(4.8, 3.8))
    for kind in kinds:
        pts = []
        for r in reports:
            if r.dataset != kind or not math.isfinite(r.heldout_residual):
                continue
            if yfield == "dsm":
                if norm is None or (r.dataset, r.w_r, r.seed) not in norm:
                    continue
                y = norm[(r.dataset, r.w_r, r.seed)]
            else:
                if not math.isfinite(getattr(r, yfield)):
                    continue
                y = math.sqrt(getattr(r, yfield))
            pts.append((r.heldout_residual, y))
        if pts:
            a = np.array(pts)
            ax.scatter(a[:, 0], a[:, 1], label=kind, s=18)
    if any(len(c.get_offsets()) and (c.get_offsets()[:, 0] > 0).all() for c in ax.collections):
        ax.set_xscale("log")
    ax.set_xlabel(r"held-out $\tilde R$")
    ax.set_ylabel(ylabel)
    if ax.collections:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / fname, dpi=120)
    plt.close(fig)


def _sample_grids(out: Path, reports, kinds, weights):
    seeds = sorted({r.seed for r in reports})
    if not seeds:
        return
    seed = seeds[0]
    from .experiment import cell_name

    for which in ("ode", "sde"):
        fig, axes = plt.subplots(len(kinds), len(weights), figsize=(2.2 * len(weights), 2.2 * len(kinds)),
                                 squeeze=False)
        for i, kind in enumerate(kinds):
            for j, w in enumerate(weights):
                ax = axes[i, j]
                ax.set_xticks([])
                ax.set_yticks([])
                path = out / "cells" / cell_name(kind, w, seed) / f"{which}_grid.csv"
                if path.exists():
                    g = GridDistribution.from_csv(path)
                    ax.imshow(g.mass.T, origin="lower", cmap="magma")
                if i == 0:
                    ax.set_title(f"$w_R$ = {w:g}", fontsize=9)
                if j == 0:
                    ax.set_ylabel(kind, fontsize=9)
        fig.suptitle(f"{which.upper()} samples, seed {seed}")
        fig.tight_layout()
        fig.savefig(out / f"fig_samples_{which}.png", dpi=110)
        plt.close(fig)


def render_report(out, reports, kinds, weights) -> None:
    from .experiment import normalized_dsm

    out = Path(out)
    if not any(math.isfinite(r.heldout_residual) for r in reports):
        return
    _metric_panels(out, reports, kinds, weights)
    _scatter(out, reports, kinds, "w2_ode_sde", "fig_residual_vs_w2.png", r"$W_2$(ODE, SDE)")
    _scatter(out, reports, kinds, "dsm", "fig_residual_vs_dsm.png", r"normalized $L_{DSM}$",
             norm=normalized_dsm(reports))
    _sample_grids(out, reports, kinds, weights)
