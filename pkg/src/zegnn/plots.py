"""Figure rendering for the report and diagnose paths.

All figures are written as PNG files next to the delimited outputs; no
interactive backend is ever touched.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}  # keep PNG bytes free of library version text


def _save(fig, path):
    fig.savefig(path, dpi=150, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)


def diagnostic_panels(summary: list[dict], atlas, path) -> None:
    """Four-panel overview: importance, phase space, reversal, distributions."""
    names = [row["variable"] for row in summary]
    fig, axes = plt.subplots(2, 2, figsize=(11, 9))

    ax = axes[0, 0]
    med = [row["median_abs_g_f"] for row in summary]
    order = np.argsort(med)[::-1]
    ax.barh([names[i] for i in order][::-1], [med[i] for i in order][::-1],
            color="#4c72b0")
    ax.set_xlabel("median |dF/dx|")
    ax.set_title("Global importance")

    ax = axes[0, 1]
    i_e = np.array([row["i_e"] for row in summary])
    i_s = np.array([row["i_s"] for row in summary])
    i_f = np.array([row["i_f"] for row in summary])
    d_e = np.array([row["d_e"] for row in summary])
    size = 40 + 400 * i_f / max(i_f.max(), 1e-12)
    sc = ax.scatter(i_e, i_s, s=size, c=d_e, cmap="coolwarm", vmin=0, vmax=1,
                    edgecolor="k", linewidth=0.5)
    for j, name in enumerate(names):
        ax.annotate(name, (i_e[j], i_s[j]), fontsize=8,
                    xytext=(3, 3), textcoords="offset points")
    fig.colorbar(sc, ax=ax, label="burden dominance")
    ax.set_xlabel("burden-channel importance")
    ax.set_ylabel("capacity-channel importance")
    ax.set_title("Mechanism phase space")

    ax = axes[1, 0]
    rri = [row["rri"] for row in summary]
    ax.scatter(i_f, rri, color="#55a868", edgecolor="k", linewidth=0.5)
    for j, name in enumerate(names):
        ax.annotate(name, (i_f[j], rri[j]), fontsize=8,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("net importance")
    ax.set_ylabel("role reversal index")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Spatial role heterogeneity")

    ax = axes[1, 1]
    ax.violinplot([atlas.g_f[:, j] for j in range(len(names))],
                  showmedians=True)
    ax.axhline(0.0, color="k", linewidth=0.5)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("dF/dx")
    ax.set_title("Local sensitivity distributions")

    fig.tight_layout()
    _save(fig, path)


def sensitivity_maps(atlas, coords: np.ndarray, path) -> None:
    """Maps of dF/dx, dE/dx, dS/dx per covariate."""
    names = atlas.variables
    p = len(names)
    fig, axes = plt.subplots(3, p, figsize=(2.6 * p, 7.5), squeeze=False)
    fields = (("dF/dx", atlas.g_f), ("dE/dx", atlas.g_e), ("dS/dx", atlas.g_s))
    for r, (label, grid) in enumerate(fields):
        for j in range(p):
            ax = axes[r, j]
            vmax = max(np.abs(grid[:, j]).max(), 1e-12)
            sc = ax.scatter(coords[:, 0], coords[:, 1], c=grid[:, j], s=4,
                            cmap="RdBu_r", vmin=-vmax, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(names[j], fontsize=9)
            if j == 0:
                ax.set_ylabel(label)
            fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def regime_maps(coords: np.ndarray, p: np.ndarray, h_norm: np.ndarray,
                path) -> None:
    """Per-regime probability surfaces plus hard assignment and entropy."""
    k = p.shape[1]
    cols = k + 2
    fig, axes = plt.subplots(1, cols, figsize=(2.8 * cols, 3.1), squeeze=False)
    for r in range(k):
        ax = axes[0, r]
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=p[:, r], s=4,
                        cmap="viridis", vmin=0, vmax=1)
        ax.set_title(f"P(regime {r + 1})", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(sc, ax=ax, shrink=0.8)
    ax = axes[0, k]
    ax.scatter(coords[:, 0], coords[:, 1], c=np.argmax(p, axis=1), s=4,
               cmap="tab10", vmin=0, vmax=9)
    ax.set_title("dominant regime", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    ax = axes[0, k + 1]
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=h_norm, s=4, cmap="magma",
                    vmin=0, vmax=1)
    ax.set_title("gating entropy", fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.tight_layout()
    _save(fig, path)


def model_comparison(rows: list[dict], path) -> None:
    """R-squared, RMSE, and residual Moran's I per model and protocol."""
    models = [row["model"] for row in rows]
    x = np.arange(len(models))
    fig, axes = plt.subplots(3, 1, figsize=(1.4 + 1.3 * len(models), 9),
                             sharex=True)
    specs = [
        ("R^2", [("r2_in_sample", "in-sample", "#2ca02c", "D"),
                 ("r2_random_cv", "random CV", "#7f7f7f", "o"),
                 ("r2_spatial_cv", "spatial CV", "#1f77b4", "o")]),
        ("RMSE", [("rmse_in_sample", "in-sample", "#2ca02c", "D"),
                  ("rmse_random_cv", "random CV", "#7f7f7f", "o"),
                  ("rmse_spatial_cv", "spatial CV", "#1f77b4", "o")]),
    ]
    for ax, (label, series) in zip(axes[:2], specs):
        for key, name, color, marker in series:
            vals = [row.get(key) for row in rows]
            xs = [xi for xi, v in zip(x, vals) if v is not None]
            ys = [v for v in vals if v is not None]
            ax.scatter(xs, ys, label=name, color=color, marker=marker,
                       zorder=3)
        for xi, row in zip(x, rows):
            lo = [row.get(k) for k, *_ in series if row.get(k) is not None]
            if len(lo) >= 2:
                ax.vlines(xi, min(lo), max(lo), color="0.7", zorder=2)
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    ax = axes[2]
    vals = [row.get("morans_i_in_sample") for row in rows]
    ax.bar(x, [0 if v is None else v for v in vals], color="#c44e52")
    ax.axhline(0.0, color="k", linewidth=0.7)
    ax.set_ylabel("residual Moran's I")
    ax.set_xticks(x)
    ax.set_xticklabels(models, rotation=30, ha="right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
