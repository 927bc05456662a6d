"""Report figures written as SVG files with byte-stable output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed element ids and no timestamp, so identical data gives identical files
matplotlib.rcParams["svg.hashsalt"] = "lidarfuse"
matplotlib.rcParams["svg.fonttype"] = "path"
_META = {"Date": None, "Creator": None}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_loss_curve(path: str | Path, curve: list[float], mask_curve: list[float] | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(curve)), curve, lw=1, label="total")
    if mask_curve is not None:
        ax.plot(np.arange(len(mask_curve)), mask_curve, lw=1, label="mask focal")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_occupancy(path: str | Path, coords: np.ndarray, is_dilated: np.ndarray, extent: tuple[int, int],
                   gt_mask: np.ndarray | None = None) -> None:
    """Original occupied cells in grey, dilated cells in green, optional ground-truth outline."""
    nx, ny = extent
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if gt_mask is not None:
        ax.contour(np.arange(nx), np.arange(ny), gt_mask, levels=[0.5], colors="k", linewidths=0.6)
    c = np.asarray(coords).reshape(-1, 3)
    d = np.asarray(is_dilated, bool)
    ax.scatter(c[~d, 0], c[~d, 1], s=4, marker="s", c="0.45", label="original")
    ax.scatter(c[d, 0], c[d, 1], s=4, marker="s", c="tab:green", label="dilated")
    ax.set_xlim(-0.5, nx - 0.5)
    ax.set_ylim(-0.5, ny - 0.5)
    ax.set_aspect("equal")
    ax.set_xlabel("x cell")
    ax.set_ylabel("y cell")
    ax.legend(frameon=False, loc="upper right", fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_sampling(path: str | Path, records, queries: dict[tuple[int, int], tuple[float, float]]) -> None:
    """One panel per (stage, block): sampling points coloured by modulation, query cell starred.

    ``records`` rows are (stage, block, group, k, x, y, modulation); ``queries``
    maps (stage, block) to the query cell in that stage's grid.
    """
    keys = sorted(queries)
    fig, axes = plt.subplots(1, max(1, len(keys)), figsize=(3 * max(1, len(keys)), 3), squeeze=False)
    rec = list(records)
    for ax, key in zip(axes[0], keys):
        pts = np.array([[r[4], r[5], r[6]] for r in rec if (r[0], r[1]) == key]).reshape(-1, 3)
        sc = ax.scatter(pts[:, 0], pts[:, 1], c=pts[:, 2], s=10, cmap="viridis", vmin=0, vmax=1)
        qx, qy = queries[key]
        ax.scatter([qx], [qy], marker="*", s=80, c="tab:red")
        ax.set_title(f"stage {key[0]} block {key[1]}", fontsize=8)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=6)
    fig.colorbar(sc, ax=axes[0].tolist(), shrink=0.8, label="modulation")
    _save(fig, path)


def plot_robustness(path: str | Path, mean_drop: dict[tuple[str, str, str], float]) -> None:
    """Grouped bars of mean relative mask IoU drop per (degradation, magnitude) and mode."""
    settings = sorted({(k[1], k[2]) for k in mean_drop})
    modes = sorted({k[0] for k in mean_drop})
    x = np.arange(len(settings))
    width = 0.8 / max(1, len(modes))
    fig, ax = plt.subplots(figsize=(1.2 * len(settings) + 2, 3))
    for i, mode in enumerate(modes):
        vals = [mean_drop.get((mode, kind, mag), np.nan) for kind, mag in settings]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=mode)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{kind}\n{mag}" for kind, mag in settings], fontsize=7)
    ax.set_ylabel("relative mask IoU drop")
    ax.axhline(0, c="k", lw=0.5)
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    _save(fig, path)
