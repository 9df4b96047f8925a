"""Static figure emission for the report path.

Radar-style panels share one discrete colormap whose level boundaries sit
exactly at the evaluation thresholds, so figures and scores always refer to
the same event definition. All rendering targets files via the Agg backend;
output bytes are deterministic for fixed inputs and matplotlib version.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import BoundaryNorm, ListedColormap

from .data import MODALITY_ORDER, RAW_MAX
from .metrics import MetricReport

DPI = 120


def radar_levels(thresholds) -> list[float]:
    """Colormap level boundaries: 0, the thresholds, and the raw maximum."""
    return [0.0, *[float(t) for t in thresholds], RAW_MAX]


def radar_norm(thresholds):
    """Discrete (cmap, norm) pair with boundaries at the raw thresholds."""
    levels = radar_levels(thresholds)
    colors = ["#f0f0f0", "#7fcdbb", "#41b6c4", "#1d91c0", "#225ea8", "#e31a1c"]
    cmap = ListedColormap(colors[: len(levels) - 1])
    return cmap, BoundaryNorm(levels, cmap.N)


def save_event_panels(
    path,
    stack_raw: np.ndarray,
    target_raw: np.ndarray,
    thresholds,
    coarse_raw: np.ndarray | None = None,
    refined_raw: np.ndarray | None = None,
    title: str = "",
) -> Path:
    """Side-by-side panels: inputs, coarse and refined estimates, target."""
    panels: list[tuple[str, np.ndarray, bool]] = [
        (name, stack_raw[i], False) for i, name in enumerate(MODALITY_ORDER)
    ]
    if coarse_raw is not None:
        panels.append(("coarse", np.squeeze(coarse_raw), True))
    if refined_raw is not None:
        panels.append(("refined", np.squeeze(refined_raw), True))
    panels.append(("target", target_raw, True))

    cmap, norm = radar_norm(thresholds)
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.8))
    last_radar = None
    for ax, (name, img, is_radar) in zip(np.atleast_1d(axes), panels):
        if is_radar:
            last_radar = ax.imshow(img, cmap=cmap, norm=norm, interpolation="nearest")
        else:
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=RAW_MAX, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if last_radar is not None:
        cbar = fig.colorbar(
            last_radar, ax=np.atleast_1d(axes).tolist(), fraction=0.03, pad=0.02
        )
        cbar.set_label("raw intensity", fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_score_bars(path, rep: MetricReport) -> Path:
    """Per-threshold CSI and HSS bars plus the pooled and average scores."""
    thr = list(rep.thresholds)
    xs = np.arange(len(thr))
    width = 0.38

    def series(d):
        return [np.nan if d[t] is None else d[t] for t in thr]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.bar(xs - width / 2, series(rep.csi_by_threshold), width, label="CSI", color="#1d91c0")
    ax1.bar(xs + width / 2, series(rep.hss_by_threshold), width, label="HSS", color="#e31a1c")
    ax1.set_xticks(xs)
    ax1.set_xticklabels([f"{t:g}" for t in thr], fontsize=8)
    ax1.set_xlabel("threshold (raw scale)")
    ax1.set_ylim(0.0, 1.05)
    ax1.legend(fontsize=8)
    ax1.set_title("per-threshold skill", fontsize=9)

    names = ["avg_csi", "avg_hss", "csi_pool4", "csi_pool16", "ssim"]
    values = [rep.avg_csi, rep.avg_hss, rep.csi_pool4, rep.csi_pool16, rep.ssim]
    values = [np.nan if v is None else v for v in values]
    ax2.bar(np.arange(len(names)), values, color="#225ea8")
    ax2.set_xticks(np.arange(len(names)))
    ax2.set_xticklabels(names, fontsize=7, rotation=20)
    ax2.set_ylim(0.0, 1.05)
    ax2.set_title("aggregates", fontsize=9)

    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
