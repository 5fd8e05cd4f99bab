"""Figure rendering for reports: loss curves, metric plots, sample grids.

Every report-producing CLI path drops these PNGs next to its TSV output.
Rendering is headless (Agg) and deterministic.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harmonize import EvalReport, FlipReport
from .training import LossRecord


def loss_curve_figure(records: list[LossRecord], out_png: str | Path, title: str = "") -> Path:
    out_png = Path(out_png)
    steps = [r.step for r in records]
    losses = [r.loss for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8, color="tab:blue", alpha=0.5, label="loss")
    if len(losses) >= 20:
        k = max(len(losses) // 50, 5)
        kernel = np.ones(k) / k
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.6, color="tab:blue", label=f"mean({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def eval_figure(report: EvalReport, out_png: str | Path) -> Path:
    out_png = Path(out_png)
    psnr = [r["psnr_db"] for r in report.rows]
    ssim = [r["ssim"] for r in report.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.hist(psnr, bins=min(20, max(5, len(psnr) // 4)), color="tab:blue", alpha=0.8)
    ax1.axvline(report.mean["psnr_db"], color="k", lw=1.2, ls="--",
                label=f"mean {report.mean['psnr_db']:.2f} dB")
    ax1.set_xlabel("PSNR (dB)")
    ax1.set_ylabel("samples")
    ax1.legend(fontsize=8)
    ax2.scatter(psnr, ssim, s=12, alpha=0.7, color="tab:orange")
    ax2.set_xlabel("PSNR (dB)")
    ax2.set_ylabel("SSIM")
    fig.suptitle(f"stage {report.stage}, {report.n} samples", fontsize=10)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def sample_grid_figure(
    inputs: np.ndarray,
    preds: np.ndarray,
    targets: np.ndarray,
    out_png: str | Path,
    max_rows: int = 6,
) -> Path:
    """Rows of (input composite, model output, rendered target)."""
    out_png = Path(out_png)
    n = min(max_rows, inputs.shape[0])
    fig, axes = plt.subplots(n, 3, figsize=(4.5, 1.55 * n), squeeze=False)
    for i in range(n):
        for j, (img, name) in enumerate(
            ((inputs[i], "input"), (preds[i], "output"), (targets[i], "target"))
        ):
            ax = axes[i][j]
            ax.imshow(np.clip(img, 0.0, 1.0))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(name, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def flip_figure(report: FlipReport, out_png: str | Path) -> Path:
    """Probe azimuth vs probe azimuth under the mirrored background."""
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    lim = np.pi
    ax.axhline(0, color="0.7", lw=0.8)
    ax.axvline(0, color="0.7", lw=0.8)
    ax.plot([-lim, lim], [lim, -lim], color="0.8", lw=0.8, ls="--", label="exact mirror")
    ok = [c for c in report.cases if c.flipped]
    bad = [c for c in report.cases if not c.flipped]
    if ok:
        ax.scatter([c.azimuth for c in ok], [c.azimuth_flipped for c in ok],
                   s=18, color="tab:green", label="sign flipped")
    if bad:
        ax.scatter([c.azimuth for c in bad], [c.azimuth_flipped for c in bad],
                   s=18, color="tab:red", label="not flipped")
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_xlabel("probe azimuth (rad)")
    ax.set_ylabel("probe azimuth, flipped bg (rad)")
    ax.set_title(report.summary_text(), fontsize=9)
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def norm_map_figure(maps: dict[str, np.ndarray], out_png: str | Path) -> Path:
    """Side-by-side feature L2-norm maps (e.g. f_bg, align(f_bg), f_env)."""
    out_png = Path(out_png)
    fig, axes = plt.subplots(1, len(maps), figsize=(2.1 * len(maps), 2.4), squeeze=False)
    for ax, (name, m) in zip(axes[0], maps.items()):
        im = ax.imshow(m, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0], shrink=0.85)
    fig.savefig(out_png, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_png
