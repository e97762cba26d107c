"""Matplotlib figures written next to reports: condition metrics, feature maps, loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_DPI = 120

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=FIG_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_report(report, outdir, stem: str = "report") -> list[Path]:
    """Bar charts of feature MSE and suppression rates per condition."""
    outdir = Path(outdir)
    names = [r.condition for r in report.rows]
    x = np.arange(len(names))
    width = 0.38

    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2.5, 3.0))
    ax.bar(x - width / 2, [r.mse_unenhanced for r in report.rows], width, label="unenhanced", color="0.65")
    ax.bar(x + width / 2, [r.mse_enhanced for r in report.rows], width, label="enhanced", color="tab:blue")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylabel("feature MSE vs clean")
    ax.legend(frameon=False)
    mse_path = _save(fig, outdir / f"{stem}_mse.png")

    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2.5, 3.0))
    ax.bar(x - width / 2, [r.over_suppression_rate for r in report.rows], width, label="over", color="tab:red")
    ax.bar(x + width / 2, [r.under_suppression_rate for r in report.rows], width, label="under", color="tab:green")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylabel(f"cell fraction (eps={report.epsilon:g})")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    rate_path = _save(fig, outdir / f"{stem}_suppression.png")
    return [mse_path, rate_path]


def plot_features(s_in: np.ndarray, s_out: np.ndarray, path, ws: np.ndarray | None = None, frame_hop_s: float = 0.01) -> Path:
    """Input and enhanced feature maps (time on x), with the w trace underneath."""
    rows = 3 if ws is not None else 2
    fig, axes = plt.subplots(rows, 1, figsize=(7, 1.9 * rows), sharex=True)
    extent = (0, s_in.shape[0] * frame_hop_s, 0, s_in.shape[1])
    vmax = max(float(np.max(s_in)), 1e-9)
    for ax, data, title in ((axes[0], s_in, "input"), (axes[1], s_out, "enhanced")):
        ax.imshow(data.T, origin="lower", aspect="auto", extent=extent, vmin=0, vmax=vmax, cmap="magma")
        ax.set_title(title, loc="left")
        ax.set_ylabel("feature bin")
    if ws is not None:
        t = np.arange(len(ws)) * frame_hop_s
        axes[2].plot(t, ws, lw=1.0, color="tab:blue")
        axes[2].set_ylim(-0.05, 1.05)
        axes[2].set_ylabel("w")
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path)


def plot_loss(history: list[dict], path) -> Path:
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(steps, [h["loss"] for h in history], lw=0.8, color="0.6", label="batch")
    if len(history) >= 10:
        k = max(len(history) // 20, 5)
        smooth = np.convolve([h["loss"] for h in history], np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.5, color="tab:blue", label=f"running mean ({k})")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    return _save(fig, path)
