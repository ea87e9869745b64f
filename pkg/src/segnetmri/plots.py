"""Static figure output (loss curves, metrics against block count)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(loss_log: list[dict], path, title: str = "", smooth: int = 100) -> None:
    it = np.array([r["iteration"] for r in loss_log])
    loss = np.array([r["loss"] for r in loss_log])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(it, loss, lw=0.6, alpha=0.4, label="loss")
    if len(loss) >= smooth:
        kernel = np.ones(smooth) / smooth
        ax.plot(it[smooth - 1 :], np.convolve(loss, kernel, mode="valid"), lw=1.5, label=f"mean of {smooth}")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_block_sweep(rows: list[dict], path) -> None:
    """PSNR and mean Dice against the number of blocks N."""
    n = [r["blocks"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(5, 3.5))
    ax1.plot(n, [r["psnr"] for r in rows], "o-", color="tab:blue")
    ax1.set_xlabel("number of blocks N")
    ax1.set_ylabel("PSNR (dB)", color="tab:blue")
    ax1.set_xticks(n)
    ax2 = ax1.twinx()
    ax2.plot(n, [r["dice"] for r in rows], "s--", color="tab:red")
    ax2.set_ylabel("mean Dice (%)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
