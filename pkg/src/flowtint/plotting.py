"""Matplotlib figures for evaluation reports and training logs."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def plot_report(report, out_dir, stem="report") -> dict:
    """Per-sample metric panels; returns {"figure": path}."""
    rows = report.rows
    metrics = (["psnr", "ssim"] if report.paired else []) + ["expected_score"]
    fig, axes = plt.subplots(1, len(metrics) + 1, figsize=(3.2 * (len(metrics) + 1), 3.0))
    x = np.arange(len(rows))
    for ax, key in zip(axes, metrics):
        vals = [np.nan if r.get(key) is None else r[key] for r in rows]
        ax.bar(x, vals, color="#4c72b0")
        ax.set_title(key)
        ax.set_xlabel("sample")
    agg = report.aggregate
    ax = axes[-1]
    ax.bar(["success", "local_ok"], [agg["success_ratio"], agg["local_ratio"]], color=["#55a868", "#c44e52"])
    ax.set_ylim(0, 1.05)
    ax.set_title("ratios")
    fig.tight_layout()
    path = Path(out_dir) / f"{stem}.png"
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return {"figure": path}


def plot_training_log(records, path, window: int = 5):
    """Mean raw score and group loss per RL round."""
    rounds = [r["round"] for r in records]
    score = np.array([np.mean(r["raw_scores"]) for r in records])
    loss = np.array([r["group_loss"] for r in records])
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(rounds, score, ".", alpha=0.5, label="round")
    if len(score) >= window:
        smooth = np.convolve(score, np.ones(window) / window, mode="valid")
        a.plot(rounds[window - 1:], smooth, "-", label=f"{window}-round mean")
    a.set_xlabel("round")
    a.set_ylabel("mean raw score")
    a.legend(fontsize=8)
    b.plot(rounds, loss, "-")
    b.set_xlabel("round")
    b.set_ylabel("group loss")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return Path(path)


def plot_losses(losses, path, window: int = 50):
    """Cold-start loss curve with its moving average."""
    losses = np.asarray(losses)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, alpha=0.3, lw=0.8)
    if len(losses) >= window:
        ax.plot(np.arange(window - 1, len(losses)), np.convolve(losses, np.ones(window) / window, "valid"))
    ax.set_xlabel("step")
    ax.set_ylabel("flow-matching loss")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return Path(path)
