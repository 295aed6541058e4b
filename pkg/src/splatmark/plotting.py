"""Report figures (matplotlib, headless)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ._io import atomic_write_bytes  # noqa: E402


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_training_curve(log, path) -> None:
    """Bit accuracy and PSNR per epoch."""
    epochs = [r.epoch for r in log.epochs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r.bit_accuracy for r in log.epochs], "o-", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("bit accuracy", color="tab:blue")
    ax.set_ylim(0, 1.02)
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.psnr for r in log.epochs], "s--", color="tab:red")
    ax2.set_ylabel("PSNR vs original (dB)", color="tab:red")
    ax.set_title("embedding progress")
    _save(fig, path)


def plot_eval_bars(report, path) -> None:
    names = [r.name for r in report.rows]
    accs = [r.bit_accuracy for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names)), 3.8))
    colors = ["tab:green" if r.attack is None else
              "tab:purple" if r.name.startswith("model_") else "tab:blue" for r in report.rows]
    ax.bar(range(len(names)), accs, color=colors)
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("bit accuracy")
    ax.set_title(f"robustness ({report.psnr:.2f} dB undistorted)")
    _save(fig, path)


def plot_sweep(curve, path) -> None:
    s = [p.strength for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(s, [p.bit_accuracy for p in curve.points], "o-")
    ax.axhline(0.5, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("strength")
    ax.set_ylabel("bit accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title(curve.attack)
    _save(fig, path)


def plot_fgd(report, path) -> None:
    views = range(len(report.psnr_vs_original))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(views, report.psnr_vs_original, color="tab:orange")
    ax.set_xlabel("view")
    ax.set_ylabel("PSNR vs pre-FGD render (dB)")
    ax.set_title(f"FGD: {report.n_before} -> {report.n_after} Gaussians "
                 f"({report.n_removed} pruned, {report.n_split} split)")
    _save(fig, path)
