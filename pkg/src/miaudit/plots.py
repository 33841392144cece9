"""Static figures: per-class confidence histograms and training trajectories."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _placeholder(path: Path, message: str) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.text(0.5, 0.5, message, ha="center", va="center", wrap=True)
    ax.set_axis_off()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def render_histograms(histograms: list[dict], out_dir) -> list[Path]:
    """One figure per class: member vs nonmember true-class confidence, one panel per subset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not histograms:
        return [_placeholder(out_dir / "confidence_hist_empty.png", "no confidence histograms")]
    by_class = {}
    for h in histograms:
        by_class.setdefault(h["class_id"], []).append(h)
    paths = []
    for cls, hs in sorted(by_class.items()):
        fig, axes = plt.subplots(1, len(hs), figsize=(4 * len(hs), 3), squeeze=False)
        for ax, h in zip(axes[0], hs):
            edges = np.array(h["edges"])
            centers, width = (edges[:-1] + edges[1:]) / 2, np.diff(edges)
            for side, color in (("member", "tab:blue"), ("nonmember", "tab:orange")):
                counts = np.array(h[side], float)
                frac = counts / counts.sum() if counts.sum() else counts
                ax.bar(centers, frac, width=width, alpha=0.5, color=color,
                       label=f"{side} (n={int(counts.sum())})")
            ax.set_title(f"class {cls}, {h['subset']}" + (" (empty)" if h.get("empty") else ""))
            ax.set_xlabel("true-class confidence")
            ax.set_ylabel("fraction")
            ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"confidence_hist_class{cls}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def render_trajectory(series: list[dict], out_path, divergence_epoch: int | None = None) -> Path:
    """Train/test accuracy plus attack balanced accuracy and FAR per epoch."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not series:
        return _placeholder(out_path, "empty trajectory")
    epochs = [p["epoch"] for p in series]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.plot(epochs, [p["train_accuracy"] for p in series], "o-", label="train acc")
    ax1.plot(epochs, [p["test_accuracy"] for p in series], "s-", label="test acc")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("target accuracy")
    for subset, style in (("all", "o-"), ("correct", "^-"), ("misclassified", "v-")):
        if subset not in series[0]:
            continue
        ba = [np.nan if p[subset]["balanced_accuracy"] is None else p[subset]["balanced_accuracy"]
              for p in series]
        far = [np.nan if p[subset]["far"] is None else p[subset]["far"] for p in series]
        ax2.plot(epochs, ba, style, label=f"{subset} bal. acc")
        ax2.plot(epochs, far, style, alpha=0.4, label=f"{subset} FAR")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("attack")
    for ax in (ax1, ax2):
        if divergence_epoch is not None:
            ax.axvline(divergence_epoch, color="gray", ls="--", label="test-loss minimum")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return out_path
