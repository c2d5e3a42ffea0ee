"""Static figure emission (Agg backend, files only)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attacks import SWEEP_HEADER  # noqa: E402

_META = {"Software": None}


def sweep_plot(rows, path, title="FGSM degradation"):
    eps = [r.epsilon for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in SWEEP_HEADER[1:]:
        if col == "PA":
            continue
        ax.plot(eps, [getattr(r, col) for r in rows], marker="o", label=col)
    ax.set_xlabel("epsilon (pixel units)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def adversarial_panel(images, eps, path):
    """Grid of denormalized images: one row per input, one column per epsilon.

    ``images[i][j]`` is a C x H x W array in [0, 1].
    """
    rows, cols = len(images), len(eps)
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.4 * rows), squeeze=False)
    for i in range(rows):
        for j in range(cols):
            ax = axes[i][j]
            ax.imshow(np.clip(np.transpose(images[i][j], (1, 2, 0)), 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title("clean" if eps[j] == 0 else f"eps={eps[j]:g}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def roc_plot(curves, path):
    """``curves`` maps a label to a list of (fpr, tpr, threshold) points."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, points in curves.items():
        pts = np.asarray(points)
        ax.plot(pts[:, 0], pts[:, 1], label=label)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("false positive rate (clean flagged)")
    ax.set_ylabel("true positive rate (adversarial flagged)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def epoch_log_plot(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for phase in ("train", "val"):
        sub = [r for r in rows if r.phase == phase]
        if not sub:
            continue
        ep = [r.epoch for r in sub]
        ax.plot(ep, [r.accuracy for r in sub], label=f"{phase} accuracy")
        ax.plot(ep, [r.loss for r in sub], ls="--", label=f"{phase} loss")
        ax.plot(ep, [r.f1_macro for r in sub], ls=":", label=f"{phase} F1")
    ax.set_xlabel("epoch")
    if ax.lines:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
