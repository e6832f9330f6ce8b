"""Matplotlib figures for reports (headless Agg backend)."""

from __future__ import annotations

import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .hetero import CLASSES  # noqa: E402
from .io_utils import atomic_write_bytes  # noqa: E402

CLASS_COLOURS = {"Healthy": "#4c9a2a", "NPDR": "#e0a100", "PDR": "#c0392b"}


def _png_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def distribution_figure(rows: list[dict], statistics: list[str], path) -> None:
    """One box plot panel per statistic, one box per class present in ``rows``."""
    classes = [c for c in CLASSES if any(r["label"] == c for r in rows)]
    ncol = 3
    nrow = max(1, math.ceil(len(statistics) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3 * nrow), squeeze=False)
    for ax, stat in zip(axes.ravel(), statistics):
        data = []
        for c in classes:
            v = np.array([r[stat] for r in rows if r["label"] == c], float)
            data.append(v[np.isfinite(v)])
        box = ax.boxplot(data, patch_artist=True, showfliers=False)
        for patch, c in zip(box["boxes"], classes):
            patch.set_facecolor(CLASS_COLOURS[c])
            patch.set_alpha(0.6)
        ax.set_xticks(range(1, len(classes) + 1), classes)
        ax.set_title(stat, fontsize=9)
    for ax in axes.ravel()[len(statistics):]:
        ax.axis("off")
    fig.tight_layout()
    atomic_write_bytes(path, _png_bytes(fig))


def history_figure(history: list[dict], path) -> None:
    """Training loss and balanced accuracy per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.2))
    a.plot(epochs, [h["loss"] for h in history], label="train")
    if history and "val_loss" in history[0]:
        a.plot(epochs, [h["val_loss"] for h in history], label="val")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(epochs, [h["train_balanced_accuracy"] for h in history], label="train")
    if history and "val_balanced_accuracy" in history[0]:
        b.plot(epochs, [h["val_balanced_accuracy"] for h in history], label="val")
    b.set_xlabel("epoch")
    b.set_ylabel("balanced accuracy")
    b.set_ylim(0, 1)
    b.legend()
    fig.tight_layout()
    atomic_write_bytes(path, _png_bytes(fig))
