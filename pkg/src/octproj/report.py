"""Delimited machine-readable reports (JSON lines) and matplotlib figures.

Every figure goes to a file via the Agg backend; nothing ever opens a
window. Non-finite metric values are serialized as the strings "inf",
"-inf", "nan" so reports stay strictly valid JSON.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def sanitize(value):
    """Make a record JSON-safe: non-finite floats become strings."""
    if isinstance(value, dict):
        return {k: sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(sanitize(rec)) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def append_jsonl(path, record) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(sanitize(record)) + "\n")


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def save_pm_figure(path, pm, title: str = "projection map") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.asarray(pm), cmap="gray", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_title(title)
    ax.set_xlabel("column")
    ax.set_ylabel("slice")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_compare_figure(path, panels, suptitle: str = "") -> None:
    """Side-by-side grayscale maps; ``panels`` is a list of (title, array)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    for ax, (title, img) in zip(axes[0], panels):
        ax.imshow(np.asarray(img), cmap="gray", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    if suptitle:
        fig.suptitle(suptitle)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_history_figure(path, history) -> None:
    """Training loss and validation SSIM curves from history records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r["train_loss"] for r in history], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.set_yscale("log")
    ax2.plot(epochs, [r["val_ssim_b2"] for r in history], marker=".", label="B2")
    ax2.plot(epochs, [r["val_ssim_b3"] for r in history], marker=".", label="B3")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation SSIM")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_curves_figure(path, slice_img, curve_sets, title: str = "") -> None:
    """B-scan slice with one or more [K, W] curve overlays.

    ``curve_sets`` is a list of (label, curves) with normalized coordinates.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(slice_img)
    h, w = img.shape
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0, aspect="auto")
    cols = np.arange(w)
    for label, curves in curve_sets:
        rows = (np.asarray(curves) + 1.0) / 2.0 * (h - 1)
        for k in range(rows.shape[0]):
            ax.plot(cols, rows[k], lw=1.0, label=label if k == 0 else None)
    ax.legend(loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
