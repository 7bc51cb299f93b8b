"""Static figure emission: loss curves, patch grids, ellipse overlays.

All figures render through the Agg backend and go straight to files.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .labels import AirwayLabel

_HU_WINDOW = (-1100.0, 100.0)


def read_history_csv(path) -> tuple[list[str], list[list[float]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"history file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty history file")
        rows = []
        for lineno, row in enumerate(reader, 2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: history has no rows")
    return header, rows


def plot_loss_curve(history_path, out_path, title: str | None = None) -> Path:
    """Loss-versus-step curve from one training-history CSV."""
    header, rows = read_history_csv(history_path)
    if len(header) < 2:
        raise DataError(f"{history_path}: need step and at least one loss column")
    data = np.asarray(rows, dtype=np.float64)
    steps = data[:, 0]
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(header[1:], start=1):
        ax.plot(steps, data[:, j], label=name, linewidth=1.2)
    ax.set_xlabel(header[0])
    ax.set_ylabel("loss")
    finite = data[:, 1:][np.isfinite(data[:, 1:])]
    if finite.size and finite.min() > 0:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title or Path(history_path).stem)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_path


def _show_patch(ax, pixels: np.ndarray, spacing_mm: float) -> None:
    h, w = pixels.shape
    half_w, half_h = w * spacing_mm / 2.0, h * spacing_mm / 2.0
    ax.imshow(pixels, cmap="gray", vmin=_HU_WINDOW[0], vmax=_HU_WINDOW[1],
              extent=(-half_w, half_w, half_h, -half_h), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])


def patch_grid(patches, spacing_mm: float, out_path, n_cols: int = 8,
               titles=None) -> Path:
    """Grid of grayscale patches, row-major."""
    patches = list(patches)
    if not patches:
        raise DataError("no patches to plot")
    n = len(patches)
    n_cols = min(n_cols, n)
    n_rows = math.ceil(n / n_cols)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.4 * n_cols, 1.4 * n_rows), squeeze=False)
    for i in range(n_rows * n_cols):
        ax = axes[i // n_cols][i % n_cols]
        ax.axis("off")
        if i < n:
            _show_patch(ax, np.asarray(patches[i]), spacing_mm)
            if titles is not None:
                ax.set_title(str(titles[i]), fontsize=6)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_path


def pair_grid(inputs, refined, spacing_mm: float, out_path,
              n_pairs: int = 8) -> Path:
    """Top row input patches, bottom row their refined counterparts."""
    inputs, refined = list(inputs), list(refined)
    if len(inputs) != len(refined):
        raise DataError("input and refined patch counts differ")
    if not inputs:
        raise DataError("no patches to plot")
    n = min(n_pairs, len(inputs))
    fig, axes = plt.subplots(2, n, figsize=(1.4 * n, 2.9), squeeze=False)
    for i in range(n):
        _show_patch(axes[0][i], np.asarray(inputs[i]), spacing_mm)
        _show_patch(axes[1][i], np.asarray(refined[i]), spacing_mm)
    axes[0][0].set_ylabel("input", fontsize=8)
    axes[1][0].set_ylabel("refined", fontsize=8)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_path


def _ellipse_xy(semi_a: float, semi_b: float, cx: float, cy: float,
                theta: float, n: int = 128):
    t = np.linspace(0.0, 2.0 * math.pi, n)
    x = semi_a * np.cos(t)
    y = semi_b * np.sin(t)
    c, s = math.cos(theta), math.sin(theta)
    return cx + c * x - s * y, cy + s * x + c * y


def overlay_grid(patches, labels, spacing_mm: float, out_path,
                 n_cols: int = 8) -> Path:
    """Patches with measured lumen (solid) and outer wall (dashed) ellipses."""
    patches, labels = list(patches), list(labels)
    if len(patches) != len(labels):
        raise DataError("patch and label counts differ")
    if not patches:
        raise DataError("no patches to plot")
    n = len(patches)
    n_cols = min(n_cols, n)
    n_rows = math.ceil(n / n_cols)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.4 * n_cols, 1.4 * n_rows), squeeze=False)
    for i in range(n_rows * n_cols):
        ax = axes[i // n_cols][i % n_cols]
        ax.axis("off")
        if i >= n:
            continue
        _show_patch(ax, np.asarray(patches[i]), spacing_mm)
        label = labels[i]
        if label is None or not isinstance(label, AirwayLabel):
            continue
        if all(math.isfinite(v) for v in (label.R_A, label.R_B, label.C_x,
                                          label.C_y, label.theta)):
            x, y = _ellipse_xy(label.R_A, label.R_B, label.C_x, label.C_y,
                               label.theta)
            ax.plot(x, y, color="tab:red", linewidth=0.9)
        if all(math.isfinite(v) for v in (label.W_A, label.W_B)):
            x, y = _ellipse_xy(label.W_A, label.W_B, label.C_x, label.C_y,
                               label.theta)
            ax.plot(x, y, color="tab:cyan", linewidth=0.9, linestyle="--")
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out_path
