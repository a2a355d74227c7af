"""Figures and portable graymap slices for training runs and registrations."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_NAMES = ("moving", "fixed", "deformed", "grid")


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM, min-max scaled; a constant image is written mid-gray."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    scaled = np.full(img.shape, 128, np.uint8) if hi == lo else np.rint(255 * (img - lo) / (hi - lo)).astype(np.uint8)
    h, w = scaled.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    # magic, width, height, maxval, then exactly one whitespace byte before the pixels
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def grid_image(phi: np.ndarray, axis: int = 0, spacing: int = 4) -> np.ndarray:
    """Rasterize the mid-slice of a sampling field as a deformed line grid.

    A pixel is on a line when an in-plane field component lies within half a
    voxel of a multiple of ``spacing``; the identity field gives a regular lattice.
    """
    mid = phi.shape[1 + axis] // 2
    out = None
    for a in (a for a in range(3) if a != axis):
        c = np.take(phi[a], mid, axis=axis).astype(np.float64)
        on = np.abs(c - spacing * np.round(c / spacing)) < 0.5
        out = on if out is None else out | on
    return out.astype(np.float64)


def mid_slices(moving: np.ndarray, fixed: np.ndarray, deformed: np.ndarray, phi: np.ndarray, axis: int = 0):
    """Mid-slice images in panel order (moving, fixed, deformed, grid)."""
    mid = moving.shape[-3 + axis] // 2

    def sl(v):
        v = v[0] if v.ndim == 4 else v
        return np.take(v, mid, axis=axis)

    return [sl(moving), sl(fixed), sl(deformed), grid_image(phi, axis)]


def write_slice_pgms(out_dir, moving, fixed, deformed, phi, axis: int = 0) -> list:
    out = Path(out_dir)
    paths = []
    for name, img in zip(PANEL_NAMES, mid_slices(moving, fixed, deformed, phi, axis)):
        p = out / f"slice_{name}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths


def registration_panel(path, moving, fixed, deformed, phi, axis: int = 0, title: str = "") -> Path:
    """Four-panel PNG: moving, fixed, deformed image and deformation grid."""
    imgs = mid_slices(moving, fixed, deformed, phi, axis)
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.4))
    for ax, name, img in zip(axes[:3], PANEL_NAMES, imgs):
        ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.set_title(name)
    mid = phi.shape[1 + axis] // 2
    plane = [a for a in range(3) if a != axis]
    u, v = (np.take(phi[a], mid, axis=axis) for a in plane)
    ax = axes[3]
    step = max(1, u.shape[0] // 16)
    for i in range(0, u.shape[0], step):
        ax.plot(v[i, :], u[i, :], color="k", lw=0.6)
    for j in range(0, u.shape[1], step):
        ax.plot(v[:, j], u[:, j], color="k", lw=0.6)
    ax.set_xlim(-0.5, u.shape[1] - 0.5)
    ax.set_ylim(u.shape[0] - 0.5, -0.5)
    ax.set_aspect("equal")
    ax.set_title("grid")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def loss_curve(path, history: list, evals: list | None = None) -> Path:
    """Total and per-term training losses against step, with held-out Dice on a twin axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [h["step"] for h in history]
    ax.plot(steps, [h["total"] for h in history], color="k", lw=1.2, label="total")
    for key in ("mf/sim", "mf/sup", "mf/smo"):
        if history and key in history[0]:
            ax.plot(steps, [h[key] for h in history], lw=0.8, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if history and min(h["total"] for h in history) > 0 else "linear")
    if evals:
        ax2 = ax.twinx()
        ax2.plot([e["step"] for e in evals], [e["val_dice"] for e in evals], "o-", color="tab:red", label="dice")
        ax2.set_ylabel("held-out dice")
        ax2.set_ylim(0, 1)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def evaluation_figure(path, report) -> Path:
    """Per-case Dice before and after registration plus the HD95 distribution."""
    cases = report.cases
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(cases))
    before = [np.mean(c.dice_unreg) for c in cases]
    after = [np.mean(c.dice) for c in cases]
    a1.bar(x - 0.2, before, width=0.4, color="0.6", label="unregistered")
    a1.bar(x + 0.2, after, width=0.4, color="tab:blue", label="registered")
    a1.set_xticks(x)
    a1.set_xticklabels([c.case for c in cases], rotation=90, fontsize=6)
    a1.set_ylim(0, 1)
    a1.set_ylabel("mean dice")
    a1.legend(fontsize=8)
    h_before = [h for c in cases for h in c.hd95_unreg if not math.isnan(h)]
    h_after = [h for c in cases for h in c.hd95 if not math.isnan(h)]
    if h_before or h_after:
        a2.boxplot([h_before or [np.nan], h_after or [np.nan]])
        a2.set_xticks([1, 2])
        a2.set_xticklabels(["unregistered", "registered"])
    a2.set_ylabel("hd95 (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
