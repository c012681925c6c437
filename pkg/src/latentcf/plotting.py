"""Matplotlib figures for the report directory.

Everything renders with the Agg backend and fixed metadata so the PNG bytes
depend only on the data.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_transfer_matrices(matrices: dict, path: str | Path) -> Path:
    """One annotated ASR heat map per attack method, side by side."""
    n = len(matrices)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    for ax, (method, m) in zip(axes[0], matrices.items()):
        k = len(m.detectors)
        vals = np.full((k, k), np.nan)
        for i, s in enumerate(m.detectors):
            for j, e in enumerate(m.detectors):
                v = m.cells[(s, e)]
                if v is not None:
                    vals[i, j] = 100.0 * v
        ax.imshow(vals, vmin=0, vmax=100, cmap="viridis")
        for i in range(k):
            for j in range(k):
                txt = "n/a" if np.isnan(vals[i, j]) else f"{vals[i, j]:.0f}"
                ax.text(j, i, txt, ha="center", va="center", color="w" if vals[i, j] < 60 else "k", fontsize=8)
        ax.set_xticks(range(k), m.detectors, fontsize=7)
        ax.set_yticks(range(k), m.detectors, fontsize=7)
        ax.set_xlabel("evaluated on")
        ax.set_title(method)
    axes[0][0].set_ylabel("crafted on")
    fig.tight_layout()
    return _save(fig, path)


def plot_level_ablation(asr: dict, path: str | Path) -> Path:
    levels = list(asr)
    vals = [100.0 * (asr[k] if asr[k] is not None else np.nan) for k in levels]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(levels, vals, color=["#4c72b0", "#55a868", "#c44e52", "#8172b2"][: len(levels)])
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 105)
    ax.set_title("level-wise mask ablation")
    fig.tight_layout()
    return _save(fig, path)


def plot_strength_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    eps = [r["epsilon"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(4.5, 3))
    ax1.plot(eps, [100.0 * (r["asr"] if r["asr"] is not None else np.nan) for r in rows], "o-", color="C0")
    ax1.set_xlabel("latent step size")
    ax1.set_ylabel("ASR (%)", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(eps, [r["id_similarity"] for r in rows], "s--", color="C1")
    ax2.set_ylabel("ID similarity", color="C1")
    ax1.set_title("strength vs. quality")
    fig.tight_layout()
    return _save(fig, path)


def plot_latent_delta(profile: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    width = 0.8 / max(len(profile), 1)
    for i, (tag, vals) in enumerate(profile.items()):
        ax.bar(np.arange(3) + i * width, vals, width, label=tag)
    ax.set_xticks(np.arange(3) + 0.4 - width / 2, ["S", "M", "D"])
    ax.set_ylabel("mean |ΔW|")
    ax.legend(fontsize=7)
    ax.set_title("latent change per level")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(curve: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    steps = [c["step"] for c in curve]
    for key in ("total", "mse", "lpips", "id"):
        ax.plot(steps, [max(c[key], 1e-12) for c in curve], label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    ax.set_title("encoder fine-tuning")
    fig.tight_layout()
    return _save(fig, path)
