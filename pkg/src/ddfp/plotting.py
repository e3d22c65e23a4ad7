"""Static figures written next to the CSV/JSON outputs (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .spectral import centered_log_amplitude  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_prompt_panel(image, prompt_map, prompted, path, title: str = "") -> Path:
    """Original image, centred log-amplitude prompt, prompted image."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(np.asarray(image), cmap="gray")
    axes[0].set_title("image")
    im = axes[1].imshow(centered_log_amplitude(prompt_map).numpy(), cmap="viridis")
    axes[1].set_title("prompt (log, centred)")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[2].imshow(np.asarray(prompted), cmap="gray")
    axes[2].set_title("prompted")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_class_dice(per_class: dict, path, title: str = "Dice per class") -> Path:
    classes = [str(c) for c in per_class]
    values = [v["dice"] if v["dice"] is not None else 0.0 for v in per_class.values()]
    fig, ax = plt.subplots(figsize=(1.2 * len(classes) + 2, 3))
    ax.bar(classes, values, color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_xlabel("class")
    ax.set_ylabel("Dice")
    ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(1.0 * len(ok) + 2.5, 3.2))
    ax.bar([r["name"] for r in ok], [r["average"] for r in ok], color="tab:orange")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean foreground Dice")
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
