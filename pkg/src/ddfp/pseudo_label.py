"""Entropy-filtered pseudo-labels from softmax predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

EPS = 1e-12


@dataclass
class FilterConfig:
    class_keep_fraction: Union[float, Sequence[float]] = 0.4
    global_threshold: float = 0.4

    def __post_init__(self):
        fractions = self.class_keep_fraction
        if isinstance(fractions, (int, float)):
            fractions = [fractions]
        for t in fractions:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"class keep fraction {t} outside [0, 1]")
        if self.global_threshold < 0:
            raise ValueError("global entropy threshold must be >= 0")

    def fractions(self, class_count: int) -> list:
        if isinstance(self.class_keep_fraction, (int, float)):
            return [float(self.class_keep_fraction)] * class_count
        fractions = [float(t) for t in self.class_keep_fraction]
        if len(fractions) != class_count:
            raise ValueError(f"{len(fractions)} keep fractions for {class_count} classes")
        return fractions


@dataclass
class ReliableLabelBundle:
    hard_labels: torch.Tensor     # one-hot, (..., C, H, W)
    entropy: torch.Tensor         # (..., H, W)
    reliable_mask: torch.Tensor   # one-hot restricted to reliable pixels, (..., C, H, W)
    confidence: torch.Tensor      # max probability, (..., H, W)

    @property
    def reliable_pixels(self) -> torch.Tensor:
        return self.reliable_mask.sum(dim=-3) > 0


def entropy_map(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel Shannon entropy (natural log) over the class axis ``-3``."""
    return -(probs * torch.log(probs.clamp_min(EPS))).sum(dim=-3)


def keep_threshold(entropies: torch.Tensor, fraction: float) -> float:
    """Entropy cut-off that keeps the ``ceil(fraction * n)`` lowest values under ``<``.

    Returns the value at 0-based rank ``ceil(fraction * n)`` of the sorted
    entropies, or ``inf`` when that rank is past the end. Pixels tied with
    the cut-off are dropped.
    """
    n = entropies.numel()
    if n == 0:
        return float("-inf")
    keep = math.ceil(round(fraction * n, 9))
    if keep >= n:
        return float("inf")
    return torch.sort(entropies.flatten()).values[keep].item()


def _select_single(probs: torch.Tensor, fractions, global_threshold: float) -> ReliableLabelBundle:
    n_classes = probs.shape[0]
    ent = entropy_map(probs)
    confidence, argmax = probs.max(dim=0)
    hard = F.one_hot(argmax, n_classes).permute(2, 0, 1).to(probs.dtype)
    reliable = torch.zeros_like(ent, dtype=torch.bool)
    for c in range(n_classes):
        in_class = argmax == c
        tau = keep_threshold(ent[in_class], fractions[c])
        reliable |= in_class & (ent < tau)
    reliable &= ent < global_threshold
    return ReliableLabelBundle(hard, ent, hard * reliable.unsqueeze(0).to(probs.dtype), confidence)


def select_reliable(probs: torch.Tensor, cfg: FilterConfig) -> ReliableLabelBundle:
    """Pseudo-labels for one ``C x H x W`` prediction or a ``B x C x H x W`` batch.

    Class quantiles are taken per image. A class with no argmax pixels in an
    image simply contributes no reliable pixels.
    """
    probs = probs.detach()
    fractions = cfg.fractions(probs.shape[-3])
    if probs.dim() == 3:
        return _select_single(probs, fractions, cfg.global_threshold)
    parts = [_select_single(p, fractions, cfg.global_threshold) for p in probs]
    return ReliableLabelBundle(
        torch.stack([b.hard_labels for b in parts]),
        torch.stack([b.entropy for b in parts]),
        torch.stack([b.reliable_mask for b in parts]),
        torch.stack([b.confidence for b in parts]),
    )
