"""Adaptation losses: BN-statistic alignment, entropy, confidence-weighted pseudo-label."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .bn_preadapt import BNStatVector
from .pseudo_label import ReliableLabelBundle, entropy_map

PROB_EPS = 1e-7
# iteration-0 target magnitudes of w*L for (BNS, pseudo, entropy)
CALIBRATION_RATIO = (1.0, 0.01, 0.1)
CONFIDENCE_SOURCES = ("preadapted_model", "target_model")


@dataclass
class LossConfig:
    w_ent: float = 1.0
    w_bns: float = 1.0
    w_pseu: float = 10.0
    vartheta: float = 0.2
    confidence_source: str = "preadapted_model"

    def __post_init__(self):
        weights = (self.w_ent, self.w_bns, self.w_pseu)
        if any(w < 0 for w in weights):
            raise ValueError(f"loss weights must be >= 0, got {weights}")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one loss weight must be positive")
        if self.vartheta <= 0:
            raise ValueError("vartheta must be > 0")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ValueError(f"unknown confidence source {self.confidence_source!r}")


def bns_loss(source_stats: BNStatVector, target_stats: BNStatVector) -> torch.Tensor:
    """Sum over layers of L2 distances between means and between variances."""
    if len(source_stats) != len(target_stats):
        raise ValueError(f"layer count mismatch: {len(source_stats)} vs {len(target_stats)}")
    total = 0.0
    for mu_s, var_s, mu_t, var_t in zip(source_stats.means, source_stats.variances,
                                        target_stats.means, target_stats.variances):
        if mu_s.shape != mu_t.shape:
            raise ValueError(f"channel mismatch {tuple(mu_s.shape)} vs {tuple(mu_t.shape)}")
        total = total + torch.linalg.vector_norm(mu_s.to(mu_t) - mu_t) \
            + torch.linalg.vector_norm(var_s.to(var_t) - var_t)
    return torch.as_tensor(total)


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel Shannon entropy of softmax outputs (class axis ``-3``)."""
    return entropy_map(probs).mean()


def _pseudo_single(probs, target, reliable, confidence, vartheta):
    n_reliable = reliable.sum()
    if n_reliable == 0:
        return probs.sum() * 0.0
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).sum(dim=0)
    weighted = (bce * confidence)[reliable].sum()
    h, w = reliable.shape
    # vartheta / theta with theta = HW / |reliable|
    return vartheta * n_reliable.to(probs.dtype) / (h * w) * weighted


def pseudo_label_loss(target_probs: torch.Tensor, bundle: ReliableLabelBundle,
                      cfg: LossConfig) -> torch.Tensor:
    """Confidence-weighted binary cross-entropy on reliable pixels.

    Accepts a single ``C x H x W`` prediction or a batch, in which case the
    per-image losses are averaged. Images without reliable pixels give 0.
    """
    if cfg.confidence_source == "target_model":
        confidence = target_probs.detach().max(dim=-3).values
    else:
        confidence = bundle.confidence
    confidence = confidence.to(target_probs.dtype)
    target = bundle.hard_labels.to(target_probs.dtype)
    reliable = bundle.reliable_pixels
    if target_probs.dim() == 3:
        return _pseudo_single(target_probs, target, reliable, confidence, cfg.vartheta)
    losses = [_pseudo_single(*args, cfg.vartheta)
              for args in zip(target_probs, target, reliable, confidence)]
    return torch.stack(losses).mean()


def total_loss(l_ent, l_bns, l_pseu, cfg: LossConfig):
    return cfg.w_ent * l_ent + cfg.w_bns * l_bns + cfg.w_pseu * l_pseu


def _one_sig_fig(x: float) -> float:
    return float(f"{x:.1g}")


def calibrate_loss_weights(l_bns: float, l_pseu: float, l_ent: float,
                           defaults=(1.0, 1.0, 10.0)) -> dict:
    """Weights that bring the iteration-0 ``w*L`` values to BNS : pseudo : entropy = 1 : 0.01 : 0.1.

    Each weight is rounded to one significant figure. ``defaults`` is
    ``(w_ent, w_bns, w_pseu)`` and is used for any component whose
    iteration-0 value is not positive.
    """
    d_ent, d_bns, d_pseu = defaults
    r_bns, r_pseu, r_ent = CALIBRATION_RATIO

    def weight(loss, ratio, default):
        loss = float(loss)
        if not (loss > 0 and math.isfinite(loss)):
            return float(default)
        return _one_sig_fig(ratio / loss)

    return {"w_ent": weight(l_ent, r_ent, d_ent),
            "w_bns": weight(l_bns, r_bns, d_bns),
            "w_pseu": weight(l_pseu, r_pseu, d_pseu)}
