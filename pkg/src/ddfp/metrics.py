"""3D Dice and average symmetric surface distance, plus run reports.

Conventions for empty classes (all flagged in reports):
  * absent from both prediction and ground truth: Dice 1.0, left out of Dice means
  * absent from exactly one of them: Dice 0.0, counted in Dice means
  * ASD is missing (None) whenever either surface is empty and is left out of ASD means
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _check_shapes(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice_per_class(pred, gt, class_count: int) -> np.ndarray:
    """Dice for classes ``1..class_count-1`` (index ``c-1``); NaN-free, see module notes."""
    pred, gt = _check_shapes(pred, gt)
    out = np.empty(class_count - 1)
    for c in range(1, class_count):
        p, g = pred == c, gt == c
        denom = p.sum() + g.sum()
        out[c - 1] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, g).sum() / denom
    return out


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one six-connected neighbour outside the mask
    (the volume border counts as outside)."""
    mask = mask.astype(bool)
    if mask.ndim == 2:
        mask = mask[None]
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def _directed_mean(src_surface, dst_surface, spacing) -> float:
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return float(dist[src_surface].mean())


def asd_binary(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Mean of the two directed mean surface distances; None if either surface is empty."""
    sp, sg = surface(pred_mask), surface(gt_mask)
    if not sp.any() or not sg.any():
        return None
    spacing = tuple(float(s) for s in spacing)
    return 0.5 * (_directed_mean(sp, sg, spacing) + _directed_mean(sg, sp, spacing))


def asd_per_class(pred, gt, spacing, class_count: int) -> List[Optional[float]]:
    pred, gt = _check_shapes(pred, gt)
    if any(s <= 0 for s in spacing):
        raise ValueError("spacing must be positive")
    return [asd_binary(pred == c, gt == c, spacing) for c in range(1, class_count)]


@dataclass
class MetricReport:
    class_count: int
    per_volume: List[dict] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    run_id: str = ""
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def add_volume(self, volume_id: str, pred, gt, spacing) -> None:
        try:
            dice = dice_per_class(pred, gt, self.class_count)
            asd = asd_per_class(pred, gt, spacing, self.class_count)
        except ValueError as exc:
            self.flags.append(f"{volume_id}: {exc}")
            return
        gt, pred = np.asarray(gt), np.asarray(pred)
        for c in range(1, self.class_count):
            in_gt, in_pred = bool((gt == c).any()), bool((pred == c).any())
            self.per_volume.append({"volume": volume_id, "class": c, "dice": float(dice[c - 1]),
                                    "asd": asd[c - 1], "counted": in_gt or in_pred})
            if not in_gt and not in_pred:
                self.flags.append(f"{volume_id}/class {c}: absent in prediction and ground truth")
            elif not in_gt:
                self.flags.append(f"{volume_id}/class {c}: predicted but absent in ground truth")
            elif not in_pred:
                self.flags.append(f"{volume_id}/class {c}: missed entirely")

    def per_class_mean(self) -> Dict[int, dict]:
        out = {}
        for c in range(1, self.class_count):
            rows = [r for r in self.per_volume if r["class"] == c and r["counted"]]
            dices = [r["dice"] for r in rows]
            asds = [r["asd"] for r in rows if r["asd"] is not None]
            out[c] = {"dice": float(np.mean(dices)) if dices else None,
                      "asd": float(np.mean(asds)) if asds else None}
        return out

    def overall(self) -> dict:
        means = self.per_class_mean().values()
        dices = [m["dice"] for m in means if m["dice"] is not None]
        asds = [m["asd"] for m in means if m["asd"] is not None]
        return {"dice": float(np.mean(dices)) if dices else None,
                "asd": float(np.mean(asds)) if asds else None}

    @property
    def mean_dice(self) -> float:
        return self.overall()["dice"]

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "config_hash": self.config_hash,
                "per_volume": self.per_volume,
                "per_class_mean": {str(c): v for c, v in self.per_class_mean().items()},
                "overall": self.overall(), "flags": self.flags, "meta": self.meta}

    def write(self, directory, stem: str = "report") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1))
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dice", "asd"])
            for c, m in self.per_class_mean().items():
                w.writerow([c, _fmt(m["dice"]), _fmt(m["asd"])])
            ov = self.overall()
            w.writerow(["Average", _fmt(ov["dice"]), _fmt(ov["asd"])])
        return directory / f"{stem}.json"


def _fmt(x):
    return "" if x is None else repr(float(x))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
