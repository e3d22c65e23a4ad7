"""Slice-wise inference, volume reassembly and metric reports for a trained model."""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np
import torch
from torch import nn

from .data import SliceDataset, VolumeRecord, reassemble_volume
from .metrics import MetricReport


@torch.no_grad()
def predict_volumes(model: nn.Module, volumes: Iterable[VolumeRecord],
                    prompt: Optional[nn.Module] = None, batch_size: int = 32) -> dict:
    """Label volumes predicted slice by slice; ``prompt`` is applied first if given."""
    volumes = list(volumes)
    ds = SliceDataset(volumes, drop_empty=False)
    model.eval()
    if prompt is not None:
        prompt.eval()
    preds = []
    for start in range(0, len(ds), batch_size):
        images = ds.images[start:start + batch_size]
        if prompt is not None:
            images = prompt(images)
        preds.append(model(images).argmax(1).numpy().astype(np.uint8))
    labels = np.concatenate(preds) if preds else np.zeros((0,), np.uint8)
    depths = {v.volume_id: v.voxels.shape[0] for v in volumes}
    return reassemble_volume(((vid, z, labels[i]) for i, (vid, z) in enumerate(ds.index)), depths)


def evaluate_model(model: nn.Module, volumes: Iterable[VolumeRecord],
                   prompt: Optional[nn.Module] = None, run_id: str = "",
                   config_hash: str = "") -> MetricReport:
    volumes = list(volumes)
    class_count = model.spec.class_count
    for v in volumes:
        if v.labels.max() >= class_count:
            raise ValueError(f"{v.volume_id}: label {int(v.labels.max())} exceeds model class count {class_count}")
    preds = predict_volumes(model, volumes, prompt)
    report = MetricReport(class_count, run_id=run_id, config_hash=config_hash)
    for v in volumes:
        report.add_volume(v.volume_id, preds[v.volume_id], v.labels, v.spacing)
    return report
