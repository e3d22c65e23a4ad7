"""Small fixtures-by-function shared across test modules."""
import numpy as np

from ddfp.data import VolumeRecord
from ddfp.models import SegModelSpec

TINY_SPEC = SegModelSpec(in_channels=1, class_count=3, base_width=4, depth=3)


def tiny_volumes(n=3, depth=3, size=16, classes=3, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    vols = []
    for i in range(n):
        labels = np.zeros((depth, size, size), dtype=np.uint8)
        for c in range(1, classes):
            y, x = rng.integers(0, size - 5, size=2)
            labels[:, y:y + 5, x:x + 5] = c
        voxels = (0.2 + 0.3 * labels + 0.05 * rng.standard_normal(labels.shape)).astype(np.float32)
        vols.append(VolumeRecord(f"t{i}", voxels, labels, (2.0, 1.0, 1.0), "T", split))
    return vols
