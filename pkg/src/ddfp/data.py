"""Volume I/O, preprocessing, slice datasets and the synthetic two-domain benchmark.

On-disk dataset layout (one directory per dataset)::

    dataset.json           {"class_count", "domain", "modality", "volumes": [...]}
    <id>.img.f32           little-endian float32, C-order D x H x W
    <id>.lbl.u8            uint8 labels, same shape
    <id>.json              {"shape", "spacing", "domain", "split"}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch.utils.data import Dataset

SPLITS = ("train", "test")
MODALITIES = ("ct", "mri", "none")


class DataError(ValueError):
    pass


@dataclass
class VolumeRecord:
    volume_id: str
    voxels: np.ndarray
    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain_tag: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.voxels.ndim != 3 or self.voxels.shape != self.labels.shape:
            raise DataError(f"{self.volume_id}: voxels {self.voxels.shape} vs labels {self.labels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"{self.volume_id}: spacing must be three positive values")
        if self.split not in SPLITS:
            raise DataError(f"{self.volume_id}: unknown split {self.split!r}")
        self.spacing = tuple(float(s) for s in self.spacing)


# ---------------------------------------------------------------- file format

def write_volume(directory, vol: VolumeRecord) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vol.voxels.astype("<f4").tofile(directory / f"{vol.volume_id}.img.f32")
    vol.labels.astype(np.uint8).tofile(directory / f"{vol.volume_id}.lbl.u8")
    sidecar = {"shape": list(vol.voxels.shape), "spacing": list(vol.spacing),
               "domain": vol.domain_tag, "split": vol.split}
    (directory / f"{vol.volume_id}.json").write_text(json.dumps(sidecar, indent=1))


def read_volume(directory, volume_id: str) -> VolumeRecord:
    directory = Path(directory)
    meta = json.loads((directory / f"{volume_id}.json").read_text())
    shape = tuple(meta["shape"])
    voxels = np.fromfile(directory / f"{volume_id}.img.f32", dtype="<f4")
    labels = np.fromfile(directory / f"{volume_id}.lbl.u8", dtype=np.uint8)
    if voxels.size != np.prod(shape) or labels.size != np.prod(shape):
        raise DataError(f"{volume_id}: file sizes do not match shape {shape}")
    return VolumeRecord(volume_id, voxels.reshape(shape).astype(np.float32),
                        labels.reshape(shape), tuple(meta["spacing"]), meta["domain"], meta["split"])


# Importers map an external path to a VolumeRecord; only the native format ships.
IMPORTERS: Dict[str, Callable[..., VolumeRecord]] = {"native": read_volume}


def register_importer(name: str, fn: Callable[..., VolumeRecord]) -> None:
    IMPORTERS[name] = fn


def write_dataset(directory, volumes: Sequence[VolumeRecord], class_count: int,
                  domain: str = "", modality: str = "none") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for vol in volumes:
        write_volume(directory, vol)
    manifest = {"class_count": class_count, "domain": domain, "modality": modality,
                "volumes": [v.volume_id for v in volumes]}
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "dataset.json"
    if not path.exists():
        raise DataError(f"{directory} has no dataset.json")
    return json.loads(path.read_text())


def load_dataset(directory, split: Optional[str] = None) -> List[VolumeRecord]:
    manifest = read_manifest(directory)
    vols = [read_volume(directory, vid) for vid in manifest["volumes"]]
    if split is not None:
        vols = [v for v in vols if v.split == split]
    return vols


# ------------------------------------------------------------- preprocessing

@dataclass
class PreprocessConfig:
    modality: str = "none"
    window: Tuple[float, float] = (400.0, 40.0)  # (width, level) for CT
    mri_max: float = 1200.0
    size: Optional[int] = 256

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def resize_inplane(voxels: np.ndarray, labels: np.ndarray, size: int):
    if voxels.shape[1:] == (size, size):
        return voxels, labels
    img = torch.from_numpy(np.ascontiguousarray(voxels, dtype=np.float32))[:, None]
    lbl = torch.from_numpy(labels.astype(np.float32))[:, None]
    img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
    lbl = F.interpolate(lbl, size=(size, size), mode="nearest")
    return img[:, 0].numpy(), lbl[:, 0].numpy().astype(labels.dtype)


def preprocess_volume(vol: VolumeRecord, cfg: PreprocessConfig) -> VolumeRecord:
    """Intensity windowing, [0, 1] normalisation and in-plane resize.

    CT is clipped to ``level -/+ width/2``, MRI to ``[0, mri_max]``, both then
    min-max normalised. ``modality="none"`` only clips to [0, 1].
    """
    x = vol.voxels.astype(np.float32)
    if cfg.modality == "ct":
        width, level = cfg.window
        x = _minmax(np.clip(x, level - width / 2, level + width / 2))
    elif cfg.modality == "mri":
        x = _minmax(np.clip(x, 0.0, cfg.mri_max))
    else:
        x = np.clip(x, 0.0, 1.0)
    labels = vol.labels
    if cfg.size is not None:
        x, labels = resize_inplane(x, labels, cfg.size)
        x = np.clip(x, 0.0, 1.0)
    return VolumeRecord(vol.volume_id, x.astype(np.float32), labels, vol.spacing, vol.domain_tag, vol.split)


# ------------------------------------------------------------ slice datasets

class SliceDataset(Dataset):
    """2D slices of a list of volumes in (volume, slice) order.

    Items are ``(image 1 x H x W float32, label H x W int64)``; ``index[i]``
    gives the ``(volume_id, slice_index)`` of item ``i``.
    """

    def __init__(self, volumes: Iterable[VolumeRecord], drop_empty: bool = True):
        self.index: List[Tuple[str, int]] = []
        images, labels = [], []
        for vol in volumes:
            for z in range(vol.voxels.shape[0]):
                if drop_empty and not vol.labels[z].any():
                    continue
                self.index.append((vol.volume_id, z))
                images.append(vol.voxels[z])
                labels.append(vol.labels[z])
        if images:
            self.images = torch.from_numpy(np.stack(images).astype(np.float32))[:, None]
            self.labels = torch.from_numpy(np.stack(labels).astype(np.int64))
        else:
            self.images = torch.zeros(0, 1, 1, 1)
            self.labels = torch.zeros(0, 1, 1, dtype=torch.int64)

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i):
        return self.images[i], self.labels[i]


def reassemble_volume(slice_preds: Iterable[Tuple[str, int, np.ndarray]],
                      depths: Optional[Dict[str, int]] = None) -> Dict[str, np.ndarray]:
    """Stack per-slice label maps back into ``D x H x W`` volumes, keyed by volume id."""
    grouped: Dict[str, Dict[int, np.ndarray]] = {}
    for vid, z, pred in slice_preds:
        slices = grouped.setdefault(vid, {})
        if z in slices:
            raise DataError(f"{vid}: duplicate slice index {z}")
        slices[int(z)] = np.asarray(pred)
    out = {}
    for vid, slices in grouped.items():
        depth = depths[vid] if depths and vid in depths else max(slices) + 1
        missing = sorted(set(range(depth)) - set(slices))
        extra = sorted(set(slices) - set(range(depth)))
        if missing or extra:
            raise DataError(f"{vid}: missing slices {missing}, out-of-range slices {extra}")
        out[vid] = np.stack([slices[z] for z in range(depth)])
    return out


# --------------------------------------------------------- synthetic domains

@dataclass
class SynthConfig:
    n_volumes: int = 20
    depth: int = 12
    size: int = 64
    n_foreground: int = 4
    spacing: Tuple[float, float, float] = (2.0, 1.0, 1.0)
    test_fraction: float = 0.2
    noise_a: float = 0.03
    noise_b: float = 0.05
    gamma_b: float = 0.6
    bias_b: float = 0.35

    def __post_init__(self):
        if self.n_volumes < 2 or self.depth < 1 or self.size < 8:
            raise DataError("need >= 2 volumes, depth >= 1 and size >= 8")
        if not 1 <= self.n_foreground <= len(_ORGANS):
            raise DataError(f"n_foreground must lie in [1, {len(_ORGANS)}]")
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError("test_fraction must lie in (0, 1)")


# (centre y, centre x, radius z, radius y, radius x) as fractions of the volume
_ORGANS = [
    (0.42, 0.32, 0.45, 0.24, 0.20),
    (0.40, 0.72, 0.35, 0.10, 0.09),
    (0.68, 0.70, 0.35, 0.09, 0.10),
    (0.70, 0.34, 0.35, 0.12, 0.08),
]
_AIR, _BODY = 0.03, 0.42


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.mean()
    return f / (f.std() + 1e-12)


def _render_geometry(cfg: SynthConfig, rng):
    d, s = cfg.depth, cfg.size
    z, y, x = np.meshgrid(np.arange(d) + 0.5, (np.arange(s) + 0.5) / s,
                          (np.arange(s) + 0.5) / s, indexing="ij")
    labels = np.zeros((d, s, s), dtype=np.uint8)
    clean = np.full((d, s, s), _AIR, dtype=np.float64)
    body = ((y - 0.5) / 0.46) ** 2 + ((x - 0.5) / 0.47) ** 2 + 0.08 * _smooth_field(rng, (d, s, s), (2, 6, 6)) < 1
    clean[body] = _BODY + 0.04 * _smooth_field(rng, (d, s, s), (1, 3, 3))[body]

    n_blobs = int(rng.integers(2, min(4, cfg.n_foreground) + 1)) if cfg.n_foreground >= 2 else 1
    classes = np.sort(rng.choice(cfg.n_foreground, size=n_blobs, replace=False)) + 1
    for c in classes:
        cy, cx, rz, ry, rx = _ORGANS[c - 1]
        # organ contrast polarity varies per sample, so class identity is carried by shape
        inten = _BODY + rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.45)
        cy += rng.uniform(-0.05, 0.05)
        cx += rng.uniform(-0.05, 0.05)
        cz = d * rng.uniform(0.35, 0.65)
        scale = rng.uniform(0.8, 1.2, size=3)
        dist = np.sqrt(((z - cz) / (rz * d * scale[0])) ** 2
                       + ((y - cy) / (ry * scale[1])) ** 2
                       + ((x - cx) / (rx * scale[2])) ** 2)
        blob = (dist + 0.12 * _smooth_field(rng, (d, s, s), (2, 4, 4)) < 1) & body & (labels == 0)
        labels[blob] = c
        clean[blob] = inten + 0.03 * _smooth_field(rng, (d, s, s), (1, 2, 2))[blob]
    return np.clip(clean, 0.0, 1.0), labels


def _style_a(clean, cfg, rng):
    return np.clip(clean + cfg.noise_a * rng.standard_normal(clean.shape), 0.0, 1.0)


def _style_b(clean, cfg, rng):
    inv = (1.0 - clean) ** cfg.gamma_b
    bias = np.exp(cfg.bias_b * _smooth_field(rng, clean.shape, (4, 16, 16)))
    out = 0.8 * inv * bias + cfg.noise_b * rng.standard_normal(clean.shape)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic_domains(cfg: SynthConfig, seed: int, out_dir) -> Tuple[Path, Path]:
    """Paired domains sharing geometry and labels; B is an inverted, gamma-warped,
    bias-field-modulated restyling of A. Pairs share their train/test split."""
    out_dir = Path(out_dir)
    order = np.random.default_rng([seed, 0]).permutation(cfg.n_volumes)
    n_test = max(1, int(round(cfg.test_fraction * cfg.n_volumes)))
    test_ids = set(order[:n_test].tolist())
    vols_a, vols_b = [], []
    for i in range(cfg.n_volumes):
        rng = np.random.default_rng([seed, 1, i])
        clean, labels = _render_geometry(cfg, rng)
        split = "test" if i in test_ids else "train"
        vid = f"vol{i:03d}"
        vols_a.append(VolumeRecord(vid, _style_a(clean, cfg, rng).astype(np.float32), labels,
                                   cfg.spacing, "A", split))
        vols_b.append(VolumeRecord(vid, _style_b(clean, cfg, rng).astype(np.float32), labels.copy(),
                                   cfg.spacing, "B", split))
    n_classes = cfg.n_foreground + 1
    dir_a = write_dataset(out_dir / "domain_A", vols_a, n_classes, "A")
    dir_b = write_dataset(out_dir / "domain_B", vols_b, n_classes, "B")
    return dir_a, dir_b
