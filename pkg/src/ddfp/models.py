"""U-Net backbone, style/content parameter split, source training and checkpoints."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader

from .bn_preadapt import running_stats

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ddfp-checkpoint/1"
STYLE_LAYER_COUNT = 4


@dataclass
class SegModelSpec:
    in_channels: int = 1
    class_count: int = 5
    base_width: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be positive")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.depth < STYLE_LAYER_COUNT - 1:
            raise ValueError(f"depth must be >= {STYLE_LAYER_COUNT - 1} to expose four encoder convs")


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class UNet(nn.Module):
    """Encoder ``encoders[0..depth]`` (stage 0 is the stem), mirrored decoder, 1x1 head."""

    def __init__(self, spec: SegModelSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_width * 2 ** i for i in range(spec.depth + 1)]
        self.encoders = nn.ModuleList(
            [ConvBlock(spec.in_channels, widths[0])]
            + [ConvBlock(widths[i], widths[i + 1]) for i in range(spec.depth)])
        self.upsamples = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(spec.depth))])
        self.decoders = nn.ModuleList(
            [ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(spec.depth))])
        self.head = nn.Conv2d(widths[0], spec.class_count, 1)

    def forward(self, x):
        factor = 2 ** self.spec.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"input {tuple(x.shape[-2:])} not divisible by {factor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.upsamples, self.decoders):
            x = dec(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


def build_unet(spec: SegModelSpec, seed: Optional[int] = None) -> UNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return UNet(spec)
    return UNet(spec)


def style_layer_names() -> List[str]:
    """Module names of the four style layers: stem conv + first conv of encoder stages 1-3."""
    names = []
    for i in range(STYLE_LAYER_COUNT):
        names += [f"encoders.{i}.conv1", f"encoders.{i}.bn1"]
    return names


@dataclass
class ParamPartition:
    style: List[nn.Parameter] = field(default_factory=list)
    content: List[nn.Parameter] = field(default_factory=list)
    style_names: List[str] = field(default_factory=list)
    content_names: List[str] = field(default_factory=list)


def partition_parameters(model: nn.Module, trainable: Sequence[str]) -> ParamPartition:
    """Split parameters by module-name prefix (``""`` matches everything); the rest is content."""
    part = ParamPartition()
    prefixes = [p.rstrip(".") + "." if p else "" for p in trainable]
    for name, param in model.named_parameters():
        if any(name.startswith(p) for p in prefixes):
            part.style.append(param)
            part.style_names.append(name)
        else:
            part.content.append(param)
            part.content_names.append(name)
    return part


def partition_style_content(model: nn.Module) -> ParamPartition:
    names = dict(model.named_modules())
    missing = [n for n in style_layer_names() if n not in names]
    if missing:
        raise ValueError(f"model lacks the four encoder convs: missing {missing}")
    return partition_parameters(model, style_layer_names())


def freeze_content(model: nn.Module, partition: ParamPartition) -> None:
    for p in partition.content:
        p.requires_grad_(False)
    for p in partition.style:
        p.requires_grad_(True)


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - mean soft Dice over classes, from logits ``B x C x H x W`` and labels ``B x H x W``."""
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(labels, logits.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def segmentation_loss(logits, labels):
    return F.cross_entropy(logits, labels) + soft_dice_loss(logits, labels)


def train_source(model: nn.Module, loader: DataLoader, epochs: int, lr: float = 1e-3,
                 weight_decay: float = 5e-4, log_fn=None) -> list:
    """Supervised CE + soft-Dice training with Adam. Returns the per-epoch log."""
    n_classes = model.spec.class_count
    history = []
    if epochs <= 0:
        return history
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    model.train()
    for epoch in range(epochs):
        total, inter, denom, n = 0.0, 0.0, 0.0, 0
        for images, labels in loader:
            if labels.max() >= n_classes or labels.min() < 0:
                raise ValueError(f"label values must lie in [0, {n_classes})")
            opt.zero_grad()
            logits = model(images)
            loss = segmentation_loss(logits, labels)
            loss.backward()
            opt.step()
            total += loss.item() * len(images)
            n += len(images)
            with torch.no_grad():
                pred = logits.argmax(1)
                for c in range(1, n_classes):
                    p, g = pred == c, labels == c
                    inter += 2 * (p & g).sum().item()
                    denom += p.sum().item() + g.sum().item()
        rec = {"epoch": epoch + 1, "loss": total / max(n, 1),
               "train_dice": inter / denom if denom else 1.0}
        history.append(rec)
        log.info("source epoch %d loss %.4f dice %.4f", rec["epoch"], rec["loss"], rec["train_dice"])
        if log_fn is not None:
            log_fn(rec)
    model.eval()
    return history


def save_checkpoint(path, model: UNet, meta: Optional[dict] = None, prompt: Optional[nn.Module] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "spec": asdict(model.spec),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "bn_stats": running_stats(model).to_lists(),
        "meta": dict(meta or {}),
    }
    if prompt is not None:
        archive["prompt"] = {
            "config": {"height": prompt.height, "width": prompt.width,
                       "alpha": prompt.alpha, "mode": prompt.mode},
            "state_dict": {k: v.detach().cpu().clone() for k, v in prompt.state_dict().items()},
        }
    torch.save(archive, path)
    return path


def load_checkpoint(path):
    """Returns ``(model, meta, prompt_or_None)``; the model is in eval mode."""
    from .prompt import PromptGenerator

    archive = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    model = UNet(SegModelSpec(**archive["spec"]))
    model.load_state_dict(archive["state_dict"])
    model.eval()
    prompt = None
    if "prompt" in archive:
        prompt = PromptGenerator(**archive["prompt"]["config"])
        prompt.load_state_dict(archive["prompt"]["state_dict"])
        prompt.eval()
    return model, archive["meta"], prompt
