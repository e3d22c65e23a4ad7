"""Forward-only recalibration of batch-norm running statistics on target data."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, List

import torch
from torch import nn


@dataclass
class BNStatVector:
    means: List[torch.Tensor]
    variances: List[torch.Tensor]

    def __post_init__(self):
        if len(self.means) != len(self.variances):
            raise ValueError("means and variances must have the same layer count")

    def __len__(self):
        return len(self.means)

    def detach(self) -> "BNStatVector":
        return BNStatVector([m.detach().clone() for m in self.means],
                            [v.detach().clone() for v in self.variances])

    def to_lists(self) -> dict:
        return {"means": [m.tolist() for m in self.means],
                "variances": [v.tolist() for v in self.variances]}


@dataclass
class PreadaptConfig:
    rho: float = 0.1
    warmup_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if int(self.warmup_epochs) != self.warmup_epochs or self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be a positive integer, got {self.warmup_epochs}")


def bn_layers(model: nn.Module) -> List[nn.modules.batchnorm._BatchNorm]:
    """Normalization layers in module-traversal order."""
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def running_stats(model: nn.Module) -> BNStatVector:
    layers = bn_layers(model)
    return BNStatVector([l.running_mean.detach().clone() for l in layers],
                        [l.running_var.detach().clone() for l in layers])


def load_running_stats(model: nn.Module, stats: BNStatVector) -> None:
    layers = bn_layers(model)
    if len(layers) != len(stats):
        raise ValueError(f"model has {len(layers)} norm layers, stats have {len(stats)}")
    with torch.no_grad():
        for layer, mean, var in zip(layers, stats.means, stats.variances):
            layer.running_mean.copy_(mean)
            layer.running_var.copy_(var)


def update_bn_stats(current: BNStatVector, batch: BNStatVector, rho: float) -> BNStatVector:
    """Momentum blend ``(1 - rho) * current + rho * batch`` per layer."""
    if len(current) != len(batch):
        raise ValueError(f"layer count mismatch: {len(current)} vs {len(batch)}")
    means = [(1.0 - rho) * m + rho * b for m, b in zip(current.means, batch.means)]
    variances = [(1.0 - rho) * v + rho * b for v, b in zip(current.variances, batch.variances)]
    return BNStatVector(means, variances)


class BatchStatRecorder:
    """Captures per-channel mean / biased variance at the input of every norm layer.

    Statistics are taken over (batch, height, width) and stay attached to the
    autograd graph, so they can feed a differentiable loss.
    """

    def __init__(self, model: nn.Module):
        self.layers = bn_layers(model)
        self.means: List[torch.Tensor] = []
        self.variances: List[torch.Tensor] = []
        self._handles = []

    def _hook(self, module, inputs):
        x = inputs[0]
        dims = [d for d in range(x.dim()) if d != 1]
        self.means.append(x.mean(dim=dims))
        self.variances.append(x.var(dim=dims, unbiased=False))

    def __enter__(self):
        self._handles = [l.register_forward_pre_hook(self._hook) for l in self.layers]
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []

    def clear(self):
        self.means, self.variances = [], []

    def stats(self) -> BNStatVector:
        if len(self.means) != len(self.layers):
            raise RuntimeError(
                f"recorded {len(self.means)} layers, expected {len(self.layers)}; "
                "was exactly one forward pass run?")
        return BNStatVector(list(self.means), list(self.variances))


@torch.no_grad()
def preadapt_model(source_model: nn.Module, target_batches: Iterable[torch.Tensor],
                   cfg: PreadaptConfig) -> nn.Module:
    """Copy of ``source_model`` with running statistics blended towards the target data.

    ``target_batches`` is re-iterated once per warm-up epoch, so pass a
    re-iterable (list or DataLoader), not a generator. The copy runs in eval
    mode; the update after every batch is applied by us with ``cfg.rho``
    rather than by the layers' own momentum.
    """
    model = copy.deepcopy(source_model)
    if not bn_layers(model):
        raise ValueError("model has no normalization layers to pre-adapt")
    was_training = model.training
    model.eval()
    stats = running_stats(model)
    n_batches = 0
    for _ in range(int(cfg.warmup_epochs)):
        for batch in target_batches:
            if isinstance(batch, (tuple, list)):
                batch = batch[0]
            with BatchStatRecorder(model) as rec:
                model(batch)
            stats = update_bn_stats(stats, rec.stats(), cfg.rho)
            load_running_stats(model, stats)
            n_batches += 1
    if n_batches == 0:
        raise ValueError("empty target batch stream")
    model.train(was_training)
    return model
