"""Source-free adaptation: BN pre-adaptation, then joint training of the frequency
prompt and the style layers on prompted target images."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch
from torch import nn

from .bn_preadapt import BatchStatRecorder, PreadaptConfig, preadapt_model, running_stats
from .data import SliceDataset, VolumeRecord
from .evaluate import evaluate_model
from .losses import LossConfig, bns_loss, calibrate_loss_weights, entropy_loss, pseudo_label_loss, total_loss
from .metrics import config_hash
from .models import freeze_content, partition_parameters, partition_style_content, save_checkpoint
from .prompt import PROMPT_INITS, PROMPT_MODES, PromptGenerator
from .pseudo_label import FilterConfig, select_reliable

log = logging.getLogger(__name__)

MODEL_SOURCES = ("source", "preadapted")


class ConfigError(ValueError):
    pass


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptationConfig:
    rho: float = 0.1
    warmup_epochs: int = 10
    alpha: float = 0.2
    class_keep_fraction: Union[float, List[float]] = 0.4
    global_threshold: float = 0.4
    vartheta: float = 0.2
    # "auto" calibrates at iteration 0; otherwise [w_ent, w_bns, w_pseu]
    loss_weights: Union[str, List[float]] = "auto"
    default_loss_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 10.0])
    epochs: int = 5
    lr: float = 5e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    use_bns: bool = True
    use_pseu: bool = True
    use_ent: bool = True
    prompt_mode: str = "data_freq"
    prompt_init: str = "zeros"
    init_from: str = "preadapted"
    pseudo_from: str = "preadapted"
    trainable_layers: Union[str, List[str]] = "style"
    confidence_source: str = "preadapted_model"

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown adaptation config keys: {unknown}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        try:
            PreadaptConfig(self.rho, self.warmup_epochs)
            FilterConfig(self.class_keep_fraction, self.global_threshold)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.vartheta <= 0:
            raise ConfigError("vartheta must be > 0")
        if not (self.use_bns or self.use_pseu or self.use_ent):
            raise ConfigError("at least one of use_bns / use_pseu / use_ent must be enabled")
        if isinstance(self.loss_weights, str):
            if self.loss_weights != "auto":
                raise ConfigError("loss_weights must be 'auto' or [w_ent, w_bns, w_pseu]")
        elif len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be three non-negative numbers [w_ent, w_bns, w_pseu]")
        if len(self.default_loss_weights) != 3 or any(w < 0 for w in self.default_loss_weights):
            raise ConfigError("default_loss_weights must be three non-negative numbers")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.prompt_init not in PROMPT_INITS:
            raise ConfigError(f"prompt_init must be one of {PROMPT_INITS}")
        if self.init_from not in MODEL_SOURCES or self.pseudo_from not in MODEL_SOURCES:
            raise ConfigError(f"init_from / pseudo_from must be one of {MODEL_SOURCES}")
        if isinstance(self.trainable_layers, str):
            if self.trainable_layers not in ("style", "all"):
                raise ConfigError("trainable_layers must be 'style', 'all' or a list of module names")
        elif not all(isinstance(n, str) for n in self.trainable_layers):
            raise ConfigError("trainable_layers list must hold module-name strings")
        if self.confidence_source not in ("preadapted_model", "target_model"):
            raise ConfigError("confidence_source must be 'preadapted_model' or 'target_model'")

    def loss_config(self, weights: Sequence[float]) -> LossConfig:
        w_ent, w_bns, w_pseu = weights
        return LossConfig(w_ent=w_ent * self.use_ent, w_bns=w_bns * self.use_bns,
                          w_pseu=w_pseu * self.use_pseu, vartheta=self.vartheta,
                          confidence_source=self.confidence_source)


@dataclass
class AdaptationResult:
    model: nn.Module
    prompt: PromptGenerator
    preadapted: nn.Module
    weights: dict
    history: List[dict]
    report: Optional[object] = None


def _batches(n: int, batch_size: int, generator: Optional[torch.Generator] = None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _trainable_partition(model, spec):
    if spec == "style":
        return partition_style_content(model)
    if spec == "all":
        return partition_parameters(model, [""])
    names = dict(model.named_modules())
    missing = [n for n in spec if n not in names]
    if missing:
        raise ConfigError(f"trainable_layers names not in model: {missing}")
    return partition_parameters(model, spec)


@torch.no_grad()
def _pseudo_bundle(pseudo_model: nn.Module, raw_images: torch.Tensor, filter_cfg: FilterConfig):
    probs = pseudo_model(raw_images).softmax(dim=1)
    return select_reliable(probs, filter_cfg)


class _RunDir:
    def __init__(self, root):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
            self._log = open(self.root / "train_log.jsonl", "w")

    def write_json(self, name, obj):
        if self.root is not None:
            (self.root / name).write_text(json.dumps(obj, indent=1, default=str))

    def log(self, rec):
        if self.root is not None:
            self._log.write(json.dumps(rec) + "\n")
            self._log.flush()

    def close(self):
        if self.root is not None:
            self._log.close()


def run_adaptation(source_model: nn.Module, target_train: SliceDataset, cfg: AdaptationConfig,
                   run_dir=None, test_volumes: Optional[Sequence[VolumeRecord]] = None) -> AdaptationResult:
    """Adapt ``source_model`` to the unlabeled ``target_train`` slices.

    Labels stored in ``target_train`` are never read. When ``run_dir`` is
    given it receives ``config.json``, ``train_log.jsonl``,
    ``checkpoints/epoch_<k>.ckpt`` and, if ``test_volumes`` are passed,
    ``report.json`` / ``report.csv``.
    """
    cfg.validate()
    if len(target_train) == 0:
        raise ValueError("target training split is empty")
    _trainable_partition(source_model, cfg.trainable_layers)
    torch.manual_seed(cfg.seed)
    out = _RunDir(run_dir)
    out.write_json("config.json", cfg.to_dict())
    try:
        result = _adapt(source_model, target_train, cfg, out)
        if test_volumes is not None:
            result.report = evaluate_model(result.model, test_volumes, result.prompt,
                                           run_id=str(run_dir or ""), config_hash=config_hash(cfg.to_dict()))
            result.report.meta = {"loss_weights": result.weights, "epochs": cfg.epochs}
            if out.root is not None:
                result.report.write(out.root)
    finally:
        out.close()
    return result


def _adapt(source_model, target_train, cfg: AdaptationConfig, out: _RunDir) -> AdaptationResult:
    images = target_train.images
    source_model = copy.deepcopy(source_model).eval()
    source_stats = running_stats(source_model)

    preadapt_batches = [images[idx] for idx in _batches(len(images), cfg.batch_size)]
    preadapted = preadapt_model(source_model, preadapt_batches, PreadaptConfig(cfg.rho, cfg.warmup_epochs))
    preadapted.eval()

    target = copy.deepcopy(preadapted if cfg.init_from == "preadapted" else source_model)
    pseudo_model = preadapted if cfg.pseudo_from == "preadapted" else source_model
    for p in pseudo_model.parameters():
        p.requires_grad_(False)

    partition = _trainable_partition(target, cfg.trainable_layers)
    freeze_content(target, partition)
    h, w = images.shape[-2:]
    prompt = PromptGenerator(h, w, alpha=cfg.alpha, mode=cfg.prompt_mode, init=cfg.prompt_init).to(images.dtype)

    filter_cfg = FilterConfig(cfg.class_keep_fraction, cfg.global_threshold)
    weights = None if cfg.loss_weights == "auto" else list(cfg.loss_weights)
    loss_cfg = cfg.loss_config(weights) if weights is not None else None

    opt = torch.optim.Adam(
        [{"params": list(prompt.parameters())}, {"params": partition.style}],
        lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        target.train()
        prompt.train()
        for idx in _batches(len(images), cfg.batch_size, gen):
            raw = images[idx]
            bundle = _pseudo_bundle(pseudo_model, raw, filter_cfg)
            prompted = prompt(raw)
            with BatchStatRecorder(target) as rec:
                logits = target(prompted)
            probs = logits.softmax(dim=1)
            l_bns = bns_loss(source_stats, rec.stats())
            l_ent = entropy_loss(probs)
            ref_cfg = loss_cfg or cfg.loss_config(cfg.default_loss_weights)
            l_pseu = pseudo_label_loss(probs, bundle, ref_cfg)
            if loss_cfg is None:
                calibrated = calibrate_loss_weights(l_bns.item(), l_pseu.item(), l_ent.item(),
                                                    defaults=cfg.default_loss_weights)
                weights = [calibrated["w_ent"], calibrated["w_bns"], calibrated["w_pseu"]]
                loss_cfg = cfg.loss_config(weights)
                log.info("calibrated loss weights [w_ent, w_bns, w_pseu] = %s", weights)
            loss = total_loss(l_ent, l_bns, l_pseu, loss_cfg)
            n_reliable = int(bundle.reliable_pixels.sum())
            rec_out = {"step": step, "epoch": epoch + 1, "l_bns": l_bns.item(), "l_ent": l_ent.item(),
                       "l_pseu": l_pseu.item(), "total": loss.item(), "n_reliable": n_reliable}
            if n_reliable == 0:
                rec_out["flag"] = "no reliable pseudo-label pixels in batch"
            if not math.isfinite(rec_out["total"]):
                rec_out["error"] = "non-finite loss"
                out.log(rec_out)
                raise AdaptationError(f"non-finite loss at step {step}: {rec_out}")
            out.log(rec_out)
            history.append(rec_out)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        target.eval()
        prompt.eval()
        if out.root is not None:
            save_checkpoint(out.root / "checkpoints" / f"epoch_{epoch + 1}.ckpt", target,
                            meta={"seed": cfg.seed, "epoch": epoch + 1, "preadapted": True,
                                  "adapted": True, "rho": cfg.rho, "warmup_epochs": cfg.warmup_epochs},
                            prompt=prompt)
    target.eval()
    prompt.eval()
    if weights is None:
        weights = list(cfg.default_loss_weights)
    return AdaptationResult(target, prompt, preadapted,
                            {"w_ent": weights[0], "w_bns": weights[1], "w_pseu": weights[2]}, history)


ABLATION_FIELDS = ("use_bns", "use_pseu", "use_ent", "prompt_mode", "init_from", "pseudo_from",
                   "trainable_layers")


def run_ablation_matrix(source_model: nn.Module, target_train: SliceDataset,
                        test_volumes: Sequence[VolumeRecord], base_cfg: AdaptationConfig,
                        variations: Sequence[dict], out_csv=None, run_root=None) -> List[dict]:
    """Run one adaptation per override dict (optional ``name`` key) and tabulate Dice.

    A failing variation is recorded with ``status="failed"`` and empty metric
    cells; the remaining variations still run.
    """
    class_count = source_model.spec.class_count
    rows = []
    for i, override in enumerate(variations):
        override = dict(override)
        name = override.pop("name", f"run{i}")
        row = {"name": name}
        try:
            cfg = AdaptationConfig.from_dict({**base_cfg.to_dict(), **override})
            row.update({k: getattr(cfg, k) for k in ABLATION_FIELDS})
            run_dir = Path(run_root) / name if run_root is not None else None
            res = run_adaptation(source_model, target_train, cfg, run_dir=run_dir, test_volumes=test_volumes)
            per_class = res.report.per_class_mean()
            for c in range(1, class_count):
                row[f"dice_{c}"] = per_class[c]["dice"]
            row["average"] = res.report.mean_dice
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001 - matrix keeps going
            log.exception("ablation %s failed", name)
            row["status"] = "failed"
            row["error"] = str(exc)
        rows.append(row)
    if out_csv is not None:
        write_ablation_csv(rows, out_csv, class_count)
    return rows


def write_ablation_csv(rows, path, class_count: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["name", *ABLATION_FIELDS, *[f"dice_{c}" for c in range(1, class_count)], "average", "status"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if row.get(k) is None else row.get(k, "") for k in header])
    return path
