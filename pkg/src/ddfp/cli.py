"""Command-line pipeline: synthetic data, source training, pre-adaptation,
adaptation, evaluation, ablation and prompt visualisation.

Every command takes a JSON config (``--config``) with the sections below; all
sections and keys are optional, unknown keys are rejected, and ``--set a.b=v``
overrides win over file values. The merged config is written to
``<run-dir>/resolved_config.json`` before anything runs.

    seed        int, shared by data generation, training and adaptation
    checkpoint  model archive read by preadapt/adapt/evaluate/ablate/visualize-prompt
    data        source / target dataset dirs, split to evaluate, optional preprocess block
    synth       synthetic benchmark generator settings
    model       U-Net shape for train-source
    train       source training schedule
    adapt       adaptation hyper-parameters
    ablation    list of override dicts (each may carry a "name")
    visualize   number of target slices to render

Exit status: 0 success, 1 invalid invocation/config/data, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import torch
from torch.utils.data import DataLoader

from .adaptation import AdaptationConfig, ConfigError, run_ablation_matrix, run_adaptation
from .bn_preadapt import PreadaptConfig, preadapt_model
from .data import (PreprocessConfig, SliceDataset, SynthConfig, generate_synthetic_domains, load_dataset,
                   preprocess_volume, read_manifest)
from .evaluate import evaluate_model
from .metrics import config_hash
from .models import SegModelSpec, build_unet, load_checkpoint, save_checkpoint, train_source
from .plotting import plot_ablation, plot_class_dice, plot_prompt_panel

log = logging.getLogger("ddfp")

COMMANDS = ("synth-data", "train-source", "preadapt", "adapt", "evaluate", "ablate", "visualize-prompt")


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {
        "seed": 0,
        "checkpoint": None,
        "data": {"source": None, "target": None, "split": "test", "preprocess": None},
        "synth": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(SynthConfig()).items()},
        "model": asdict(SegModelSpec()),
        "train": {"epochs": 30, "lr": 1e-3, "weight_decay": 5e-4, "batch_size": 16},
        "adapt": AdaptationConfig().to_dict(),
        "ablation": [],
        "visualize": {"count": 4},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key '{dotted}' must be an object")
            out[key] = _merge(base[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got '{pair}'")
        nested: dict = {}
        cursor = nested
        parts = key.split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = _parse_value(raw)
        cfg = _merge(cfg, nested)
    return cfg


def resolve_config(path, overrides, seed=None) -> dict:
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}")
    if not isinstance(user, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = apply_overrides(_merge(default_config(), user), overrides)
    if seed is not None:
        cfg["seed"] = seed
    cfg["adapt"]["seed"] = cfg["seed"]
    try:
        AdaptationConfig.from_dict(cfg["adapt"]).validate()
        _synth_config(cfg)
        SegModelSpec(**cfg["model"])
        if cfg["data"]["preprocess"] is not None:
            _preprocess_config(cfg)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")
    return cfg


def _synth_config(cfg) -> SynthConfig:
    s = dict(cfg["synth"])
    s["spacing"] = tuple(s["spacing"])
    return SynthConfig(**s)


def _preprocess_config(cfg) -> PreprocessConfig:
    known = {f.name for f in fields(PreprocessConfig)}
    block = dict(cfg["data"]["preprocess"])
    unknown = set(block) - known
    if unknown:
        raise UsageError(f"unknown config key(s) in data.preprocess: {sorted(unknown)}")
    if "window" in block:
        block["window"] = tuple(block["window"])
    return PreprocessConfig(**block)


def _require(cfg, dotted):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    if node in (None, ""):
        raise UsageError(f"config key '{dotted}' is required for this command")
    return node


def _volumes(cfg, which: str, split):
    directory = _require(cfg, f"data.{which}")
    vols = load_dataset(directory, split)
    if cfg["data"]["preprocess"] is not None:
        pre = _preprocess_config(cfg)
        vols = [preprocess_volume(v, pre) for v in vols]
    return vols, read_manifest(directory)


def _check_classes(model, manifest, directory):
    n_model, n_data = model.spec.class_count, manifest.get("class_count")
    if n_data is not None and n_model != n_data:
        raise UsageError(f"config mismatch: checkpoint predicts {n_model} classes but dataset "
                         f"{directory} declares {n_data}")


def _load_model(cfg):
    path = _require(cfg, "checkpoint")
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _write_report(report, run_dir, title):
    report.write(run_dir)
    plot_class_dice({c: v for c, v in report.per_class_mean().items()}, run_dir / "report_dice.png", title)
    log.info("mean Dice %.4f", report.mean_dice)


# --- commands -------------------------------------------------------------------------------------

def cmd_synth_data(cfg, run_dir: Path):
    a, b = generate_synthetic_domains(_synth_config(cfg), cfg["seed"], run_dir)
    log.info("wrote %s and %s", a, b)


def cmd_train_source(cfg, run_dir: Path):
    vols, manifest = _volumes(cfg, "source", "train")
    t = cfg["train"]
    spec = SegModelSpec(**cfg["model"])
    _check_classes(build_unet(spec), manifest, cfg["data"]["source"])
    torch.manual_seed(cfg["seed"])
    model = build_unet(spec, seed=cfg["seed"])
    loader = DataLoader(SliceDataset(vols), batch_size=t["batch_size"], shuffle=True,
                        generator=torch.Generator().manual_seed(cfg["seed"]))
    with open(run_dir / "train_log.jsonl", "w") as fh:
        train_source(model, loader, t["epochs"], lr=t["lr"], weight_decay=t["weight_decay"],
                     log_fn=lambda rec: fh.write(json.dumps(rec) + "\n"))
    save_checkpoint(run_dir / "source.ckpt", model,
                    meta={"seed": cfg["seed"], "preadapted": False, "adapted": False, "train": t})
    test_vols, _ = _volumes(cfg, "source", cfg["data"]["split"])
    if test_vols:
        _write_report(evaluate_model(model, test_vols, run_id=str(run_dir), config_hash=config_hash(cfg)),
                      run_dir, "source model, source domain")


def cmd_preadapt(cfg, run_dir: Path):
    model, meta, _ = _load_model(cfg)
    vols, manifest = _volumes(cfg, "target", "train")
    _check_classes(model, manifest, cfg["data"]["target"])
    a = AdaptationConfig.from_dict(cfg["adapt"])
    images = SliceDataset(vols).images
    batches = [images[i:i + a.batch_size] for i in range(0, len(images), a.batch_size)]
    pre = preadapt_model(model, batches, PreadaptConfig(a.rho, a.warmup_epochs))
    save_checkpoint(run_dir / "preadapted.ckpt", pre,
                    meta={**meta, "seed": cfg["seed"], "preadapted": True,
                          "rho": a.rho, "warmup_epochs": a.warmup_epochs})
    test_vols, _ = _volumes(cfg, "target", cfg["data"]["split"])
    if test_vols:
        _write_report(evaluate_model(pre, test_vols, run_id=str(run_dir), config_hash=config_hash(cfg)),
                      run_dir, "pre-adapted model, target domain")


def cmd_adapt(cfg, run_dir: Path):
    model, _, _ = _load_model(cfg)
    vols, manifest = _volumes(cfg, "target", "train")
    _check_classes(model, manifest, cfg["data"]["target"])
    test_vols, _ = _volumes(cfg, "target", cfg["data"]["split"])
    res = run_adaptation(model, SliceDataset(vols), AdaptationConfig.from_dict(cfg["adapt"]),
                         run_dir=run_dir, test_volumes=test_vols or None)
    save_checkpoint(run_dir / "adapted.ckpt", res.model,
                    meta={"seed": cfg["seed"], "preadapted": True, "adapted": True, "weights": res.weights},
                    prompt=res.prompt)
    if res.report is not None:
        plot_class_dice(res.report.per_class_mean(), run_dir / "report_dice.png", "adapted model, target domain")
        log.info("mean Dice %.4f", res.report.mean_dice)


def cmd_evaluate(cfg, run_dir: Path):
    model, _, prompt = _load_model(cfg)
    directory = cfg["data"]["target"] or cfg["data"]["source"]
    if not directory:
        raise UsageError("config key 'data.target' (or 'data.source') is required for this command")
    which = "target" if cfg["data"]["target"] else "source"
    vols, manifest = _volumes(cfg, which, cfg["data"]["split"])
    _check_classes(model, manifest, directory)
    report = evaluate_model(model, vols, prompt, run_id=str(run_dir), config_hash=config_hash(cfg))
    _write_report(report, run_dir, f"{Path(directory).name} / {cfg['data']['split']}")


def cmd_ablate(cfg, run_dir: Path):
    model, _, _ = _load_model(cfg)
    vols, manifest = _volumes(cfg, "target", "train")
    _check_classes(model, manifest, cfg["data"]["target"])
    test_vols, _ = _volumes(cfg, "target", cfg["data"]["split"])
    variations = cfg["ablation"] or [
        {"name": "bns_only", "use_pseu": False, "use_ent": False},
        {"name": "pseu_only", "use_bns": False, "use_ent": False},
        {"name": "ent_only", "use_bns": False, "use_pseu": False},
        {"name": "all", "use_bns": True, "use_pseu": True, "use_ent": True},
    ]
    rows = run_ablation_matrix(model, SliceDataset(vols), test_vols, AdaptationConfig.from_dict(cfg["adapt"]),
                               variations, out_csv=run_dir / "ablation.csv", run_root=run_dir / "runs")
    plot_ablation(rows, run_dir / "ablation.png")
    failed = [r["name"] for r in rows if r["status"] != "ok"]
    if failed:
        log.warning("failed variations: %s", failed)


def cmd_visualize_prompt(cfg, run_dir: Path):
    model, _, prompt = _load_model(cfg)
    if prompt is None:
        raise UsageError("checkpoint carries no prompt generator (use an adapted checkpoint)")
    vols, _ = _volumes(cfg, "target", cfg["data"]["split"])
    images = SliceDataset(vols).images[: int(cfg["visualize"]["count"])]
    if prompt.mode in ("none", "domain_spatial"):
        raise UsageError(f"prompt mode '{prompt.mode}' has no frequency prompt to render")
    with torch.no_grad():
        fp = prompt.frequency_prompt(images)
        prompted = prompt(images)
    for i in range(len(images)):
        plot_prompt_panel(images[i, 0], fp[i, 0], prompted[i, 0], run_dir / f"prompt_{i:03d}.png",
                          title=f"slice {i}")


HANDLERS = {
    "synth-data": cmd_synth_data, "train-source": cmd_train_source, "preadapt": cmd_preadapt,
    "adapt": cmd_adapt, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "visualize-prompt": cmd_visualize_prompt,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ddfp", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--run-dir", default=None,
                       help="output directory (default: $DDFP_RUN_ROOT or ./runs, plus a timestamped name)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, value parsed as JSON when possible (repeatable)")
        p.add_argument("--device", choices=("cpu", "gpu"), default="cpu")
    return parser


def _run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    root = Path(os.environ.get("DDFP_RUN_ROOT", "runs"))
    return root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"


def _select_device(name: str) -> None:
    if name == "gpu":
        if not torch.cuda.is_available():
            raise UsageError("--device gpu requested but CUDA is not available")
        torch.set_default_device("cuda")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        _select_device(args.device)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run_dir = _run_dir(args)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved_config.json").write_text(json.dumps(
        {"command": args.command, "device": args.device, **cfg}, indent=1))
    handler = logging.FileHandler(run_dir / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    try:
        HANDLERS[args.command](cfg, run_dir)
    except (UsageError, ConfigError, ValueError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to exit status 2
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    finally:
        root.removeHandler(handler)
        handler.close()
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
