"""Command-line entry point: ``instrseg <subcommand> [options]``.

Settings resolve as command-line flags > ``--config`` file > built-in
defaults. A config file (YAML or JSON) may be flat or keyed by subcommand.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""
import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import yaml

from . import _io
from .data import Task, generate_synthetic, load_samples, prepare_dataset, split_folds
from .errors import InstrsegError
from .inference import DEFAULT_THRESHOLD, InferenceConfig, benchmark, predict_corpus, resolve_device, threshold_sweep
from .metrics import evaluate
from .models import FAMILIES, ModelSpec, build_model, load_checkpoint
from .plotting import overlay_file, plot_eval_report, plot_sweep, plot_timing, plot_train_log
from .training import Augmentation, TrainConfig, train

log = logging.getLogger("instrseg")

DEFAULTS = {
    "prepare": {"raw": None, "out": None},
    "synth": {"out": None, "count": 8, "height": 128, "width": 160, "seed": 0},
    "train": {
        "task": "binary", "model": "unet", "fold": 0, "data": None, "out": None,
        "epochs": 10, "batch_size": 1, "lr": 1e-4, "seed": 0, "max_steps": None,
        "hflip": True, "vflip": True, "jaccard_form": "aggregate", "base_width": 32,
        "pretrained": None, "encoder_weights": None, "threshold": DEFAULT_THRESHOLD,
        "val_every": 1, "device": None, "figure": True,
    },
    "predict": {
        "checkpoint": None, "data": None, "out": None, "task": None,
        "threshold": DEFAULT_THRESHOLD, "fold": None, "device": None,
    },
    "evaluate": {"task": "binary", "pred": None, "truth": None, "report": None, "model": None, "figure": True},
    "benchmark": {
        "models": list(FAMILIES), "task": "binary", "height": 1024, "width": 1280, "batch": 1,
        "warmup": 5, "reps": 50, "report": None, "device": None, "seed": 0, "figure": True,
    },
    "sweep": {
        "checkpoint": None, "data": None, "fold": None, "report": None, "device": None,
        "thresholds": [round(0.1 * i, 1) for i in range(1, 10)], "figure": True,
    },
    "overlay": {"image": None, "mask": None, "task": "binary", "alpha": 0.5, "out": None},
}

REQUIRED = {
    "prepare": ("raw", "out"),
    "synth": ("out",),
    "train": ("data", "out"),
    "predict": ("checkpoint", "data", "out"),
    "evaluate": ("pred", "truth", "report"),
    "benchmark": ("report",),
    "sweep": ("checkpoint", "data", "report"),
    "overlay": ("image", "mask", "out"),
}


class UsageError(Exception):
    pass


def _fold(value):
    if value in (None, "all", "none"):
        return None
    return int(value)


def _floats(value):
    return [float(v) for v in value.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="instrseg", description="Surgical instrument segmentation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="YAML/JSON file with default settings")
        return p

    p = command("prepare", "ingest a raw corpus into the canonical layout")
    p.add_argument("--raw")
    p.add_argument("--out")

    p = command("synth", "write a seeded synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)

    p = command("train", "train one model on one fold")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--model", choices=FAMILIES)
    p.add_argument("--fold", type=_fold, help="0-3, or 'all' to train and validate on every sequence")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--no-hflip", dest="hflip", action="store_false")
    p.add_argument("--no-vflip", dest="vflip", action="store_false")
    p.add_argument("--jaccard-form", dest="jaccard_form", choices=["aggregate", "per_pixel_positives"])
    p.add_argument("--base-width", dest="base_width", type=int)
    p.add_argument("--pretrained", dest="pretrained", action="store_true")
    p.add_argument("--no-pretrained", dest="pretrained", action="store_false")
    p.add_argument("--encoder-weights", dest="encoder_weights", help="local torchvision state dict")
    p.add_argument("--threshold", type=float)
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--device")
    p.add_argument("--no-figure", dest="figure", action="store_false")

    p = command("predict", "write prediction masks for a corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--threshold", type=float)
    p.add_argument("--fold", type=_fold, help="restrict to the fold's validation sequences")
    p.add_argument("--device")

    p = command("evaluate", "score predictions against ground truth")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--report")
    p.add_argument("--model")
    p.add_argument("--no-figure", dest="figure", action="store_false")

    p = command("benchmark", "time forward passes")
    p.add_argument("--models", type=lambda s: s.split(","), help="comma-separated families")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--report")
    p.add_argument("--device")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figure", dest="figure", action="store_false")

    p = command("sweep", "validation IoU across binarization thresholds")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--fold", type=_fold)
    p.add_argument("--thresholds", type=_floats, help="comma-separated values in (0, 1)")
    p.add_argument("--report")
    p.add_argument("--device")
    p.add_argument("--no-figure", dest="figure", action="store_false")

    p = command("overlay", "blend a mask over its image")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")
    return parser


def load_config_file(path, command):
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping")
    if set(data) & set(DEFAULTS):
        # keyed by subcommand; sections for other commands are ignored
        data = data.get(command) or {}
        if not isinstance(data, dict):
            raise UsageError(f"config {path}: section {command!r} must hold a mapping")
    unknown = set(data) - set(DEFAULTS[command])
    if unknown:
        raise UsageError(f"config {path}: unknown keys for {command}: {', '.join(sorted(unknown))}")
    return data


def resolve(command, args):
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config, command))
    settings.update(flags)
    missing = [k for k in REQUIRED[command] if settings.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join('--' + m for m in missing)}")
    return settings


def _csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _io.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands

def run_prepare(s):
    manifest = prepare_dataset(s["raw"], s["out"])
    print(f"prepared {manifest['num_samples']} samples into {s['out']}")


def run_synth(s):
    manifest = generate_synthetic(s["out"], s["count"], (s["height"], s["width"]), s["seed"])
    print(f"wrote {manifest['num_samples']} synthetic samples into {s['out']}")


def run_train(s):
    task = Task.parse(s["task"])
    spec = ModelSpec(s["model"], task.num_classes, s["pretrained"], s["base_width"])
    config = TrainConfig(
        model_spec=spec, task=task, fold_id=s["fold"], data_root=Path(s["data"]), out_dir=Path(s["out"]),
        learning_rate=s["lr"], batch_size=s["batch_size"], epochs=s["epochs"], seed=s["seed"],
        augmentation=Augmentation(s["hflip"], s["vflip"]), jaccard_form=s["jaccard_form"],
        threshold=s["threshold"], max_steps=s["max_steps"], val_every=s["val_every"], device=s["device"],
        encoder_weights=s["encoder_weights"],
    )
    checkpoint, train_log = train(config)
    if s["figure"]:
        plot_train_log(train_log, Path(s["out"]) / "train_log.png")
    last = train_log.records[-1]
    print(f"checkpoint {checkpoint}; final loss {last.mean_train_loss:.4f}, val IoU {last.val_mean_iou}")


def run_predict(s):
    task = s["task"]
    if task is None:
        task = load_checkpoint(s["checkpoint"])[1].get("task", "binary")
    cfg = InferenceConfig(task, s["threshold"], s["device"])
    sequences = None if s["fold"] is None else split_folds(s["fold"]).val_sequences
    manifest = predict_corpus(s["checkpoint"], s["data"], s["out"], cfg, sequences=sequences)
    print(f"wrote {manifest['num_predictions']} predictions into {s['out']}")


def run_evaluate(s):
    report = evaluate(s["pred"], s["truth"], s["task"], model=s["model"])
    path = Path(s["report"])
    report.save(path)
    _csv(path.with_suffix(".csv"), ["class", "iou", "dice"],
         [[name, v["iou"], v["dice"]] for name, v in report.per_class.items()]
         + [["mean", report.mean_iou, report.mean_dice]])
    if s["figure"]:
        plot_eval_report(report, path.with_suffix(".png"))
    print(f"{report.model} {report.task}: IoU {report.mean_iou:.2f} Dice {report.mean_dice:.2f} "
          f"over {report.num_images} images")


def run_benchmark(s):
    import torch

    task = Task.parse(s["task"])
    device = resolve_device(s["device"])
    shape = (s["batch"], 3, s["height"], s["width"])
    reports = []
    for family in s["models"]:
        torch.manual_seed(s["seed"])
        # timing does not depend on weight values
        net = build_model(ModelSpec(family, task.num_classes, pretrained_encoder=False))
        report = benchmark(net, shape, s["warmup"], s["reps"], device=device)
        reports.append(report)
        print(f"{report.model}: {report.mean_ms:.1f} +- {report.std_ms:.1f} ms")
    fastest = min(reports, key=lambda r: r.mean_ms)
    path = Path(s["report"])
    _io.write_json(path, {"reports": [r.to_dict() for r in reports], "fastest": fastest.model})
    _csv(path.with_suffix(".csv"), ["model", "mean_ms", "std_ms", "device"],
         [[r.model, round(r.mean_ms, 3), round(r.std_ms, 3), r.device] for r in reports])
    if s["figure"]:
        plot_timing(reports, path.with_suffix(".png"))
    print(f"fastest: {fastest.model}")


def run_sweep(s):
    net, meta = load_checkpoint(s["checkpoint"])
    if meta.get("task", "binary") != "binary":
        raise InstrsegError("threshold sweeps apply to binary checkpoints only")
    sequences = None if s["fold"] is None else split_folds(s["fold"]).val_sequences
    samples = load_samples(s["data"], sequences)
    points = threshold_sweep(net, samples, s["thresholds"], device=s["device"])
    best = max(points, key=lambda p: p.mean_iou)
    path = Path(s["report"])
    _io.write_json(path, {
        "checkpoint": Path(s["checkpoint"]).name,
        "points": [p._asdict() for p in points],
        "best_threshold": best.threshold,
    })
    _csv(path.with_suffix(".csv"), ["threshold", "mean_iou", "foreground_pixels"], [list(p) for p in points])
    if s["figure"]:
        plot_sweep(points, path.with_suffix(".png"), chosen=best.threshold)
    print(f"best threshold {best.threshold} (IoU {best.mean_iou:.4f})")


def run_overlay(s):
    overlay_file(s["image"], s["mask"], s["out"], s["task"], alpha=s["alpha"])
    print(f"wrote {s['out']}")


RUNNERS = {
    "prepare": run_prepare,
    "synth": run_synth,
    "train": run_train,
    "predict": run_predict,
    "evaluate": run_evaluate,
    "benchmark": run_benchmark,
    "sweep": run_sweep,
    "overlay": run_overlay,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"instrseg: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **settings}, default=str, sort_keys=True))
    try:
        RUNNERS[args.command](settings)
    except (InstrsegError, ValueError, FileNotFoundError) as exc:
        print(f"instrseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
