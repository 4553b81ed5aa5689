#!/usr/bin/env python3
"""Extended reproduction run for the binary task (fold 0).

Trains U-Net, TernausNet-11 and TernausNet-16 on a prepared full-size corpus,
predicts the fold's validation sequences, and checks:

* TernausNet-16 binary IoU within +-5 points of the published 83.60
* IoU ordering TernausNet-16 > TernausNet-11 > U-Net

Needs the real 1,800-frame corpus (``instrseg prepare``), ImageNet encoder
weights (downloaded by torchvision, or local files via ``--weights-dir``)
and an accelerator; expect several GPU-hours. Not part of the test suite.

    python scripts/repro_binary.py --data prepared/ --out runs/repro --device cuda
"""
import argparse
import json
import sys
from pathlib import Path

from instrseg import InferenceConfig, ModelSpec, TrainConfig, evaluate, predict_corpus, split_folds, train
from instrseg.training import Augmentation

REFERENCE_IOU = {"U-Net": 75.44, "TernausNet-11": 81.14, "TernausNet-16": 83.60}
TOLERANCE = 5.0
FAMILIES = ("unet", "ternausnet11", "ternausnet16")
WEIGHT_FILES = {"ternausnet11": "vgg11.pth", "ternausnet16": "vgg16.pth"}


def check(ious, tolerance=TOLERANCE):
    """Return a list of failure messages (empty when the run reproduces)."""
    failures = []
    t16 = ious["TernausNet-16"]
    if abs(t16 - REFERENCE_IOU["TernausNet-16"]) > tolerance:
        failures.append(f"TernausNet-16 IoU {t16:.2f} outside {REFERENCE_IOU['TernausNet-16']} +- {tolerance}")
    if not ious["TernausNet-16"] > ious["TernausNet-11"] > ious["U-Net"]:
        failures.append("ordering TernausNet-16 > TernausNet-11 > U-Net does not hold: " + json.dumps(ious))
    return failures


def run(args):
    fold = split_folds(0)
    ious = {}
    for family in FAMILIES:
        spec = ModelSpec(family, 1)
        weights = None
        if args.weights_dir and family in WEIGHT_FILES:
            weights = Path(args.weights_dir) / WEIGHT_FILES[family]
        out = Path(args.out) / family
        config = TrainConfig(
            spec, "binary", fold_id=0, data_root=args.data, out_dir=out,
            learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            augmentation=Augmentation(), device=args.device, encoder_weights=weights,
        )
        best, _ = train(config)
        predict_corpus(best, args.data, out / "pred", InferenceConfig("binary", device=args.device),
                       sequences=fold.val_sequences)
        report = evaluate(out / "pred", args.data, "binary")
        report.save(out / "report.json")
        ious[spec.name] = report.mean_iou
        print(f"{spec.name}: IoU {report.mean_iou:.2f} Dice {report.mean_dice:.2f}", flush=True)
    return ious


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", required=True, help="prepared corpus root")
    parser.add_argument("--out", required=True)
    parser.add_argument("--weights-dir", help="directory holding vgg11.pth / vgg16.pth state dicts")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--device", default=None)
    args = parser.parse_args(argv)
    if not (Path(args.data) / "manifest.json").is_file():
        print(f"{args.data}: no prepared corpus (run `instrseg prepare` first)", file=sys.stderr)
        return 2
    failures = check(run(args))
    for f in failures:
        print("FAIL", f, file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
