"""Discrete IoU / Dice and corpus evaluation reports."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .data import MASK_DIRS, Task, encode_mask, load_manifest
from .errors import LayoutError, MissingPredictionError, ShapeError

REPORT_KEYS = ("task", "model", "num_images", "mean_iou", "mean_dice", "per_class", "timing_ms")


def _counts(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def jaccard(a, b) -> float:
    """|A & B| / |A | B|; two empty masks score 1.0."""
    inter, na, nb = _counts(a, b)
    union = na + nb - inter
    return 1.0 if union == 0 else inter / union


def dice(a, b) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    inter, na, nb = _counts(a, b)
    total = na + nb
    return 1.0 if total == 0 else 2 * inter / total


def score_image(pred, truth, task):
    """Per-image scores for class-index masks.

    Returns ``(iou, dice, per_class)`` where ``per_class`` maps class index to
    ``(iou, dice)`` for each foreground class present in ``truth``. Multi-class
    images with no foreground in the truth are scored on the foreground
    union, so a clean prediction earns 1.0 and any false positive 0.0.
    """
    task = Task.parse(task)
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    if task is Task.BINARY:
        i, d = jaccard(pred > 0, truth > 0), dice(pred > 0, truth > 0)
        return i, d, {1: (i, d)}
    present = [int(c) for c in np.unique(truth) if c != 0]
    if not present:
        return jaccard(pred > 0, truth > 0), dice(pred > 0, truth > 0), {}
    per_class = {c: (jaccard(pred == c, truth == c), dice(pred == c, truth == c)) for c in present}
    ious = [v[0] for v in per_class.values()]
    dices = [v[1] for v in per_class.values()]
    return float(np.mean(ious)), float(np.mean(dices)), per_class


@dataclass
class EvalReport:
    task: str
    model: str
    per_class: dict
    mean_iou: float
    mean_dice: float
    num_images: int
    timing_ms: float = None
    per_image: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "task": self.task,
            "model": self.model,
            "num_images": self.num_images,
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "per_class": self.per_class,
            "timing_ms": self.timing_ms,
        }

    def save(self, path):
        _io.write_json(path, self.to_dict())


def _pct(x):
    return round(100.0 * float(x), 2)


def aggregate(per_image, task, model="unknown", timing_ms=None) -> EvalReport:
    """Reduce ``[(iou, dice, per_class), ...]`` to a report.

    Corpus means are means of per-image values, not IoU of pooled counts.
    """
    task = Task.parse(task)
    if not per_image:
        raise ValueError("nothing to aggregate")
    names = task.class_names
    buckets = {}
    for _, _, per_class in per_image:
        for c, scores in per_class.items():
            buckets.setdefault(c, []).append(scores)
    per_class = {
        names[c]: {"iou": _pct(np.mean([s[0] for s in v])), "dice": _pct(np.mean([s[1] for s in v]))}
        for c, v in sorted(buckets.items())
    }
    return EvalReport(
        task=str(task),
        model=model,
        per_class=per_class,
        mean_iou=_pct(np.mean([p[0] for p in per_image])),
        mean_dice=_pct(np.mean([p[1] for p in per_image])),
        num_images=len(per_image),
        timing_ms=timing_ms,
        per_image=list(per_image),
    )


def _frame_files(root, directory):
    found = {}
    base = Path(root) / directory
    if not base.is_dir():
        return found
    for seq_dir in sorted(base.glob("seq*")):
        try:
            seq = int(seq_dir.name[3:])
        except ValueError:
            raise LayoutError(f"{seq_dir}: malformed sequence directory") from None
        for path in sorted(seq_dir.glob("frame*.png")):
            found[(seq, int(path.stem[5:]))] = path
    return found


def prediction_files(pred_root, task):
    """Prediction masks for ``task``: its own display directory if present,
    otherwise the matching canonical mask directory (ground-truth style)."""
    task = Task.parse(task)
    candidates = ["binary_masks", MASK_DIRS["parts"]] if task is Task.BINARY else [MASK_DIRS[task.value]]
    for directory in candidates:
        files = _frame_files(pred_root, directory)
        if files:
            return files
    raise LayoutError(f"{pred_root}: no {task} prediction masks (looked in {', '.join(candidates)})")


def evaluate(pred_root, truth_root, task, model=None, timing_ms=None) -> EvalReport:
    """Score predictions against a prepared corpus.

    Every ground-truth frame of each sequence that appears under
    ``pred_root`` must have a prediction.
    """
    task = Task.parse(task)
    manifest = load_manifest(truth_root)
    preds = prediction_files(pred_root, task)
    if model is None:
        pred_manifest = Path(pred_root) / "manifest.json"
        model = _io.read_json(pred_manifest).get("model", "unknown") if pred_manifest.is_file() else "unknown"
    sequences = {seq for seq, _ in preds}
    truth_key = "instruments_mask" if task is Task.INSTRUMENTS else "parts_mask"
    entries = [e for e in manifest["samples"] if e["sequence"] in sequences]
    missing = [(e["sequence"], e["frame"]) for e in entries if (e["sequence"], e["frame"]) not in preds]
    if missing:
        listing = ", ".join(f"seq{s}/frame{f:04d}" for s, f in missing[:10])
        raise MissingPredictionError(f"{len(missing)} frame(s) lack predictions: {listing}")
    per_image = []
    for e in entries:
        truth = encode_mask(_io.read_mask(Path(truth_root) / e[truth_key]), task)
        raw_pred = _io.read_mask(preds[(e["sequence"], e["frame"])])
        pred = (raw_pred > 0).astype(np.uint8) if task is Task.BINARY else encode_mask(raw_pred, task)
        per_image.append(score_image(pred, truth, task))
    if not per_image:
        raise LayoutError(f"{pred_root}: no predictions overlap the corpus at {truth_root}")
    return aggregate(per_image, task, model=model, timing_ms=timing_ms)
