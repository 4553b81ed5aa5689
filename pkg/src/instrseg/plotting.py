"""Mask overlays and report figures."""
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import _io  # noqa: E402
from .data import Task, encode_mask  # noqa: E402
from .errors import LabelCodeError, ShapeError  # noqa: E402

BLUE = (0, 0, 255)

_PARTS_COLOURS = {1: (255, 200, 0), 2: (0, 220, 0), 3: (255, 0, 255), 4: (0, 230, 230)}
_INSTRUMENT_COLOURS = {
    1: (230, 25, 75),
    2: (60, 180, 75),
    3: (255, 225, 25),
    4: (0, 130, 200),
    5: (245, 130, 48),
    6: (145, 30, 180),
    7: (70, 240, 240),
}

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


@dataclass(frozen=True)
class Palette:
    """Class index -> RGB. Background (0) is never drawn."""

    colours: dict

    def __post_init__(self):
        values = [tuple(c) for k, c in self.colours.items() if k != 0]
        if len(set(values)) != len(values):
            raise ValueError("palette colours must be distinct across foreground classes")

    @classmethod
    def default(cls, task):
        task = Task.parse(task)
        if task is Task.BINARY:
            return cls({1: BLUE})
        return cls(dict(_PARTS_COLOURS if task is Task.PARTS else _INSTRUMENT_COLOURS))

    def lookup(self, num_labels):
        table = np.zeros((num_labels, 3), np.float64)
        for k, c in self.colours.items():
            if 0 < k < num_labels:
                table[k] = c
        return table


def mask_classes(mask, task):
    """Display or raw-code mask to class indices; binary accepts 0/1 and 0/255."""
    task = Task.parse(task)
    mask = np.asarray(mask)
    if task is Task.BINARY:
        bad = np.setdiff1d(np.unique(mask), [0, 1, 255])
        if bad.size:
            raise LabelCodeError(f"binary mask holds codes other than 0/1/255: {bad.tolist()}")
        return (mask > 0).astype(np.uint8)
    return encode_mask(mask, task)


def overlay(image, mask, task, palette=None, alpha=0.5):
    """Blend palette colours over ``image`` where ``mask`` is foreground."""
    task = Task.parse(task)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} differ")
    palette = palette or Palette.default(task)
    classes = mask_classes(mask, task)
    fg = classes > 0
    colours = palette.lookup(task.num_labels)[classes[fg]]
    out = image.copy()
    blended = (1.0 - alpha) * image[fg].astype(np.float64) + alpha * colours
    out[fg] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out


def overlay_file(image_path, mask_path, out_path, task, palette=None, alpha=0.5):
    composite = overlay(_io.read_image(image_path), _io.read_mask(mask_path), task, palette, alpha)
    _io.write_png(out_path, composite)
    return composite


# ---------------------------------------------------------------------------
# report figures

def _save(fig, path):
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    _io.atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def plot_eval_report(report, path):
    """Per-class IoU and Dice bars with the corpus means as lines."""
    with plt.rc_context(RC):
        names = list(report.per_class)
        x = np.arange(len(names))
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names) + 2), 3.4))
        ax.bar(x - 0.2, [report.per_class[n]["iou"] for n in names], 0.4, label="IoU")
        ax.bar(x + 0.2, [report.per_class[n]["dice"] for n in names], 0.4, label="Dice")
        ax.axhline(report.mean_iou, color="C0", ls="--", lw=1)
        ax.axhline(report.mean_dice, color="C1", ls="--", lw=1)
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        ax.set_title(f"{report.model}, {report.task}: IoU {report.mean_iou:.2f}  Dice {report.mean_dice:.2f}")
        ax.legend()
        return _save(fig, path)


def plot_train_log(train_log, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = [r.epoch for r in train_log.records]
        ax.plot(epochs, [r.mean_train_loss for r in train_log.records], color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        val = [(r.epoch, r.val_mean_iou) for r in train_log.records if r.val_mean_iou is not None]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), color="C1", marker="o", ms=3, label="val IoU")
            ax2.set_ylim(0, 1)
            ax2.set_ylabel("val IoU")
            ax2.grid(False)
        return _save(fig, path)


def plot_sweep(points, path, chosen=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot([p.threshold for p in points], [p.mean_iou for p in points], marker="o")
        if chosen is not None:
            ax.axvline(chosen, color="k", ls=":", lw=1)
        ax.set_xlabel("threshold")
        ax.set_ylabel("mean IoU")
        ax.set_xlim(0, 1)
        return _save(fig, path)


def plot_timing(reports, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        names = [r.model for r in reports]
        ax.bar(names, [r.mean_ms for r in reports], yerr=[r.std_ms for r in reports], capsize=3)
        ax.set_ylabel("ms / image")
        shape = "x".join(str(s) for s in reports[0].input_shape) if reports else ""
        ax.set_title(f"forward pass, {shape}, {reports[0].device if reports else ''}")
        ax.tick_params(axis="x", rotation=20)
        return _save(fig, path)
