"""Full-resolution prediction, threshold sweeps and latency benchmarks."""
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import _io
from .data import MASK_DIRS, Task, decode_prediction, encode_target, load_manifest, load_sample
from .errors import CheckpointError, ConfigError, LayoutError, OutOfMemoryError
from .metrics import score_image
from .models import load_checkpoint

DEFAULT_THRESHOLD = 0.3
DEVICE_ENV = "INSTRSEG_DEVICE"


def resolve_device(device=None) -> torch.device:
    device = device or os.environ.get(DEVICE_ENV)
    if not device:
        device = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(device)


@dataclass
class InferenceConfig:
    task: Task = Task.BINARY
    threshold: float = DEFAULT_THRESHOLD
    device: str = None

    def __post_init__(self):
        self.task = Task.parse(self.task)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie strictly between 0 and 1, got {self.threshold}")


def to_tensor(image) -> torch.Tensor:
    """uint8 ``H x W x 3`` (or a batch of them) to float ``B x 3 x H x W`` in [0, 1]."""
    if isinstance(image, torch.Tensor):
        t = image
        if t.dim() == 3:
            t = t.unsqueeze(0)
        return t.float() if t.dtype.is_floating_point else t.float() / 255.0
    array = np.asarray(image)
    if array.ndim == 3:
        array = array[None]
    if not array.flags.writeable:
        array = array.copy()
    t = torch.from_numpy(np.ascontiguousarray(array)).permute(0, 3, 1, 2)
    return t.float() / 255.0


def classes_from_logits(logits: torch.Tensor, task, threshold=DEFAULT_THRESHOLD) -> torch.Tensor:
    """``B x C x H x W`` logits to ``B x H x W`` class indices.

    Binary: foreground where sigmoid(logit) >= threshold. Multi-class: argmax.
    """
    task = Task.parse(task)
    if task is Task.BINARY:
        return (torch.sigmoid(logits[:, 0]) >= threshold).to(torch.uint8)
    return logits.argmax(dim=1).to(torch.uint8)


@torch.no_grad()
def predict_logits(net, images, device=None):
    device = resolve_device(device) if device is None or isinstance(device, str) else device
    net.to(device).eval()
    return net(to_tensor(images).to(device)).cpu()


def predict_mask(net, image, cfg: InferenceConfig) -> np.ndarray:
    """Class-index mask for one image (``H x W x 3`` uint8 or ``3 x H x W`` float)."""
    logits = predict_logits(net, image, cfg.device)
    return classes_from_logits(logits, cfg.task, cfg.threshold)[0].numpy()


def predict_masks(net, images, cfg: InferenceConfig, batch_size=4):
    out = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start:start + batch_size])
        logits = predict_logits(net, chunk, cfg.device)
        out.extend(classes_from_logits(logits, cfg.task, cfg.threshold).numpy())
    return out


def predict_corpus(checkpoint, data_root, out_root, cfg: InferenceConfig, sequences=None) -> dict:
    """Predict every frame of a prepared corpus.

    Writes display masks (0/255 for binary, raw codes otherwise) under
    ``binary_masks/`` or the task's canonical mask directory, class-index
    masks under ``classes/``, and a manifest.
    """
    net, meta = load_checkpoint(checkpoint)
    trained_task = meta.get("task")
    if trained_task is not None and trained_task != str(cfg.task):
        raise CheckpointError(f"{checkpoint}: trained for task {trained_task!r}, prediction asked for {str(cfg.task)!r}")
    if net.spec.num_classes != cfg.task.num_classes:
        raise CheckpointError(
            f"{checkpoint}: network has {net.spec.num_classes} outputs, task {cfg.task} needs {cfg.task.num_classes}"
        )
    device = resolve_device(cfg.device)
    net.to(device)
    manifest = load_manifest(data_root)
    entries = manifest["samples"]
    if sequences is not None:
        entries = [e for e in entries if e["sequence"] in set(sequences)]
    if not entries:
        raise LayoutError(f"{data_root}: no frames to predict")
    out_root = Path(out_root)
    display_dir = "binary_masks" if cfg.task is Task.BINARY else MASK_DIRS[cfg.task.value]
    records = []
    for entry in entries:
        path = Path(data_root) / entry["image"]
        if not path.is_file():
            raise LayoutError(f"missing input image {path}")
        image = _io.read_image(path)
        classes = predict_mask(net, image, InferenceConfig(cfg.task, cfg.threshold, str(device)))
        name = f"seq{entry['sequence']}/frame{entry['frame']:04d}.png"
        display_sha = _io.write_png(out_root / display_dir / name, decode_prediction(classes, cfg.task))
        class_sha = _io.write_png(out_root / "classes" / name, classes.astype(np.uint8))
        records.append({
            "sequence": entry["sequence"],
            "frame": entry["frame"],
            "display": f"{display_dir}/{name}",
            "classes": f"classes/{name}",
            "sha256": {"display": display_sha, "classes": class_sha},
        })
    pred_manifest = {
        "version": 1,
        "model": net.spec.name,
        "task": str(cfg.task),
        "threshold": cfg.threshold,
        "checkpoint": Path(checkpoint).name,
        "num_predictions": len(records),
        "predictions": records,
    }
    _io.write_json(out_root / "manifest.json", pred_manifest)
    return pred_manifest


class SweepPoint(NamedTuple):
    threshold: float
    mean_iou: float
    foreground_pixels: int


def threshold_sweep(net, val_samples, thresholds, task=Task.BINARY, device=None):
    """Validation IoU (fraction) and predicted foreground area per threshold."""
    if Task.parse(task) is not Task.BINARY:
        raise ConfigError("threshold sweeps apply to the binary task only")
    thresholds = [float(t) for t in thresholds]
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"threshold {t} outside (0, 1)")
    if not val_samples:
        raise ValueError("threshold sweep needs at least one sample")
    truths = [encode_target(s, Task.BINARY) for s in val_samples]
    probs = []
    for s in val_samples:
        probs.append(torch.sigmoid(predict_logits(net, s.image, device))[0, 0].numpy())
    points = []
    for t in thresholds:
        preds = [(p >= t).astype(np.uint8) for p in probs]
        ious = [score_image(p, y, Task.BINARY)[0] for p, y in zip(preds, truths)]
        points.append(SweepPoint(t, float(np.mean(ious)), int(sum(int(p.sum()) for p in preds))))
    return points


# ---------------------------------------------------------------------------
# timing

@dataclass
class TimingReport:
    model: str
    input_shape: tuple
    warmup_reps: int
    timed_reps: int
    mean_ms: float
    std_ms: float
    device: str
    mean_ms_with_transfer: float = None
    std_ms_with_transfer: float = None
    samples_ms: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    def save(self, path):
        _io.write_json(path, self.to_dict())


def _sync(device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def _timed(fn, device):
    _sync(device)
    start = time.perf_counter()
    fn()
    _sync(device)
    return (time.perf_counter() - start) * 1000.0


def benchmark(net, input_shape=(1, 3, 1024, 1280), warmup_reps=5, timed_reps=50, device=None,
              preprocess=None, measure_transfer=None, model_name=None) -> TimingReport:
    """Time forward passes, each wrapped by device synchronization.

    ``preprocess`` (host side) runs on a fresh input before every pass but
    outside the timed region. Transfer-inclusive timing adds the host to
    device copy of the input and the copy back of the logits; it is measured
    by default on accelerators only.
    """
    if timed_reps < 10:
        raise ConfigError(f"timed_reps must be >= 10, got {timed_reps}")
    device = resolve_device(device) if not isinstance(device, torch.device) else device
    if measure_transfer is None:
        measure_transfer = device.type != "cpu"
    net = net.to(device).eval()
    host = torch.rand(*input_shape, generator=torch.Generator().manual_seed(0))

    def prepared():
        return preprocess(host) if preprocess is not None else host

    try:
        with torch.no_grad():
            resident = prepared().to(device)
            for _ in range(warmup_reps):
                net(resident)
            compute = []
            for _ in range(timed_reps):
                resident = prepared().to(device)
                compute.append(_timed(lambda: net(resident), device))
            transfer = []
            if measure_transfer:
                for _ in range(timed_reps):
                    batch = prepared()
                    transfer.append(_timed(lambda: net(batch.to(device)).cpu(), device))
    except (torch.cuda.OutOfMemoryError, RuntimeError) as exc:
        if isinstance(exc, torch.cuda.OutOfMemoryError) or "out of memory" in str(exc).lower():
            raise OutOfMemoryError(f"out of memory benchmarking input shape {tuple(input_shape)} on {device}") from exc
        raise
    spec = getattr(net, "spec", None)
    return TimingReport(
        model=model_name or (spec.name if spec is not None else type(net).__name__),
        input_shape=tuple(input_shape),
        warmup_reps=warmup_reps,
        timed_reps=timed_reps,
        mean_ms=statistics.fmean(compute),
        std_ms=statistics.stdev(compute),
        device=str(device),
        mean_ms_with_transfer=statistics.fmean(transfer) if transfer else None,
        std_ms_with_transfer=statistics.stdev(transfer) if transfer else None,
        samples_ms=compute,
    )
