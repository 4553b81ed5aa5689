"""Fold-based training with the combined loss, validation and checkpoints."""
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _io
from .data import FOLD_TABLE, Task, encode_target, load_samples, split_folds
from .errors import ConfigError, DivergenceError, LayoutError
from .inference import DEFAULT_THRESHOLD, InferenceConfig, predict_masks, resolve_device, to_tensor
from .losses import DEFAULT_EPS, JACCARD_FORMS, combined_loss
from .metrics import score_image
from .models import ModelSpec, build_model, save_checkpoint

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"
TRAIN_LOG = "train_log.json"


@dataclass
class Augmentation:
    horizontal_flip: bool = True
    vertical_flip: bool = True


@dataclass
class TrainConfig:
    model_spec: ModelSpec
    task: Task
    fold_id: int = 0
    data_root: Path = None
    out_dir: Path = None
    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    augmentation: Augmentation = field(default_factory=Augmentation)
    jaccard_form: str = "aggregate"
    eps: float = DEFAULT_EPS
    threshold: float = DEFAULT_THRESHOLD
    max_steps: int = None
    val_every: int = 1
    device: str = None
    encoder_weights: Path = None

    def __post_init__(self):
        self.task = Task.parse(self.task)
        if isinstance(self.augmentation, dict):
            self.augmentation = Augmentation(**self.augmentation)
        self.validate()

    def validate(self):
        if self.model_spec.num_classes != self.task.num_classes:
            raise ConfigError(
                f"task {self.task} needs num_classes={self.task.num_classes}, "
                f"model spec has {self.model_spec.num_classes}"
            )
        if self.fold_id is not None and self.fold_id not in FOLD_TABLE:
            raise ConfigError(f"fold_id must be one of {sorted(FOLD_TABLE)} or None, got {self.fold_id}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ConfigError("batch_size, epochs and val_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.jaccard_form not in JACCARD_FORMS:
            raise ConfigError(f"jaccard_form must be one of {JACCARD_FORMS}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model_spec"] = self.model_spec.to_dict()
        d["task"] = str(self.task)
        for key in ("data_root", "out_dir", "encoder_weights"):
            d[key] = None if d[key] is None else str(d[key])
        return d


@dataclass
class EpochRecord:
    epoch: int
    mean_train_loss: float
    val_mean_iou: float
    val_mean_dice: float
    wall_seconds: float
    steps: int


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(record)

    @property
    def losses(self):
        return [r.mean_train_loss for r in self.records]

    def to_dict(self):
        return {"epochs": [dataclasses.asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d):
        return cls([EpochRecord(**r) for r in d["epochs"]])

    def save(self, path):
        _io.write_json(path, self.to_dict())


def validate(net, val_samples, task, threshold=DEFAULT_THRESHOLD, device=None):
    """Mean per-image IoU and Dice (fractions) over ``val_samples``.

    The network is switched to eval mode for the pass and restored after.
    """
    if not val_samples:
        raise ValueError("validation set is empty")
    task = Task.parse(task)
    was_training = net.training
    cfg = InferenceConfig(task, threshold, device)
    preds = predict_masks(net, [s.image for s in val_samples], cfg)
    net.train(was_training)
    scores = [score_image(p, encode_target(s, task), task) for p, s in zip(preds, val_samples)]
    return {
        "mean_iou": float(np.mean([s[0] for s in scores])),
        "mean_dice": float(np.mean([s[1] for s in scores])),
    }


def _targets(samples, task):
    masks = np.stack([encode_target(s, task) for s in samples])
    t = torch.from_numpy(masks.astype(np.int64))
    return t.unsqueeze(1).float() if task is Task.BINARY else t


def flip_pair(images, targets, horizontal, vertical):
    """Flip images (B x 3 x H x W) and targets (B x [1 x] H x W) together."""
    dims = []
    if vertical:
        dims.append(-2)
    if horizontal:
        dims.append(-1)
    if not dims:
        return images, targets
    return images.flip(dims), targets.flip(dims)


def epoch_batches(num_samples, batch_size, seed, epoch, augmentation):
    """Batch order and flip draws, a pure function of (seed, epoch)."""
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    order = torch.randperm(num_samples, generator=gen).tolist()
    batches = []
    for start in range(0, num_samples, batch_size):
        flips = torch.rand(2, generator=gen).tolist()
        batches.append((
            order[start:start + batch_size],
            augmentation.horizontal_flip and flips[0] < 0.5,
            augmentation.vertical_flip and flips[1] < 0.5,
        ))
    return batches


def _split(config, samples):
    if config.fold_id is None:
        return samples, samples
    split = split_folds(config.fold_id)
    train = [s for s in samples if s.sequence_id in split.train_sequences]
    val = [s for s in samples if s.sequence_id in split.val_sequences]
    return train, val


def train(config: TrainConfig):
    """Train per ``config``; returns ``(best checkpoint path, TrainLog)``.

    ``fold_id=None`` trains on every sequence and validates on the training
    set itself (overfit mode).
    """
    config.validate()
    device = resolve_device(config.device)
    samples = load_samples(config.data_root)
    train_samples, val_samples = _split(config, samples)
    if not train_samples:
        raise LayoutError(f"fold {config.fold_id}: training split is empty in {config.data_root}")
    if not val_samples:
        raise LayoutError(f"fold {config.fold_id}: validation split is empty in {config.data_root}")

    torch.manual_seed(config.seed)
    net = build_model(config.model_spec, encoder_weights=config.encoder_weights).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    images = to_tensor(np.stack([s.image for s in train_samples]))
    targets = _targets(train_samples, config.task)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_log = TrainLog()
    best_iou = -math.inf
    steps = 0
    last_epoch = 0
    base_meta = {"task": str(config.task), "fold": config.fold_id, "seed": config.seed}

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        net.train()
        losses = []
        for batch_id, (index, hflip, vflip) in enumerate(
            epoch_batches(len(train_samples), config.batch_size, config.seed, epoch, config.augmentation)
        ):
            x, y = flip_pair(images[index], targets[index], hflip, vflip)
            x, y = x.to(device), y.to(device)
            optimizer.zero_grad()
            loss = combined_loss(net(x), y, config.task, config.eps, config.jaccard_form)
            value = loss.total.item()
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"loss {value} at epoch {epoch} batch {batch_id}", batch_id=(epoch, batch_id)
                )
            loss.total.backward()
            optimizer.step()
            losses.append(value)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        last_epoch = epoch
        done = config.max_steps is not None and steps >= config.max_steps
        if epoch % config.val_every == 0 or epoch == config.epochs or done:
            metrics = validate(net, val_samples, config.task, config.threshold, device)
        else:
            metrics = {"mean_iou": None, "mean_dice": None}
        record = EpochRecord(
            epoch=epoch,
            mean_train_loss=float(np.mean(losses)),
            val_mean_iou=metrics["mean_iou"],
            val_mean_dice=metrics["mean_dice"],
            wall_seconds=time.perf_counter() - started,
            steps=steps,
        )
        train_log.append(record)
        log.info("epoch %d loss %.4f val iou %s", epoch, record.mean_train_loss, record.val_mean_iou)
        if record.val_mean_iou is not None and record.val_mean_iou > best_iou:
            best_iou = record.val_mean_iou
            save_checkpoint(out_dir / BEST_CHECKPOINT, net, {
                **base_meta, "epoch": epoch,
                "val_mean_iou": record.val_mean_iou, "val_mean_dice": record.val_mean_dice,
            })
        train_log.save(out_dir / TRAIN_LOG)
        if done:
            break

    final = train_log.records[-1]
    save_checkpoint(out_dir / LAST_CHECKPOINT, net, {
        **base_meta, "epoch": last_epoch, "val_mean_iou": final.val_mean_iou, "val_mean_dice": final.val_mean_dice,
    })
    _io.write_json(out_dir / "config.json", config.to_dict())
    return out_dir / BEST_CHECKPOINT, train_log
