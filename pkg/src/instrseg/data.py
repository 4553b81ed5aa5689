"""Corpus ingestion, label encodings, fold splits and the synthetic generator.

Canonical layout under a corpus root::

    images/seq{S}/frame{NNNN}.png             3-channel
    parts_masks/seq{S}/frame{NNNN}.png        codes 0/10/20/30/40
    instruments_masks/seq{S}/frame{NNNN}.png  codes 0..7
    manifest.json
"""
import enum
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _io
from .errors import LabelCodeError, LayoutError, MissingMaskError, ShapeError

RAW_HEIGHT, RAW_WIDTH = 1080, 1920
CROP_HEIGHT, CROP_WIDTH = 1024, 1280
CROP_ROW, CROP_COL = 28, 320

NUM_SEQUENCES = 8

# index i holds the raw code of class i
PARTS_CODES = (0, 10, 20, 30, 40)
PART_NAMES = ("background", "shaft", "wrist", "claspers", "other")

INSTRUMENT_NAMES = (
    "background",
    "bipolar forceps",
    "prograsp forceps",
    "large needle driver",
    "vessel sealer",
    "grasping retractor",
    "monopolar curved scissors",
    "other",
)

BINARY_DISPLAY = 255

MASK_DIRS = {"parts": "parts_masks", "instruments": "instruments_masks"}
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1

# validation pairs per fold; each pair mixes procedures
FOLD_TABLE = {0: (1, 3), 1: (2, 5), 2: (4, 8), 3: (6, 7)}


class Task(str, enum.Enum):
    BINARY = "binary"
    PARTS = "parts"
    INSTRUMENTS = "instruments"

    @property
    def num_classes(self) -> int:
        """Output channels of a network trained for this task."""
        return {"binary": 1, "parts": len(PARTS_CODES), "instruments": len(INSTRUMENT_NAMES)}[self.value]

    @property
    def class_names(self):
        if self is Task.BINARY:
            return ("background", "instrument")
        if self is Task.PARTS:
            return PART_NAMES
        return INSTRUMENT_NAMES

    @property
    def num_labels(self) -> int:
        """Number of distinct class indices in an encoded target, background included."""
        return 2 if self is Task.BINARY else self.num_classes

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(t.value for t in cls)
            raise ValueError(f"unknown task {value!r}; expected one of {choices}") from None

    def __str__(self):
        return self.value


@dataclass
class Sample:
    image: np.ndarray
    parts_mask: np.ndarray
    instrument_mask: np.ndarray
    sequence_id: int
    frame_index: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"image must be H x W x 3, got {self.image.shape}")
        hw = self.image.shape[:2]
        for name in ("parts_mask", "instrument_mask"):
            mask = getattr(self, name)
            if mask.shape != hw:
                raise ShapeError(f"{name} shape {mask.shape} does not match image {hw}")

    @property
    def key(self):
        return self.sequence_id, self.frame_index


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_sequences: frozenset
    val_sequences: frozenset


def crop_frame(frame: np.ndarray) -> np.ndarray:
    """Cut the 1280x1024 camera image out of a 1920x1080 video frame.

    Output pixel (r, c) is input pixel (r + 28, c + 320). Works for
    single-channel masks as well as RGB frames.
    """
    frame = np.asarray(frame)
    if frame.shape[0] != RAW_HEIGHT:
        raise ShapeError(f"frame height is {frame.shape[0]}, expected {RAW_HEIGHT}")
    if frame.ndim < 2 or frame.shape[1] != RAW_WIDTH:
        width = frame.shape[1] if frame.ndim >= 2 else None
        raise ShapeError(f"frame width is {width}, expected {RAW_WIDTH}")
    return frame[CROP_ROW:CROP_ROW + CROP_HEIGHT, CROP_COL:CROP_COL + CROP_WIDTH].copy()


def _lookup_table(codes):
    lut = np.full(256, -1, dtype=np.int16)
    for index, code in enumerate(codes):
        lut[code] = index
    return lut


def _unknown_codes(mask, allowed):
    values, counts = np.unique(mask, return_counts=True)
    bad = [(int(v), int(c)) for v, c in zip(values, counts) if int(v) not in allowed]
    return bad


def _raise_unknown(bad, what):
    detail = ", ".join(f"{v} ({c} px)" for v, c in bad)
    raise LabelCodeError(f"unknown {what} label code(s): {detail}")


def encode_mask(raw_mask: np.ndarray, task, parts_codes=PARTS_CODES) -> np.ndarray:
    """Map a raw code mask to class indices for ``task``.

    ``raw_mask`` is a parts mask for binary/parts and an instrument mask for
    the instruments task.
    """
    task = Task.parse(task)
    raw_mask = np.asarray(raw_mask)
    if task is Task.INSTRUMENTS:
        allowed = range(len(INSTRUMENT_NAMES))
        if raw_mask.size and (raw_mask.min() < 0 or raw_mask.max() >= len(INSTRUMENT_NAMES)):
            _raise_unknown(_unknown_codes(raw_mask, allowed), "instrument")
        return raw_mask.astype(np.uint8)

    if raw_mask.size and (raw_mask.min() < 0 or raw_mask.max() > 255):
        _raise_unknown(_unknown_codes(raw_mask, parts_codes), "parts")
    lut = _lookup_table(parts_codes)
    encoded = lut[raw_mask.astype(np.int64)]
    if (encoded < 0).any():
        _raise_unknown(_unknown_codes(raw_mask, parts_codes), "parts")
    if task is Task.BINARY:
        return (encoded > 0).astype(np.uint8)
    return encoded.astype(np.uint8)


def encode_target(sample: Sample, task, parts_codes=PARTS_CODES) -> np.ndarray:
    task = Task.parse(task)
    raw = sample.instrument_mask if task is Task.INSTRUMENTS else sample.parts_mask
    return encode_mask(raw, task, parts_codes)


def decode_prediction(class_mask: np.ndarray, task, parts_codes=PARTS_CODES) -> np.ndarray:
    """Turn a class-index mask into the display encoding written to disk."""
    task = Task.parse(task)
    class_mask = np.asarray(class_mask)
    if task is Task.BINARY:
        codes = (0, BINARY_DISPLAY)
    elif task is Task.PARTS:
        codes = tuple(parts_codes)
    else:
        codes = tuple(range(len(INSTRUMENT_NAMES)))
    if class_mask.size and (class_mask.min() < 0 or class_mask.max() >= len(codes)):
        bad = sorted({int(v) for v in np.unique(class_mask) if not 0 <= v < len(codes)})
        raise LabelCodeError(f"class index out of range for {task} task: {bad}")
    return np.asarray(codes, dtype=np.uint8)[class_mask.astype(np.int64)]


def split_folds(fold_id: int) -> FoldSplit:
    if fold_id not in FOLD_TABLE:
        raise ValueError(f"fold_id must be one of {sorted(FOLD_TABLE)}, got {fold_id}")
    val = frozenset(FOLD_TABLE[fold_id])
    train = frozenset(range(1, NUM_SEQUENCES + 1)) - val
    return FoldSplit(fold_id, train, val)


# ---------------------------------------------------------------------------
# canonical layout

def _rel(kind, sequence_id, frame_index):
    return f"{kind}/seq{sequence_id}/frame{frame_index:04d}.png"


def sample_paths(sequence_id, frame_index):
    return {
        "image": _rel("images", sequence_id, frame_index),
        "parts_mask": _rel(MASK_DIRS["parts"], sequence_id, frame_index),
        "instruments_mask": _rel(MASK_DIRS["instruments"], sequence_id, frame_index),
    }


def write_sample(out_root, sample: Sample) -> dict:
    out_root = Path(out_root)
    paths = sample_paths(sample.sequence_id, sample.frame_index)
    checksums = {
        "image": _io.write_png(out_root / paths["image"], np.ascontiguousarray(sample.image)),
        "parts_mask": _io.write_png(out_root / paths["parts_mask"], sample.parts_mask.astype(np.uint8)),
        "instruments_mask": _io.write_png(
            out_root / paths["instruments_mask"], sample.instrument_mask.astype(np.uint8)
        ),
    }
    return {
        "sequence": sample.sequence_id,
        "frame": sample.frame_index,
        "height": int(sample.image.shape[0]),
        "width": int(sample.image.shape[1]),
        **paths,
        "sha256": checksums,
    }


def write_manifest(out_root, entries, provenance) -> dict:
    entries = sorted(entries, key=lambda e: (e["sequence"], e["frame"]))
    manifest = {
        "version": MANIFEST_VERSION,
        "provenance": provenance,
        "num_samples": len(entries),
        "samples": entries,
    }
    _io.write_json(Path(out_root) / MANIFEST, manifest)
    return manifest


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise LayoutError(f"{root}: no {MANIFEST}; not a prepared corpus")
    manifest = _io.read_json(path)
    if manifest.get("version") != MANIFEST_VERSION or "samples" not in manifest:
        raise LayoutError(f"{path}: unsupported manifest")
    return manifest


def load_sample(root, entry) -> Sample:
    root = Path(root)
    try:
        return Sample(
            image=_io.read_image(root / entry["image"]),
            parts_mask=_io.read_mask(root / entry["parts_mask"]),
            instrument_mask=_io.read_mask(root / entry["instruments_mask"]),
            sequence_id=int(entry["sequence"]),
            frame_index=int(entry["frame"]),
        )
    except FileNotFoundError as exc:
        raise LayoutError(f"{root}: missing file {exc.filename}") from exc


def load_samples(root, sequences=None):
    manifest = load_manifest(root)
    entries = manifest["samples"]
    if sequences is not None:
        sequences = set(sequences)
        entries = [e for e in entries if e["sequence"] in sequences]
    return [load_sample(root, e) for e in entries]


# ---------------------------------------------------------------------------
# raw corpus ingestion

_DIGITS = re.compile(r"(\d+)")


def _trailing_number(name):
    found = _DIGITS.findall(name)
    return int(found[-1]) if found else None


def instrument_class(folder_name, names=INSTRUMENT_NAMES) -> int:
    """Instrument-type index for a ground-truth folder such as
    ``Left_Prograsp_Forceps_labels``. Unmatched folders count as the last
    ("other") class."""
    words = folder_name.lower().replace("_", " ").replace("-", " ")
    words = re.sub(r"\b(left|right|labels?)\b", " ", words)
    words = " ".join(words.split())
    for index, name in enumerate(names):
        if index and name != "other" and name in words:
            return index
    return len(names) - 1


def _frames_in(directory):
    frames = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
            index = _trailing_number(path.stem)
            if index is not None:
                frames[index] = path
    return frames


def _load_raw_rgb(path):
    image = _io.read_image(path)
    if image.shape[:2] != (RAW_HEIGHT, RAW_WIDTH):
        raise ShapeError(
            f"{path}: raw frame is {image.shape[1]}x{image.shape[0]}, expected {RAW_WIDTH}x{RAW_HEIGHT}"
        )
    return image


def _raw_sequences(raw_root):
    raw_root = Path(raw_root)
    if not raw_root.is_dir():
        raise LayoutError(f"{raw_root}: raw corpus directory does not exist")
    sequences = {}
    for child in sorted(raw_root.iterdir()):
        if not child.is_dir():
            continue
        number = _trailing_number(child.name)
        if number is None:
            continue
        if number in sequences:
            raise LayoutError(f"{raw_root}: two directories map to sequence {number}")
        sequences[number] = child
    if not sequences:
        raise LayoutError(f"{raw_root}: no sequence directories found")
    return sequences


def prepare_dataset(raw_root, out_root, parts_codes=PARTS_CODES, instrument_names=INSTRUMENT_NAMES) -> dict:
    """Ingest a raw corpus into the canonical layout.

    Each sequence directory (name ending in its sequence number, e.g.
    ``instrument_dataset_3``) must contain ``left_frames/`` with 1920x1080
    frames and ``ground_truth/<Instrument>_labels/`` folders holding one
    parts-code mask per frame. Right-channel frames are never read.
    """
    out_root = Path(out_root)
    entries = []
    for sequence_id, seq_dir in _raw_sequences(raw_root).items():
        frames_dir = seq_dir / "left_frames"
        truth_dir = seq_dir / "ground_truth"
        if not frames_dir.is_dir() or not truth_dir.is_dir():
            raise LayoutError(f"{seq_dir}: expected left_frames/ and ground_truth/ subdirectories")
        frames = _frames_in(frames_dir)
        if not frames:
            raise LayoutError(f"{frames_dir}: no frames")
        label_dirs = sorted(p for p in truth_dir.iterdir() if p.is_dir())
        if not label_dirs:
            raise LayoutError(f"{truth_dir}: no instrument label folders")
        label_frames = [(instrument_class(d.name, instrument_names), d, _frames_in(d)) for d in label_dirs]

        for frame_index, frame_path in frames.items():
            image = crop_frame(_load_raw_rgb(frame_path))
            parts = np.zeros((CROP_HEIGHT, CROP_WIDTH), np.uint8)
            instruments = np.zeros_like(parts)
            for type_index, label_dir, masks in label_frames:
                if frame_index not in masks:
                    raise MissingMaskError(
                        f"sequence {sequence_id}: frame {frame_path.name} has no mask in {label_dir.name}"
                    )
                raw = _io.read_mask(masks[frame_index])
                if raw.shape != (RAW_HEIGHT, RAW_WIDTH):
                    raise ShapeError(f"{masks[frame_index]}: mask is {raw.shape[::-1]}, expected 1920x1080")
                raw = crop_frame(raw)
                bad = _unknown_codes(raw, parts_codes)
                if bad:
                    _raise_unknown(bad, f"parts ({masks[frame_index]})")
                hit = raw != 0
                parts[hit] = raw[hit]
                instruments[hit] = type_index
            sample = Sample(image, parts, instruments, sequence_id, frame_index)
            entries.append(write_sample(out_root, sample))

    provenance = {
        "source": "prepared",
        "raw_root": Path(raw_root).name,
        "parts_codes": list(parts_codes),
        "instrument_names": list(instrument_names),
    }
    return write_manifest(out_root, entries, provenance)


# ---------------------------------------------------------------------------
# synthetic corpus

_TYPE_TINT = np.array(
    [
        [0, 0, 0],
        [40, 40, 90],
        [90, 40, 40],
        [40, 90, 40],
        [90, 90, 30],
        [30, 90, 90],
        [90, 30, 90],
        [60, 60, 60],
    ],
    dtype=np.float64,
)


def _segment_distance(rows, cols, p0, p1):
    d = p1 - p0
    length2 = float(d @ d) or 1.0
    t = ((rows - p0[0]) * d[0] + (cols - p0[1]) * d[1]) / length2
    t = np.clip(t, 0.0, 1.0)
    dr = rows - (p0[0] + t * d[0])
    dc = cols - (p0[1] + t * d[1])
    return np.hypot(dr, dc)


def _tissue(rng, h, w, rows, cols):
    base = np.array([rng.uniform(150, 210), rng.uniform(60, 100), rng.uniform(60, 100)])
    field = np.zeros((h, w))
    for _ in range(4):
        fr, fc = rng.uniform(0.5, 4.0, size=2) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(fr * rows / h + fc * cols / w + phase)
    field /= 4.0
    image = base + 25.0 * field[..., None] + rng.normal(0, 6.0, size=(h, w, 3))
    return image


def _draw_instrument(rng, image, parts, instruments, rows, cols):
    h, w = parts.shape
    diag = float(np.hypot(h, w))
    side = rng.integers(4)
    if side == 0:
        start = np.array([rng.uniform(0, h), -5.0])
    elif side == 1:
        start = np.array([rng.uniform(0, h), w + 5.0])
    elif side == 2:
        start = np.array([h + 5.0, rng.uniform(0, w)])
    else:
        start = np.array([-5.0, rng.uniform(0, w)])
    target = np.array([rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w])
    direction = target - start
    direction /= np.linalg.norm(direction)
    type_index = int(rng.integers(1, len(INSTRUMENT_NAMES)))
    tint = _TYPE_TINT[type_index]

    shaft_len = np.linalg.norm(target - start) + rng.uniform(-0.05, 0.05) * diag
    shaft_end = start + direction * shaft_len
    wrist_end = shaft_end + direction * rng.uniform(0.05, 0.08) * diag
    shaft_w = rng.uniform(0.08, 0.11) * diag
    wrist_w = shaft_w * 0.7

    layers = []
    layers.append((_segment_distance(rows, cols, start, shaft_end) <= shaft_w / 2, 1, 55.0))
    layers.append((_segment_distance(rows, cols, shaft_end, wrist_end) <= wrist_w / 2, 2, 165.0))
    jaw_len = rng.uniform(0.07, 0.1) * diag
    spread = rng.uniform(0.25, 0.5)
    normal = np.array([-direction[1], direction[0]])
    for sign in (-1.0, 1.0):
        jaw_dir = direction * np.cos(spread) + sign * normal * np.sin(spread)
        jaw = _segment_distance(rows, cols, wrist_end, wrist_end + jaw_dir * jaw_len) <= wrist_w / 3
        layers.append((jaw, 3, 225.0))
    if rng.random() < 0.5:
        # clip-on accessory: the "other" part code
        centre = start + direction * shaft_len * rng.uniform(0.4, 0.7)
        radius = shaft_w * 0.6
        layers.append((np.hypot(rows - centre[0], cols - centre[1]) <= radius, 4, 110.0))

    for region, part_index, grey in layers:
        colour = grey + tint * 0.5 + rng.normal(0, 4.0, size=(int(region.sum()), 3))
        image[region] = colour
        parts[region] = PARTS_CODES[part_index]
        instruments[region] = type_index


def generate_synthetic(out_root, count: int, size=(128, 160), seed: int = 0) -> dict:
    """Write a seeded corpus of geometric "instruments" on tissue-like texture.

    Sample ``i`` lands in sequence ``i % 8 + 1`` as frame ``i // 8``.
    """
    h, w = (int(v) for v in size)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    for axis, value in (("height", h), ("width", w)):
        if value <= 0 or value % 32:
            raise ShapeError(f"synthetic {axis} {value} is not a positive multiple of 32")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    entries = []
    for i in range(count):
        image = _tissue(rng, h, w, rows, cols)
        parts = np.zeros((h, w), np.uint8)
        instruments = np.zeros((h, w), np.uint8)
        for _ in range(int(rng.integers(1, 3))):
            _draw_instrument(rng, image, parts, instruments, rows, cols)
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        sample = Sample(image, parts, instruments, i % NUM_SEQUENCES + 1, i // NUM_SEQUENCES)
        entries.append(write_sample(out_root, sample))
    provenance = {"source": "synthetic", "seed": int(seed), "size": [h, w], "count": int(count)}
    return write_manifest(out_root, entries, provenance)
