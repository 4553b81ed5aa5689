import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=False) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def encode_png(array: np.ndarray) -> bytes:
    if array.dtype != np.uint8:
        raise ValueError(f"PNG export expects uint8, got {array.dtype}")
    mode = "L" if array.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG", compress_level=3)
    return buf.getvalue()


def write_png(path, array: np.ndarray) -> str:
    """Write ``array`` losslessly and return the sha256 of the file bytes."""
    data = encode_png(array)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format in LOSSY_FORMATS:
            raise ValueError(f"{path}: lossy {im.format} is not accepted for masks")
        if im.mode == "P":
            arr = np.asarray(im)
        elif im.mode in ("L", "I", "I;16"):
            arr = np.asarray(im)
        else:
            # RGB-encoded masks carry the code in every channel
            arr = np.asarray(im.convert("RGB"))[..., 0]
    if arr.dtype != np.uint8:
        if arr.max(initial=0) > 255:
            raise ValueError(f"{path}: mask values exceed 8 bits")
        arr = arr.astype(np.uint8)
    return arr


LOSSY_FORMATS = ("JPEG", "WEBP", "MPO")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
