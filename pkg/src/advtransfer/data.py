"""Dataset files and the synthetic desk-scale dataset.

On disk a dataset is a directory with ``images.bin`` and ``labels.csv``.
``images.bin`` starts with the 8-byte magic ``PBDATA01`` followed by four
little-endian u32 values (count, channels, height, width) and then
count*channels*height*width little-endian float64 pixel values in row-major
order. ``labels.csv`` has a header row ``index,label`` and one row per image.
"""

import csv
import io
import struct
from pathlib import Path

import numpy as np

from advtransfer.errors import DatasetFormatError, InvalidArgument
from advtransfer.io import atomic_write_bytes, atomic_write_text
from advtransfer.model import LabeledDataset
from advtransfer.tensor import BLOCK, PIXEL_MAX

DATA_MAGIC = b"PBDATA01"
HEADER = struct.Struct("<8s4I")


def save_dataset(data, path):
    path = Path(path)
    n, c, h, w = data.images.shape
    header = HEADER.pack(DATA_MAGIC, n, c, h, w)
    atomic_write_bytes(path / "images.bin", header + np.ascontiguousarray(data.images, dtype="<f8").tobytes())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label"])
    for i, label in enumerate(data.labels):
        writer.writerow([i, int(label)])
    atomic_write_text(path / "labels.csv", buf.getvalue())


def read_images(path):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise DatasetFormatError("truncated header", path=path, offset=len(blob))
    magic, n, c, h, w = HEADER.unpack_from(blob, 0)
    if magic != DATA_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", path=path, offset=0)
    expected = HEADER.size + 8 * n * c * h * w
    if len(blob) < expected:
        raise DatasetFormatError(
            f"truncated pixel data: expected {expected} bytes, found {len(blob)}", path=path, offset=len(blob)
        )
    if len(blob) > expected:
        raise DatasetFormatError("trailing bytes after pixel data", path=path, offset=expected)
    images = np.frombuffer(blob, dtype="<f8", count=n * c * h * w, offset=HEADER.size)
    images = images.reshape(n, c, h, w).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(images.ravel()) | (images.ravel() < 0) | (images.ravel() > PIXEL_MAX))
    if bad.size:
        raise DatasetFormatError("pixel value outside [0, 255]", path=path, offset=HEADER.size + 8 * int(bad[0]))
    return images


def read_labels(path, count, num_classes=None):
    path = Path(path)
    labels = np.full(count, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "index"):
                continue
            try:
                idx, label = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DatasetFormatError(f"unparseable row {row!r}", path=path, line=lineno) from None
            if not 0 <= idx < count:
                raise DatasetFormatError(f"index {idx} outside [0, {count})", path=path, line=lineno)
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetFormatError(f"label {label} outside [0, {num_classes})", path=path, line=lineno)
            if labels[idx] != -1:
                raise DatasetFormatError(f"duplicate index {idx}", path=path, line=lineno)
            labels[idx] = label
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise DatasetFormatError(f"no label for image {int(missing[0])}", path=path)
    return labels


def load_dataset(path, num_classes=None):
    """Read a dataset directory. ``num_classes`` defaults to max label + 1."""
    path = Path(path)
    images = read_images(path / "images.bin")
    labels = read_labels(path / "labels.csv", len(images), num_classes)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(images, labels, num_classes)


def _pattern(kind, h, w, period, phase):
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    k = 2 * np.pi / period
    if kind == 0:
        return np.sin(k * ii + phase)
    if kind == 1:
        return np.sin(k * jj + phase)
    if kind == 2:
        return np.sin(k * (ii + jj) / np.sqrt(2) + phase)
    if kind == 3:
        return np.sin(k * (ii - jj) / np.sqrt(2) + phase)
    r = np.hypot(ii - ci, jj - cj)
    if kind == 4:
        return np.sin(k * r + phase)
    if kind == 5:
        return np.sign(np.sin(k * ii + phase)) * np.sign(np.sin(k * jj + phase))
    raise InvalidArgument(f"no pattern for class {kind}")


MAX_SYNTH_CLASSES = 6


def synth_dataset(num_classes=4, per_class=200, size=(32, 32), seed=0, noise=12.0):
    """Class-conditioned stripe/ring patterns with random period, phase,
    color and pixel noise. Exactly ``per_class`` images of each class, in
    shuffled order."""
    h, w = size
    if h % BLOCK or w % BLOCK:
        raise InvalidArgument(f"image size {h}x{w} must be divisible by 8")
    if not 2 <= num_classes <= MAX_SYNTH_CLASSES:
        raise InvalidArgument(f"synthetic data supports 2..{MAX_SYNTH_CLASSES} classes")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, h, w))
    for idx, label in enumerate(labels):
        period = rng.uniform(7.0, 11.0)
        phase = rng.uniform(0, 2 * np.pi)
        pat = _pattern(int(label), h, w, period, phase)
        base = rng.uniform(70.0, 185.0, size=3)
        amp = rng.uniform(45.0, 65.0) * rng.uniform(0.7, 1.0, size=3)
        img = base[:, None, None] + amp[:, None, None] * pat[None] + rng.normal(0.0, noise, size=(3, h, w))
        images[idx] = np.clip(img, 0.0, PIXEL_MAX)
    return LabeledDataset(images, labels, num_classes)
