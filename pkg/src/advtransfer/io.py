"""File helpers: atomic writes, flat binary tensors, PPM images."""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"PBTENS01"


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tensor(path, arr):
    """Flat binary tensor: magic, u32 ndim, u32 extents, little-endian float64 data."""
    arr = np.asarray(arr, dtype=np.float64)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(path):
    blob = Path(path).read_bytes()
    if blob[:8] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad tensor magic")
    (ndim,) = struct.unpack_from("<I", blob, 8)
    shape = struct.unpack_from(f"<{ndim}I", blob, 12)
    return np.frombuffer(blob, dtype="<f8", offset=12 + 4 * ndim).reshape(shape).astype(np.float64)


def to_uint8(image):
    """Round a (3, H, W) real image to 8-bit, clipped to [0, 255]."""
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6 PPM from a (3, H, W) image with values in [0, 255]."""
    pixels = to_uint8(image)
    c, h, w = pixels.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    """Minimal P6 reader returning a (3, H, W) uint8 array."""
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a P6 file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1)
