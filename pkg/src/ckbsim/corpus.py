"""Source images: the bundled procedural corpus and the raw batch format.

Batch file layout (little-endian)::

    b"CKBI", count, h, w, channels   (4s + 4 x uint32)
    count * h * w * channels uint8   row-major, RGB interleaved

Pixels are returned as float arrays in [0, 1] shaped (count, h, w, 3).
"""

import struct
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, TruncatedRecordError

IMAGE_MAGIC = b"CKBI"
IMAGE_SIZE = 32
BUNDLED = "corpus.bin"
_HEADER = struct.Struct("<4sIIII")


def _gradient(rng, yy, xx):
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return np.clip(t, 0, 1)[..., None] * a + (1 - np.clip(t, 0, 1))[..., None] * b


def _shapes(rng, yy, xx):
    img = np.broadcast_to(rng.uniform(0, 1, 3), yy.shape + (3,)).copy()
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(-0.8, 0.8, 2)
        r = rng.uniform(0.15, 0.5)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = rng.uniform(0, 1, 3)
    return img


def _texture(rng, yy, xx):
    f = rng.uniform(2, 8, 2)
    phase = rng.uniform(0, 2 * np.pi, 3)
    waves = np.sin(np.pi * f[0] * xx[..., None] + phase) * np.cos(np.pi * f[1] * yy)[..., None]
    noise = 0.05 * rng.standard_normal(yy.shape + (3,))
    return np.clip(0.5 + 0.35 * waves * rng.uniform(0.3, 1, 3) + noise, 0, 1)


def make_corpus(n=64, size=IMAGE_SIZE, seed=0):
    """``n`` images cycling through gradients, shapes and textures, quantized
    to 8 bits so the bundled file reproduces them exactly."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    kinds = (_gradient, _shapes, _texture)
    images = np.stack([kinds[i % 3](rng, yy, xx) for i in range(n)])
    return np.round(np.clip(images, 0, 1) * 255) / 255


def write_image_batch(images, path):
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DimensionError(f"expected (count, h, w, 3) images, got {images.shape}")
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0, 1) * 255).astype(np.uint8)
    n, h, w, c = images.shape
    Path(path).write_bytes(_HEADER.pack(IMAGE_MAGIC, n, h, w, c) + images.tobytes())
    return path


def parse_image_batch(data):
    if len(data) < _HEADER.size:
        raise TruncatedRecordError(0, "image batch header is truncated")
    magic, n, h, w, c = _HEADER.unpack_from(data)
    if magic != IMAGE_MAGIC:
        raise DataError("not an image batch file")
    if c != 3:
        raise DimensionError(f"images must have 3 channels, got {c}")
    size = h * w * c
    body = data[_HEADER.size:]
    if len(body) < n * size:
        raise TruncatedRecordError(len(body) // size, f"image {len(body) // size} is truncated")
    pixels = np.frombuffer(body, dtype=np.uint8, count=n * size).reshape(n, h, w, c)
    return pixels.astype(np.float64) / 255


def read_image_batch(path):
    return parse_image_batch(Path(path).read_bytes())


def load_corpus():
    """The bundled 64-image corpus."""
    return parse_image_batch(resources.files("ckbsim").joinpath("data", BUNDLED).read_bytes())


__all__ = ["IMAGE_SIZE", "load_corpus", "make_corpus", "parse_image_batch", "read_image_batch",
           "write_image_batch"]
