"""Synthetic image tasks and an IDX reader.

Images are returned as ``(N, H, W, C)`` float64 arrays with integer labels.
All generators are driven by a Philox stream keyed on the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["Dataset", "make_blobs", "make_stripes", "load_idx", "load_idx_dataset", "get_dataset"]


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def _blob_images(n: int, size: int, rng: np.random.Generator, noise: float):
    y = np.arange(n) % 2
    rng.shuffle(y)
    # class 0 sits toward the top-left corner, class 1 toward the bottom-right
    base = np.where(y == 0, 0.3, 0.7) * (size - 1)
    centers = base[:, None] + rng.normal(0.0, 0.12 * size, size=(n, 2))
    grid = np.arange(size, dtype=np.float64)
    dy = grid[None, :, None] - centers[:, 0, None, None]
    dx = grid[None, None, :] - centers[:, 1, None, None]
    width = rng.uniform(0.9, 1.6, size=(n, 1, 1))
    img = np.exp(-(dy**2 + dx**2) / (2 * width**2))
    img += rng.normal(0.0, noise, size=img.shape)
    return img[..., None] - img.mean(), y


def make_blobs(n_train: int = 200, n_eval: int = 200, seed: int = 0, size: int = 8, noise: float = 0.15) -> Dataset:
    """Two classes of Gaussian bumps rendered on a ``size x size`` canvas."""
    rng = _rng(seed)
    x, y = _blob_images(n_train + n_eval, size, rng, noise)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], 2)


def make_stripes(n_train: int = 200, n_eval: int = 200, seed: int = 0, size: int = 8, noise: float = 0.3) -> Dataset:
    """Horizontal (class 0) versus vertical (class 1) stripe textures."""
    rng = _rng(seed)
    n = n_train + n_eval
    y = np.arange(n) % 2
    rng.shuffle(y)
    period = rng.uniform(2.5, 4.0, size=(n, 1, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    grid = np.arange(size, dtype=np.float64)
    rows = np.broadcast_to(grid[None, :, None], (n, size, size))
    cols = np.broadcast_to(grid[None, None, :], (n, size, size))
    coord = np.where(y[:, None, None] == 0, rows, cols)
    img = np.sin(2 * np.pi * coord / period + phase)
    img = img + rng.normal(0.0, noise, size=img.shape)
    x = img[..., None]
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], 2)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST container format) into an array."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise FormatError("not an IDX file (bad magic)", 0, path)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{code:02x}", 2, path)
    if len(buf) < 4 + 4 * ndim:
        raise FormatError("truncated IDX header", len(buf), path)
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    offset = 4 + 4 * ndim
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - offset != need:
        raise FormatError(f"expected {need} data bytes, found {len(buf) - offset}", offset, path)
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims)


def load_idx_dataset(images, labels=None, eval_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Grayscale IDX images scaled to [-0.5, 0.5]; labels default to the MNIST sibling name."""
    images = Path(images)
    if labels is None:
        labels = images.with_name(images.name.replace("images", "labels").replace("idx3", "idx1"))
    x = load_idx(images).astype(np.float64)
    y = load_idx(labels).astype(np.int64)
    if x.ndim != 3 or y.shape != (x.shape[0],):
        raise FormatError(f"image/label shapes {x.shape} and {y.shape} do not match", None, images)
    x = x / max(float(x.max()), 1.0) - 0.5
    perm = _rng(seed).permutation(x.shape[0])
    x, y = x[perm, :, :, None], y[perm]
    n_eval = max(1, int(round(eval_fraction * x.shape[0])))
    return Dataset(x[n_eval:], y[n_eval:], x[:n_eval], y[:n_eval], int(y.max()) + 1)


def get_dataset(name: str, seed: int = 0) -> Dataset:
    """``blobs``, ``stripes`` or ``idx:IMAGES[,LABELS]``."""
    if name == "blobs":
        return make_blobs(seed=seed)
    if name == "stripes":
        return make_stripes(seed=seed)
    if name.startswith("idx:"):
        paths = name[4:].split(",")
        return load_idx_dataset(paths[0], paths[1] if len(paths) > 1 else None, seed=seed)
    raise ValueError(f"unknown dataset {name!r} (expected blobs, stripes or idx:PATH)")
