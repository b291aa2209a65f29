"""Datasets: IDX ingestion, synthetic generators and batch samplers."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from etr.errors import IdxFormatError

DATA_DIR_ENV = "ETR_DATA_DIR"

_IDX_TYPES = {0x08: np.dtype(">u1")}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Feature matrix in ``[0, 1]`` with optional integer labels.

    ``targets`` holds real-valued regression targets when present.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"
    split: str = "train"
    num_classes: int | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x p matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError("labels must have one entry per sample")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1 if self.n else 0
            if self.n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self):
        return self.features.shape[0]

    def head(self, limit):
        """First ``limit`` samples (all of them if ``limit`` is None)."""
        if limit is None or limit >= self.n:
            return self
        return Dataset(
            self.features[:limit],
            None if self.labels is None else self.labels[:limit],
            self.name,
            self.split,
            self.num_classes,
            None if self.targets is None else self.targets[:limit],
        )


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def parse_idx(buf):
    """Decode an IDX byte string into an array of raw values."""
    if len(buf) < 4:
        raise IdxFormatError("truncated header", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError("bad magic: leading bytes must be zero", 0)
    type_byte, rank = buf[2], buf[3]
    if type_byte not in _IDX_TYPES:
        raise IdxFormatError(f"unsupported type byte 0x{type_byte:02x}", 2)
    header_end = 4 + 4 * rank
    if len(buf) < header_end:
        raise IdxFormatError("truncated dimension list", len(buf))
    dims = struct.unpack(f">{rank}I", buf[4:header_end])
    dtype = _IDX_TYPES[type_byte]
    expected = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < expected:
        raise IdxFormatError(
            f"truncated payload: expected {expected} bytes, found {len(buf)}", len(buf)
        )
    if len(buf) > expected:
        raise IdxFormatError("trailing bytes after payload", expected)
    return np.frombuffer(buf, dtype=dtype, offset=header_end).reshape(dims).astype(np.uint8)


def read_idx(path):
    """Read an IDX file (optionally gzip-compressed) as a uint8 array."""
    with _open(path) as f:
        return parse_idx(f.read())


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned byte tensors can be written")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array).tobytes())
    os.replace(tmp, path)


def load_idx_images(path):
    """IDX image tensor flattened to ``n x pixels`` and scaled to ``[0, 1]``."""
    raw = read_idx(path)
    return raw.reshape(raw.shape[0], -1).astype(float) / 255.0


def load_idx_labels(path):
    return read_idx(path).astype(np.int64).ravel()


def data_dir(override=None):
    if override:
        return Path(override)
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory=None, split="train", limit=None, name="mnist"):
    """MNIST-format dataset (MNIST or Fashion-MNIST) from a directory."""
    directory = data_dir(directory)
    images, labels = MNIST_FILES[split]
    ds = Dataset(
        load_idx_images(_find(directory, images)),
        load_idx_labels(_find(directory, labels)),
        name=name,
        split=split,
        num_classes=10,
    )
    return ds.head(limit)


def _minmax(x):
    lo, hi = x.min(initial=0.0), x.max(initial=1.0)
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def gaussian_blobs(classes, dim, sep, seed, n_per_class=100, scale_spread=0.0):
    """Isotropic Gaussian clusters whose centres are ``sep`` apart on average.

    ``scale_spread > 0`` multiplies feature ``j`` by ``10**(-scale_spread*u_j)``
    with ``u_j`` uniform on ``[0, 1]``, giving heterogeneous feature scales
    like natural images.  Features are finally rescaled into ``[0, 1]``.
    """
    rng = np.random.default_rng(seed)
    n = classes * n_per_class
    if n == 0:
        return Dataset(np.zeros((0, dim)), np.zeros(0, np.int64), "blobs", num_classes=classes)
    centres = rng.standard_normal((classes, dim)) * (sep / np.sqrt(2.0 * dim))
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centres[labels] + rng.standard_normal((n, dim)) / np.sqrt(dim)
    if scale_spread > 0:
        x = x * 10.0 ** (-scale_spread * rng.uniform(size=dim))
    order = rng.permutation(n)
    return Dataset(_minmax(x[order]), labels[order], "blobs", num_classes=classes)


def _stroke_template(rng, side, strokes, margin):
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    img = np.zeros((side, side))
    lo, hi = margin, side - 1 - margin
    for _ in range(strokes):
        p, q = rng.uniform(lo, hi, 2), rng.uniform(lo, hi, 2)
        for t in np.linspace(0.0, 1.0, 12):
            cy, cx = p + t * (q - p)
            img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 1.5))
    return img


def synthetic_digits(n, seed, classes=10, side=28, strokes=3, shift=2, noise=0.15):
    """Image-like stand-in for MNIST.

    Each class is a template of ``strokes`` thick line segments inside a
    blank border.  Samples shift the template by up to ``shift`` pixels,
    rescale its intensity and add noise on the strokes, then clip to
    ``[0, 1]``.  Border pixels stay exactly zero, as in scanned digits.
    """
    rng = np.random.default_rng(seed)
    margin = shift + 5
    templates = [_stroke_template(rng, side, strokes, margin) for _ in range(classes)]
    labels = rng.integers(0, classes, size=n)
    x = np.empty((n, side * side))
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-shift, shift + 1, 2)
        img = np.roll(templates[c], (dy, dx), axis=(0, 1))
        img = img * rng.uniform(0.6, 1.2) + noise * rng.standard_normal(img.shape) * (img > 0.05)
        img[img < 0.05] = 0.0
        x[i] = np.clip(img, 0.0, 1.0).ravel()
    return Dataset(x, labels, "digits", num_classes=classes)


def random_regression(dim, n, seed, outputs=1, noise=0.1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, dim))
    coef = rng.standard_normal((dim, outputs))
    y = x @ coef + noise * rng.standard_normal((n, outputs))
    return Dataset(x, None, "regression", targets=y)


def make_synthetic(kind, **params):
    """``kind`` is ``"blobs"`` (GaussianBlobs), ``"digits"`` or ``"regression"``."""
    if kind == "blobs":
        return gaussian_blobs(**params)
    if kind == "regression":
        return random_regression(**params)
    if kind == "digits":
        return synthetic_digits(**params)
    raise ValueError(f"unknown synthetic dataset {kind!r}")


class BatchSampler:
    """Seeded index-batch generator.

    ``without_replacement`` draws an independent batch each call;
    ``epoch_shuffle`` walks through a fresh permutation each epoch, so the
    last batch of an epoch may be shorter when ``batch_size`` does not
    divide ``n``.
    """

    SCHEMES = ("without_replacement", "epoch_shuffle")

    def __init__(self, n, batch_size, seed=0, scheme="without_replacement"):
        if scheme not in self.SCHEMES:
            raise ValueError(f"unknown sampling scheme {scheme!r}")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self.n = int(n)
        self.batch_size = int(batch_size)
        self.seed = seed
        self.scheme = scheme
        self.rng = np.random.default_rng(seed)
        self.calls = 0
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self):
        self.calls += 1
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        if self.batch_size >= self.n:
            return np.arange(self.n)
        if self.scheme == "without_replacement":
            return self.rng.choice(self.n, size=self.batch_size, replace=False)
        if self._pos >= self._perm.shape[0]:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        batch = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += batch.shape[0]
        return batch


def next_batch(sampler):
    return sampler.next_batch()
