"""MNIST IDX ingestion, batching, and synthetic datasets for tests.

IDX files are big-endian: magic, dimension extents, then raw payload
bytes. Images use magic 0x00000803 (three dims), labels 0x00000801 (one
dim). Both gzip-compressed and raw files are accepted. Pixels are scaled
to [0, 1] and standardized with the usual MNIST constants.
"""

from __future__ import annotations

import gzip
import os
import struct
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)

DATA_DIR_ENV = "FLOPNET_DATA_DIR"


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) normalized, or (N, dim) for blobs
    labels: np.ndarray  # (N,) integers in [0, 10)
    split: str = "train"

    def __len__(self):
        return self.images.shape[0]

    def limit(self, n):
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def default_data_dir():
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "flopnet", "mnist")


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: short read at offset {f.tell() - len(buf)} "
                         f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _read_header(f, path, expected_magic, n_dims):
    magic = struct.unpack(">I", _read_exact(f, 4, path))[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: not an IDX file with magic {expected_magic:#010x} "
                         f"(found {magic:#010x})")
    dims = struct.unpack(f">{n_dims}I", _read_exact(f, 4 * n_dims, path))
    return dims


def load_idx(images_path, labels_path, split="train", dtype=np.float32, normalize=True):
    """Parse an IDX image/label file pair into a Dataset.

    Pixel bytes are scaled to [0, 1]; with normalize=True they are then
    standardized as (x - 0.1307) / 0.3081.
    """
    with _open_maybe_gzip(images_path) as f:
        n, rows, cols = _read_header(f, images_path, IMAGE_MAGIC, 3)
        raw = _read_exact(f, n * rows * cols, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with _open_maybe_gzip(labels_path) as f:
        (n_labels,) = _read_header(f, labels_path, LABEL_MAGIC, 1)
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
    if n != n_labels:
        raise ValueError(f"image count {n} does not match label count {n_labels}")
    if labels.size and labels.max() > 9:
        raise ValueError(f"labels outside [0, 10): max {labels.max()}")

    x = images.astype(dtype) / 255.0
    if normalize:
        x = (x - MNIST_MEAN) / MNIST_STD
    return Dataset(images=x.astype(dtype), labels=labels.astype(np.int64), split=split)


def write_idx_images(path, images):
    """Write (N, rows, cols) uint8 images as a raw IDX file."""
    arr = np.ascontiguousarray(images, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError(f"expected (n, rows, cols) images, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *arr.shape))
        f.write(arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 1:
        raise ValueError(f"expected a label vector, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, arr.shape[0]))
        f.write(arr.tobytes())


def load_mnist(data_dir=None, split="train", dtype=np.float32):
    data_dir = data_dir or default_data_dir()
    img, lab = MNIST_FILES[split]
    img_path, lab_path = os.path.join(data_dir, img), os.path.join(data_dir, lab)
    for p in (img_path, lab_path):
        if not os.path.exists(p) and not os.path.exists(p.removesuffix(".gz")):
            raise FileNotFoundError(
                f"MNIST file {p} not found; run with --download or set ${DATA_DIR_ENV}"
            )
    if not os.path.exists(img_path):
        img_path = img_path.removesuffix(".gz")
    if not os.path.exists(lab_path):
        lab_path = lab_path.removesuffix(".gz")
    return load_idx(img_path, lab_path, split=split, dtype=dtype)


def download_mnist(data_dir=None, quiet=False):
    """Fetch the four canonical gzip files into the cache directory."""
    data_dir = data_dir or default_data_dir()
    os.makedirs(data_dir, exist_ok=True)
    names = [f for pair in MNIST_FILES.values() for f in pair]
    for name in names:
        dest = os.path.join(data_dir, name)
        if os.path.exists(dest):
            continue
        last_err = None
        for mirror in MIRRORS:
            url = mirror + name
            try:
                if not quiet:
                    print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as r, open(dest + ".part", "wb") as f:
                    f.write(r.read())
                os.replace(dest + ".part", dest)
                last_err = None
                break
            except (urllib.error.URLError, OSError) as e:
                last_err = e
        if last_err is not None:
            raise RuntimeError(f"could not download {name}: {last_err}")
    return data_dir


def batches(dataset, size, rng=None):
    """Yield (images, labels) minibatches; the last partial batch is kept.

    Pass a seeded Generator (or an int seed) for a per-epoch shuffle; None
    iterates in order.
    """
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    n = len(dataset)
    if rng is None:
        order = np.arange(n)
    else:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        order = rng.permutation(n)
    for start in range(0, n, size):
        idx = order[start : start + size]
        yield dataset.images[idx], dataset.labels[idx]


def synthetic_blobs(classes, n, dim, seed, separation=4.0):
    """Gaussian blobs around per-class unit-basis means, linearly
    separable when separation >= 4 (means are `separation` sigmas apart
    along distinct axes)."""
    if dim < classes:
        raise ValueError(f"dim {dim} must be >= classes {classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes if n else np.zeros(0, dtype=np.int64)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = separation
    images = means[labels] + rng.standard_normal((n, dim))
    return Dataset(images=images.astype(np.float32), labels=labels, split="train")


def synthetic_images(classes, n, seed, shape=(1, 28, 28), template_scale=0.25, split="train"):
    """Image-shaped synthetic classes: one fixed random template per class
    plus unit Gaussian pixel noise. Templates are far enough apart that a
    well-trained classifier reaches near-zero error."""
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    templates = rng.standard_normal((classes, dim)) * template_scale
    labels = rng.integers(0, classes, size=n)
    images = templates[labels] + rng.standard_normal((n, dim))
    return Dataset(images=images.reshape(n, *shape).astype(np.float32),
                   labels=labels.astype(np.int64), split=split)
