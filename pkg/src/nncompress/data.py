"""Synthetic classification data and IDX (MNIST distribution format) loading."""

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .model import Dataset
from .tensor import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

BLOCK = 2
BLOCK_INTENSITY = 0.6
RAMP_INTENSITY = 0.4


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    train_samples: int = 5000
    test_samples: int = 1000
    image_shape: tuple = (1, 8, 8)
    noise_std: float = 0.3
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def block_positions(height, width):
    """Top-left corners of the non-overlapping 2x2 blocks, row-major."""
    return [(r, c) for r in range(0, height - BLOCK + 1, BLOCK)
            for c in range(0, width - BLOCK + 1, BLOCK)]


def base_patterns(spec):
    """Noise-free template per class: a bright 2x2 block plus a class-scaled vertical ramp."""
    ch, h, w = spec.image_shape
    positions = block_positions(h, w)
    if spec.num_classes > len(positions):
        raise ConfigError(f"{spec.num_classes} classes requested but only {len(positions)} "
                          f"block positions fit in a {h}x{w} image")
    if spec.num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    ramp = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    pats = np.zeros((spec.num_classes, ch, h, w))
    for k in range(spec.num_classes):
        r, c = positions[k]
        pats[k] += RAMP_INTENSITY * (k / max(spec.num_classes - 1, 1)) * ramp
        pats[k, :, r:r + BLOCK, c:c + BLOCK] += BLOCK_INTENSITY
    return pats


def _sample(pats, n, noise_std, rng, dtype):
    k = pats.shape[0]
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    x = pats[labels] + rng.normal(0.0, noise_std, size=(n,) + pats.shape[1:])
    return Dataset(x.astype(dtype), labels, k)


def gen_synthetic(spec=SyntheticSpec(), dtype=np.float32):
    """Return ``(train, test)``; a pure function of ``spec``."""
    pats = base_patterns(spec)
    rng = make_rng(spec.seed)
    train = _sample(pats, spec.train_samples, spec.noise_std, rng, dtype)
    test = _sample(pats, spec.test_samples, spec.noise_std, rng, dtype)
    return train, test


def save_dataset(dataset, path):
    np.savez(path, inputs=dataset.inputs, labels=dataset.labels,
             num_classes=np.int64(dataset.num_classes))


def load_dataset(path):
    try:
        with np.load(path) as z:
            return Dataset(z["inputs"], z["labels"], int(z["num_classes"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"cannot read dataset {path}: {exc}") from exc


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ParseError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise ParseError(f"{path}: payload has {len(raw) - header} bytes, header says {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10, dtype=np.float32):
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float64) / 255.0).astype(dtype)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (n x H x W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_data_dir(directory):
    """Load ``(train, test)`` from a directory written by ``gen-data`` or holding IDX files."""
    d = Path(directory)
    if (d / "train.npz").exists() and (d / "test.npz").exists():
        return load_dataset(d / "train.npz"), load_dataset(d / "test.npz")
    if all((d / name).exists() for pair in IDX_NAMES.values() for name in pair):
        return tuple(load_idx(d / IDX_NAMES[s][0], d / IDX_NAMES[s][1]) for s in ("train", "test"))
    raise FileNotFoundError(f"{directory}: no train.npz/test.npz or IDX files found")
