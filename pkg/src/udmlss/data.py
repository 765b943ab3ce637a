"""Datasets, augmentation, quarter-turn rotation and batch construction."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# independent RNG streams
STREAM_INIT, STREAM_CLUSTER, STREAM_SAMPLE, STREAM_AUGMENT, STREAM_ROTATION, STREAM_EVAL = range(6)


def make_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """Generator keyed by (seed, stream, *keys); no state is shared between calls."""
    return np.random.default_rng([int(seed), int(stream), *[int(k) for k in keys]])


@dataclass
class RasterDataset:
    images: np.ndarray                      # [n, c, h, w] in [0, 1]
    true_labels: np.ndarray | None = None   # evaluation only
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[2] != self.images.shape[3]:
            raise ValueError(f"images must be [n, c, s, s], got {self.images.shape}")
        if self.ids is None:
            self.ids = np.arange(self.images.shape[0], dtype=np.int64)
        if self.true_labels is not None and len(self.true_labels) != len(self):
            raise ValueError("true_labels length differs from image count")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------- IDX

def _read_idx(path, expect_magic: int, what: str) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: {len(buf)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} for {what} (expected 0x{expect_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: header needs {header} bytes, file has {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(buf) - header
    if have != need:
        raise FormatError(f"{path}: payload has {have} bytes, header dims {dims} require {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> RasterDataset:
    raw = _read_idx(images_path, IDX_IMAGES, "images")
    images = (raw.astype(np.float32) / 255.0)[:, None, :, :]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS, "labels").astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images")
    return RasterDataset(np.ascontiguousarray(images), labels)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    Path(path).write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())


def to_bytes(images: np.ndarray) -> np.ndarray:
    """[n, 1, h, w] floats in [0, 1] to [n, h, w] uint8."""
    return np.clip(np.rint(images[:, 0] * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- synthetic data

def _class_frequencies(classes: int) -> np.ndarray:
    # distinct frequencies (cycles per image), interleaved so neighbouring angles differ
    base = np.linspace(2.0, 4.5, classes)
    order = np.argsort([(c * 5) % classes for c in range(classes)], kind="stable")
    return base[order]


def synth_dataset(classes: int, per_class: int, size: int, seed: int, split: int = 0,
                  noise: float = 0.05, brightness=(0.5, 0.5), contrast=(0.04, 0.08)) -> RasterDataset:
    """Oriented skewed-grating classes, grayscale, ``size`` x ``size``.

    Class c is a grating at angle c * 180 / classes degrees with its own
    spatial frequency and a random phase. The wave profile carries a second
    harmonic so that a half turn is not a phase shift, which keeps all four
    rotations distinguishable. Per-image brightness and contrast are drawn
    uniformly from the given ranges as class-independent nuisances.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng([int(seed), int(split)])
    freqs = _class_frequencies(classes)
    coords = (np.arange(size) - (size - 1) / 2.0) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    n = classes * per_class
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    offsets = rng.uniform(*brightness, size=n)
    amps = rng.uniform(*contrast, size=n)
    noise_field = rng.standard_normal((n, size, size))
    for i in range(n):
        c = labels[i]
        theta = np.deg2rad(c * 180.0 / classes)
        u = 2 * np.pi * freqs[c] * (xx * np.cos(theta) - yy * np.sin(theta)) + phases[i]
        wave = (np.sin(u) + 0.5 * np.sin(2 * u)) / 1.3
        img = offsets[i] + amps[i] * wave + noise * noise_field[i]
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return RasterDataset(images, labels)


# ---------------------------------------------------------------- augmentation and rotation

def crop_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, crop back at offset (dy, dx), optionally mirror left-right."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, seed, pad: int = 4, flip: bool = True) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    do_flip = bool(rng.random() < 0.5) and flip
    return crop_flip(image, int(dy), int(dx), do_flip, pad)


def augment_batch(images: np.ndarray, seed: int, epoch: int, step: int, ids, flip: bool = True,
                  stream: int = STREAM_AUGMENT) -> np.ndarray:
    """Augment each image with its own generator keyed by (seed, epoch, step, slot, id)."""
    return np.stack([
        augment(img, make_rng(seed, stream, epoch, step, slot, sid), flip=flip)
        for slot, (img, sid) in enumerate(zip(images, ids))
    ])


def rotate90(image: np.ndarray, q: int) -> np.ndarray:
    """``q`` clockwise quarter turns over the last two axes (exact permutation)."""
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"rotate90 needs a square image, got {image.shape[-2:]}")
    return np.ascontiguousarray(np.rot90(image, k=-(int(q) % 4), axes=(-2, -1)))


# ---------------------------------------------------------------- batch builders

def sample_pk_batch(pseudo, P: int, M: int, seed) -> np.ndarray:
    """P distinct clusters, M members each (with replacement only if the cluster is small)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    members = pseudo.members()
    nonempty = np.array([c for c, m in enumerate(members) if len(m)], dtype=np.int64)
    if len(nonempty) < P:
        raise ValueError(f"need {P} nonempty clusters, have {len(nonempty)}")
    chosen = rng.choice(nonempty, size=P, replace=False)
    out = [rng.choice(members[c], size=M, replace=len(members[c]) < M) for c in chosen]
    return np.concatenate(out).astype(np.int64)


def build_rotation_batch(images: np.ndarray, indices) -> tuple[np.ndarray, np.ndarray]:
    """Four rotations of each indexed image, kept contiguous; labels are the turn counts."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("rotation batch indices must be distinct")
    out = np.stack([rotate90(images[i], q) for i in idx for q in range(4)])
    z = np.tile(np.arange(4, dtype=np.int64), len(idx))
    return out, z


def sample_rotation_indices(n: int, m_unique: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(m_unique, n), replace=False).astype(np.int64)
