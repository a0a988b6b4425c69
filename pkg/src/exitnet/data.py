"""Datasets: a synthetic image generator and a binary tensor file format.

Images live in memory as float32 NCHW arrays with values in [0, 1]. On
disk the tensor file is self-describing: a little-endian uint32 header
(count, H, W, C, class count), the images as float32 in HWC order, then
the labels as uint32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("<5I")


class TensorFileError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (count, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (count,) int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.float32:
            raise ValueError("images must be float32 with shape (count, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one per image")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside class range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        _, c, h, w = self.images.shape
        return (h, w, c)

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.class_count)


def _class_template(label: int, class_count: int, h: int, w: int, c: int) -> np.ndarray:
    """Smooth per-class pattern: an oriented grating with a class tint."""
    freq = 1.5 + (label % 4)
    theta = np.pi * label / class_count
    phase = 2.0 * np.pi * label / class_count
    v, u = np.meshgrid(np.linspace(0, 1, h, endpoint=False),
                       np.linspace(0, 1, w, endpoint=False), indexing="ij")
    grating = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
    tint_rng = np.random.default_rng(1000 + label)
    tint = tint_rng.uniform(0.4, 1.0, size=c)
    return 0.5 + 0.3 * grating[None, :, :] * tint[:, None, None]


def synthetic_dataset(count: int, class_count: int = 10,
                      input_shape: tuple[int, int, int] = (32, 32, 3),
                      seed: int = 0, noise: float = 0.12) -> Dataset:
    """Balanced labeled images: class template plus gaussian pixel noise.

    Deterministic given the seed. Templates are smooth and distinct per
    class, so small convolutional models separate them quickly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    h, w, c = input_shape
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % class_count
    rng.shuffle(labels)
    templates = np.stack([_class_template(k, class_count, h, w, c) for k in range(class_count)])
    images = templates[labels] + rng.normal(0.0, noise, size=(count, c, h, w))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images=images, labels=labels.astype(np.int64), class_count=class_count)


def train_validation_split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def save_tensor_file(path, dataset: Dataset) -> None:
    count, c, h, w = dataset.images.shape
    nhwc = np.ascontiguousarray(dataset.images.transpose(0, 2, 3, 1))
    with open(path, "wb") as f:
        f.write(HEADER.pack(count, h, w, c, dataset.class_count))
        f.write(nhwc.astype("<f4").tobytes())
        f.write(dataset.labels.astype("<u4").tobytes())


def load_tensor_file(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER.size:
        raise TensorFileError("file too short for header")
    count, h, w, c, class_count = HEADER.unpack_from(raw)
    image_bytes = count * h * w * c * 4
    label_bytes = count * 4
    expected = HEADER.size + image_bytes + label_bytes
    if len(raw) != expected:
        raise TensorFileError(f"expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype="<f4", count=count * h * w * c, offset=HEADER.size)
    images = images.reshape(count, h, w, c).transpose(0, 3, 1, 2)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=HEADER.size + image_bytes)
    if not np.isfinite(images).all():
        raise TensorFileError("non-finite image values")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise TensorFileError("image values outside [0, 1]")
    if labels.size and labels.max() >= class_count:
        raise TensorFileError("label outside class range")
    return Dataset(images=np.ascontiguousarray(images).astype(np.float32),
                   labels=labels.astype(np.int64), class_count=class_count)
