"""Datasets: synthetic shapes, CIFAR-layout binary I/O, and array serialization.

Images are float32 arrays of shape (H, W, C) with values in [0, 1]. A Dataset
stores its samples in contiguous arrays but hands out ImageSample views so
per-sample code stays readable.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

__all__ = [
    "ImageSample",
    "Dataset",
    "generate_shapes",
    "bilinear_resize",
    "resize",
    "split",
    "filter_class",
    "load_cifar_binary",
    "save_cifar_binary",
    "save_dataset",
    "load_dataset",
]

# class -> fill color; chosen saturated and far from the white trigger
_PALETTE = np.array([
    [0.9, 0.1, 0.1],   # red
    [0.1, 0.8, 0.1],   # green
    [0.15, 0.25, 0.9], # blue
    [0.85, 0.8, 0.1],  # yellow
    [0.8, 0.15, 0.8],  # magenta
    [0.1, 0.8, 0.8],   # cyan
    [0.9, 0.5, 0.1],   # orange
    [0.5, 0.1, 0.85],  # violet
    [0.45, 0.75, 0.2], # chartreuse
    [0.1, 0.45, 0.5],  # teal
], dtype=np.float32)

_SHAPE_KINDS = ("square", "circle", "triangle", "diamond", "ring")

_BG_NOISE = 0.12  # uniform noise amplitude around the 0.5 background


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    label: int | None
    bbox: tuple[int, int, int, int] | None


class Dataset:
    """A named stack of same-shape images with optional labels and bboxes."""

    def __init__(self, name, images, labels=None, bboxes=None, ids=None,
                 num_classes=0):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ConfigError(f"images must be (n, H, W, C), got shape {images.shape}")
        n = images.shape[0]
        if n == 0:
            raise ConfigError("dataset must contain at least one image")
        if ids is None:
            ids = [f"{name}-{i:05d}" for i in range(n)]
        ids = list(ids)
        if len(ids) != n or len(set(ids)) != n:
            raise ConfigError("sample ids must be unique and match image count")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ConfigError("labels must be one per sample")
            if n and (labels.min() < 0 or labels.max() >= num_classes):
                raise ConfigError("labels must lie in [0, num_classes)")
        if bboxes is not None:
            bboxes = np.asarray(bboxes, dtype=np.int64)
            if bboxes.shape != (n, 4):
                raise ConfigError("bboxes must be (n, 4)")
            h, w = images.shape[1:3]
            x0, y0, x1, y1 = bboxes[:, 0], bboxes[:, 1], bboxes[:, 2], bboxes[:, 3]
            if n and not ((0 <= x0) & (x0 < x1) & (x1 <= w)
                          & (0 <= y0) & (y0 < y1) & (y1 <= h)).all():
                raise ConfigError("bboxes must satisfy 0 <= x0 < x1 <= W, 0 <= y0 < y1 <= H")
        self.name = name
        self.images = images
        self.labels = labels
        self.bboxes = bboxes
        self.ids = ids
        self.num_classes = int(num_classes)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(
            id=self.ids[i],
            image=self.images[i],
            label=None if self.labels is None else int(self.labels[i]),
            bbox=None if self.bboxes is None else tuple(int(v) for v in self.bboxes[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            name or self.name,
            self.images[indices],
            None if self.labels is None else self.labels[indices],
            None if self.bboxes is None else self.bboxes[indices],
            [self.ids[int(i)] for i in indices],
            self.num_classes,
        )

    def with_images(self, images, name=None, labels=None) -> "Dataset":
        """Copy of this dataset with replaced image (and optionally label) arrays."""
        return Dataset(
            name or self.name,
            images,
            self.labels if labels is None else labels,
            self.bboxes,
            self.ids,
            self.num_classes,
        )


def _shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean mask of a filled shape on a size x size grid."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c, yy - c
    r = size / 2.0
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        # upward triangle: apex top-center, base along the bottom row
        t = yy / max(size - 1, 1)
        return np.abs(dx) <= t * r
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ConfigError(f"unknown shape kind {kind!r}")


def generate_shapes(num_classes: int, per_class: int, image_size: int, seed: int,
                    name: str = "shapes") -> Dataset:
    """Colored geometric shapes on a noisy gray background, with tight bboxes.

    Class k draws shape kind k mod 5 in palette color k. Deterministic per seed.
    """
    if not 1 <= num_classes <= len(_PALETTE):
        raise ConfigError(f"num_classes must lie in [1, {len(_PALETTE)}]")
    if per_class <= 0 or image_size < 16:
        raise ConfigError("per_class must be positive and image_size >= 16")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    images = np.empty((n, image_size, image_size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    bboxes = np.empty((n, 4), dtype=np.int64)
    ids = []
    lo, hi = max(8, image_size // 3), max(10, image_size // 2)
    i = 0
    for c in range(num_classes):
        kind = _SHAPE_KINDS[c % len(_SHAPE_KINDS)]
        color = _PALETTE[c]
        for j in range(per_class):
            s = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(1, image_size - s))
            y0 = int(rng.integers(1, image_size - s))
            img = 0.5 + rng.uniform(-_BG_NOISE, _BG_NOISE,
                                    (image_size, image_size, 3))
            mask = _shape_mask(kind, s)
            jitter = rng.uniform(-0.05, 0.05, (s, s, 3))
            patch = img[y0:y0 + s, x0:x0 + s, :]
            patch[mask] = np.clip(color + jitter, 0.0, 1.0)[mask]
            cols = np.flatnonzero(mask.any(axis=0))
            rows = np.flatnonzero(mask.any(axis=1))
            bboxes[i] = (x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1, y0 + rows[-1] + 1)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            ids.append(f"{name}-c{c}-{j:05d}")
            i += 1
    return Dataset(name, images, labels, bboxes, ids, num_classes)


def bilinear_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Align-corners bilinear resize of an (H, W, C) array to (out, out, C).

    Align-corners means corner pixels keep their source values exactly and
    resizing to the same size is the identity.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, np.int64), np.zeros(n_out, np.int64), np.zeros(n_out)
        coord = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.floor(coord).astype(np.int64)
        i0 = np.minimum(i0, n_in - 2)
        return i0, i0 + 1, coord - i0

    r0, r1, fr = axis_weights(h, out_size)
    c0, c1, fc = axis_weights(w, out_size)
    top = image[r0][:, c0] * (1 - fc)[None, :, None] + image[r0][:, c1] * fc[None, :, None]
    bot = image[r1][:, c0] * (1 - fc)[None, :, None] + image[r1][:, c1] * fc[None, :, None]
    out = top * (1 - fr)[:, None, None] + bot * fr[:, None, None]
    return out.astype(image.dtype, copy=False)


def resize(dataset: Dataset, out_size: int) -> Dataset:
    """Bilinear-resize every image; bboxes rescale proportionally."""
    if out_size < 1:
        raise ConfigError("out_size must be positive")
    h, w = dataset.image_shape[:2]
    out = np.stack([bilinear_resize(im, out_size) for im in dataset.images])
    bboxes = None
    if dataset.bboxes is not None:
        sx, sy = out_size / w, out_size / h
        b = dataset.bboxes.astype(np.float64)
        x0 = np.floor(b[:, 0] * sx)
        y0 = np.floor(b[:, 1] * sy)
        x1 = np.minimum(np.ceil(b[:, 2] * sx), out_size)
        y1 = np.minimum(np.ceil(b[:, 3] * sy), out_size)
        x1 = np.maximum(x1, x0 + 1)
        y1 = np.maximum(y1, y0 + 1)
        bboxes = np.stack([x0, y0, x1, y1], axis=1).astype(np.int64)
    return Dataset(dataset.name, out, dataset.labels, bboxes, dataset.ids,
                   dataset.num_classes)


def split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Deterministic disjoint covering split, stratified by label when labeled.

    Within each stratum, counts follow largest-remainder allocation so the
    split sizes are exact whenever the fractions allow it.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions):
        raise ConfigError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)

    def allocate(count):
        quotas = [f * count for f in fractions]
        base = [int(math.floor(q)) for q in quotas]
        short = count - sum(base)
        order = sorted(range(len(fractions)), key=lambda i: quotas[i] - base[i],
                       reverse=True)
        for i in order[:short]:
            base[i] += 1
        return base

    parts = [[] for _ in fractions]
    if dataset.labeled:
        strata = [np.flatnonzero(dataset.labels == c)
                  for c in range(dataset.num_classes)]
    else:
        strata = [np.arange(len(dataset))]
    for idx in strata:
        idx = rng.permutation(idx)
        counts = allocate(len(idx))
        pos = 0
        for p, c in enumerate(counts):
            parts[p].extend(idx[pos:pos + c].tolist())
            pos += c
    return [dataset.subset(sorted(p), name=f"{dataset.name}-split{i}")
            for i, p in enumerate(parts)]


def filter_class(dataset: Dataset, label: int) -> Dataset:
    if not dataset.labeled:
        raise ConfigError("filter_class needs a labeled dataset")
    if not 0 <= label < dataset.num_classes:
        raise ConfigError(f"label {label} outside [0, {dataset.num_classes})")
    idx = np.flatnonzero(dataset.labels == label)
    return dataset.subset(idx, name=f"{dataset.name}-class{label}")


_CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path: str, name: str | None = None) -> Dataset:
    """Read CIFAR-layout records: 1 label byte then 3072 bytes of R, G, B planes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {raw.size} is not a positive multiple of {_CIFAR_RECORD}")
    rec = raw.reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 100:
        raise FormatError(f"{path}: label byte {labels.max()} out of range (max 99)")
    planes = rec[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    k = max(10, int(labels.max()) + 1)
    return Dataset(name or os.path.basename(path), images, labels,
                   num_classes=k)


def save_cifar_binary(dataset: Dataset, path: str) -> None:
    """Write the bit-exact CIFAR-layout inverse of load_cifar_binary."""
    if not dataset.labeled:
        raise ConfigError("CIFAR layout requires labels")
    if dataset.image_shape != (32, 32, 3):
        raise ConfigError(f"CIFAR layout requires 32x32x3 images, got {dataset.image_shape}")
    n = len(dataset)
    rec = np.empty((n, _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels.astype(np.uint8)
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    rec[:, 1:] = pix.transpose(0, 3, 1, 2).reshape(n, -1)
    rec.tofile(path)


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write a dataset directory: raw little-endian float32 blob + JSON manifest."""
    os.makedirs(path, exist_ok=True)
    blob = dataset.images.astype("<f4").tobytes()
    with open(os.path.join(path, "images.f32"), "wb") as f:
        f.write(blob)
    manifest = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "shape": list(dataset.images.shape),
        "dtype": "<f4",
        "ids": dataset.ids,
        "labels": None if dataset.labels is None else dataset.labels.tolist(),
        "bboxes": None if dataset.bboxes is None else dataset.bboxes.tolist(),
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f)


def load_dataset(path: str) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"{path}: missing manifest.json")
    with open(mpath) as f:
        manifest = json.load(f)
    shape = tuple(manifest["shape"])
    blob = np.fromfile(os.path.join(path, "images.f32"), dtype="<f4")
    if blob.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: images.f32 holds {blob.size} floats, manifest says {np.prod(shape)}")
    return Dataset(
        manifest["name"],
        blob.reshape(shape),
        manifest["labels"],
        manifest["bboxes"],
        manifest["ids"],
        manifest["num_classes"],
    )
