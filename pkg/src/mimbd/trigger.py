"""Trigger patterns, placement strategies, and dataset poisoning.

Placement coordinates are (x, y) pixel positions of the trigger's top-left
corner; stamping overwrites pixels, so re-stamping at the same spot is a
no-op. Poisoning ops return a fresh Dataset plus a boolean mask aligned with
sample order marking which images were touched.
"""
from __future__ import annotations

import logging
import math
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ImageSample, bilinear_resize
from .errors import ConfigError, PlacementError

__all__ = [
    "TriggerPattern",
    "PlacementSpec",
    "PoisonPlan",
    "make_trigger",
    "place_trigger",
    "stamp_all",
    "poison_labeled",
    "poison_unlabeled_target_class",
    "export_trigger",
    "load_trigger",
]

log = logging.getLogger(__name__)

_STRATEGIES = ("fixed", "random", "center", "localization", "multiple_grid")


@dataclass(frozen=True)
class TriggerPattern:
    kind: str
    size: int
    pixels: np.ndarray
    seed: int | None = None


@dataclass(frozen=True)
class PlacementSpec:
    strategy: str
    count: int = 1
    coords: tuple[int, int] | None = None
    margin: int = 0

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise ConfigError(f"unknown placement strategy {self.strategy!r}")
        if self.count < 1:
            raise ConfigError("placement count must be >= 1")
        if self.strategy == "fixed" and self.coords is None:
            raise ConfigError("fixed placement needs coords")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")


@dataclass(frozen=True)
class PoisonPlan:
    rate: float
    target_class: int
    trigger: TriggerPattern
    placement: PlacementSpec
    flip_label: bool = True

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"poison rate must lie in (0, 1], got {self.rate}")
        if self.target_class < 0:
            raise ConfigError("target_class must be >= 0")


def make_trigger(kind: str, size: int, seed: int | None = None) -> TriggerPattern:
    """Build a trigger: solid white, or a seeded random 4x4 pattern upsampled.

    The seeded_random kind reproduces small random RGB patches stretched to
    the requested size with align-corners bilinear interpolation.
    """
    if size < 1:
        raise ConfigError("trigger size must be >= 1")
    if kind == "white":
        pixels = np.ones((size, size, 3), dtype=np.float32)
    elif kind == "seeded_random":
        if seed is None:
            raise ConfigError("seeded_random trigger needs a seed")
        rng = np.random.default_rng(seed)
        base = rng.random((4, 4, 3)).astype(np.float32)
        pixels = bilinear_resize(base, size) if size != 4 else base
    else:
        raise ConfigError(f"unknown trigger kind {kind!r}")
    return TriggerPattern(kind, size, pixels, seed)


def _grid_positions(h: int, w: int, s: int, count: int) -> list[tuple[int, int]]:
    g = int(math.isqrt(count))
    positions = []
    for r in range(g):
        for c in range(g):
            x = int(math.floor((c + 0.5) * w / g - s / 2 + 0.5))
            y = int(math.floor((r + 0.5) * h / g - s / 2 + 0.5))
            positions.append((x, y))
    if any(x < 0 or y < 0 or x + s > w or y + s > h for x, y in positions):
        raise PlacementError(f"{count} triggers of size {s} cannot fit a {h}x{w} image")
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if (abs(positions[i][0] - positions[j][0]) < s
                    and abs(positions[i][1] - positions[j][1]) < s):
                raise PlacementError("grid placements overlap; trigger too large for grid")
    return positions


def _random_positions(h, w, s, count, margin, rng, distinct):
    lo = margin
    hix, hiy = w - s - margin, h - s - margin
    if hix < lo or hiy < lo:
        raise PlacementError(f"trigger size {s} with margin {margin} leaves the image")
    positions = []
    attempts = 0
    while len(positions) < count:
        x = int(rng.integers(lo, hix + 1))
        y = int(rng.integers(lo, hiy + 1))
        if distinct and any(abs(x - px) < s and abs(y - py) < s for px, py in positions):
            attempts += 1
            if attempts > 1000:
                raise PlacementError(
                    f"could not place {count} non-overlapping triggers of size {s}")
            continue
        positions.append((x, y))
    return positions


def trigger_positions(placement: PlacementSpec, trigger_size: int,
                      image_shape, rng, bbox=None) -> list[tuple[int, int]]:
    """Resolve a placement spec to concrete top-left (x, y) positions."""
    h, w = image_shape[0], image_shape[1]
    s = trigger_size
    if s > min(h, w):
        raise PlacementError(f"trigger size {s} exceeds image {h}x{w}")
    st = placement.strategy
    if st == "fixed":
        x, y = placement.coords
        if x < 0 or y < 0 or x + s > w or y + s > h:
            raise PlacementError(f"fixed coords {placement.coords} leave the image")
        return [(int(x), int(y))] * 1
    if st == "center":
        return [((w - s) // 2, (h - s) // 2)]
    if st == "localization":
        if bbox is None:
            log.warning("localization placement without bbox; falling back to center")
            return [((w - s) // 2, (h - s) // 2)]
        x0, y0, x1, y1 = bbox
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        x = min(max(int(math.floor(cx - s / 2 + 0.5)), 0), w - s)
        y = min(max(int(math.floor(cy - s / 2 + 0.5)), 0), h - s)
        return [(x, y)]
    if st == "random":
        return _random_positions(h, w, s, placement.count, placement.margin, rng,
                                 distinct=False)
    if st == "multiple_grid":
        k = placement.count
        if math.isqrt(k) ** 2 == k:
            return _grid_positions(h, w, s, k)
        return _random_positions(h, w, s, k, placement.margin, rng, distinct=True)
    raise ConfigError(f"unknown placement strategy {st!r}")


def _stamp(image: np.ndarray, trigger: TriggerPattern,
           positions) -> np.ndarray:
    if image.shape[2] != trigger.pixels.shape[2]:
        raise PlacementError("trigger and image channel counts differ")
    out = image.copy()
    s = trigger.size
    for x, y in positions:
        out[y:y + s, x:x + s, :] = trigger.pixels
    return out


def place_trigger(sample: ImageSample, trigger: TriggerPattern,
                  placement: PlacementSpec, rng) -> tuple[ImageSample, list[tuple[int, int]]]:
    """Stamp one sample; returns the stamped copy and the positions used."""
    positions = trigger_positions(placement, trigger.size, sample.image.shape,
                                  rng, bbox=sample.bbox)
    stamped = _stamp(sample.image, trigger, positions)
    return ImageSample(sample.id, stamped, sample.label, sample.bbox), positions


def stamp_all(dataset: Dataset, trigger: TriggerPattern,
              placement: PlacementSpec, seed: int) -> Dataset:
    """Stamp every image in the dataset (labels untouched)."""
    rng = np.random.default_rng(seed)
    images = dataset.images.copy()
    for i in range(len(dataset)):
        bbox = None if dataset.bboxes is None else tuple(dataset.bboxes[i])
        positions = trigger_positions(placement, trigger.size, images[i].shape,
                                      rng, bbox=bbox)
        s = trigger.size
        for x, y in positions:
            images[i, y:y + s, x:x + s, :] = trigger.pixels
    return dataset.with_images(images, name=f"{dataset.name}-stamped")


def poison_labeled(dataset: Dataset, plan: PoisonPlan, seed: int):
    """Type I style poisoning: stamp and relabel samples from non-target classes.

    Picks round(rate * n) victims uniformly from samples whose label differs
    from the target (capped at that population), stamps them, and flips their
    labels to the target class.
    """
    if not dataset.labeled:
        raise ConfigError("poison_labeled needs a labeled dataset")
    if not plan.flip_label:
        raise ConfigError("label-flipping poisoning requires plan.flip_label")
    if plan.target_class >= dataset.num_classes:
        raise ConfigError("target_class outside dataset classes")
    n = len(dataset)
    count = round(plan.rate * n)
    if count == 0:
        raise ConfigError(f"poison rate {plan.rate} selects zero of {n} samples")
    pool = np.flatnonzero(dataset.labels != plan.target_class)
    count = min(count, pool.size)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=count, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    mask = np.zeros(n, dtype=bool)
    s = plan.trigger.size
    for i in chosen:
        bbox = None if dataset.bboxes is None else tuple(dataset.bboxes[i])
        positions = trigger_positions(plan.placement, plan.trigger.size,
                                      images[i].shape, rng, bbox=bbox)
        for x, y in positions:
            images[i, y:y + s, x:x + s, :] = plan.trigger.pixels
        labels[i] = plan.target_class
        mask[i] = True
    out = Dataset(f"{dataset.name}-poisoned", images, labels, dataset.bboxes,
                  dataset.ids, dataset.num_classes)
    return out, mask


def poison_unlabeled_target_class(dataset: Dataset, plan: PoisonPlan, seed: int):
    """Type III style poisoning: stamp target-class images, labels unchanged.

    The pre-training consumer ignores labels; they are kept here only to
    identify the target class and to let downstream code reuse the dataset.
    """
    if not dataset.labeled:
        raise ConfigError("target-class poisoning needs labels to find the class")
    if plan.flip_label:
        raise ConfigError("pre-training poisoning keeps labels; set flip_label=False")
    if plan.target_class >= dataset.num_classes:
        raise ConfigError("target_class outside dataset classes")
    n = len(dataset)
    pool = np.flatnonzero(dataset.labels == plan.target_class)
    if pool.size == 0:
        raise ConfigError(f"no class-{plan.target_class} samples to poison")
    # rate counts against the target class itself, not the whole set
    count = round(plan.rate * pool.size)
    if count == 0:
        raise ConfigError(
            f"poison rate {plan.rate} selects zero of {pool.size} "
            f"target-class samples")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=count, replace=False))
    images = dataset.images.copy()
    mask = np.zeros(n, dtype=bool)
    s = plan.trigger.size
    for i in chosen:
        bbox = None if dataset.bboxes is None else tuple(dataset.bboxes[i])
        positions = trigger_positions(plan.placement, plan.trigger.size,
                                      images[i].shape, rng, bbox=bbox)
        for x, y in positions:
            images[i, y:y + s, x:x + s, :] = plan.trigger.pixels
        mask[i] = True
    out = Dataset(f"{dataset.name}-poisoned", images, dataset.labels,
                  dataset.bboxes, dataset.ids, dataset.num_classes)
    return out, mask


def export_trigger(trigger: TriggerPattern, path: str) -> None:
    """Write trigger pixels as raw little-endian float32 plus a JSON descriptor."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "trigger.f32"), "wb") as f:
        f.write(trigger.pixels.astype("<f4").tobytes())
    with open(os.path.join(path, "trigger.json"), "w") as f:
        json.dump({"kind": trigger.kind, "size": trigger.size,
                   "seed": trigger.seed}, f)


def load_trigger(path: str) -> TriggerPattern:
    from .errors import FormatError
    jpath = os.path.join(path, "trigger.json")
    if not os.path.exists(jpath):
        raise FormatError(f"{path}: missing trigger.json")
    with open(jpath) as f:
        desc = json.load(f)
    size = int(desc["size"])
    pixels = np.fromfile(os.path.join(path, "trigger.f32"), dtype="<f4")
    if pixels.size != size * size * 3:
        raise FormatError(f"{path}: trigger.f32 has {pixels.size} floats, "
                          f"expected {size * size * 3}")
    return TriggerPattern(desc["kind"], size, pixels.reshape(size, size, 3),
                          desc.get("seed"))
