"""Mask generation: gridded square/round occluders, fill colour, detector boxes.

Randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence`` built from ``(seed, view_index)``, so every view draws from
its own reproducible substream regardless of generation order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene_data import Dataset, ValidationError

DEFAULT_FILL = (96, 96, 96)
SHAPES = ("square", "round")
STYLES = ("random", "fixed")


@dataclass(frozen=True)
class MaskSpec:
    level: float = 0.25
    shape: str = "square"
    style: str = "random"
    unit: int = 10
    fill: tuple = DEFAULT_FILL
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValidationError(f"mask level must lie in [0, 1], got {self.level}")
        if self.unit < 1:
            raise ValidationError(f"mask unit must be >= 1, got {self.unit}")
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown mask shape {self.shape!r}")
        if self.style not in STYLES:
            raise ValidationError(f"unknown mask style {self.style!r}")
        fill = tuple(int(c) for c in self.fill)
        if len(fill) != 3 or not all(0 <= c <= 255 for c in fill):
            raise ValidationError(f"fill must be an RGB triple in 0..255, got {self.fill}")
        object.__setattr__(self, "fill", fill)


@dataclass(frozen=True)
class BoundingBox:
    center: tuple   # (row, col) in pixels
    width: float
    height: float


def view_rng(seed: int, view_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), view_index])))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def cell_stamp(unit: int, shape: str) -> np.ndarray:
    """Binary unit x unit footprint of one masked cell."""
    if shape == "square":
        return np.ones((unit, unit), dtype=np.uint8)
    # pixel centres strictly inside the inscribed circle
    c = (np.arange(unit) + 0.5) - unit / 2.0
    d2 = c[:, None] ** 2 + c[None, :] ** 2
    return (d2 < (unit / 2.0) ** 2).astype(np.uint8)


def _select_cells(rng: np.random.Generator, n_cells: int, n_select: int) -> np.ndarray:
    return np.sort(rng.choice(n_cells, size=n_select, replace=False))


def generate_masks(dataset: Dataset, spec: MaskSpec) -> list:
    """One (H, W) uint8 mask per view.

    Only whole ``unit x unit`` cells take part in the selection so every
    occluder is a complete square (or disc); a partial strip at the bottom or
    right border is never masked.
    """
    H, W = dataset.intrinsics.height, dataset.intrinsics.width
    return masks_for_size(H, W, len(dataset.views), spec)


def masks_for_size(height: int, width: int, n_views: int, spec: MaskSpec) -> list:
    u = spec.unit
    if u > min(height, width):
        raise ValidationError(f"mask unit {u} exceeds image size {width}x{height}")
    gr, gc = height // u, width // u
    K = gr * gc
    n_select = round_half_up(spec.level * K)
    if n_select == 0 and spec.level > 0:
        warnings.warn(f"mask level {spec.level} selects no cells out of {K}; masks are empty",
                      RuntimeWarning, stacklevel=2)
    stamp = cell_stamp(u, spec.shape)

    def paint(cells):
        m = np.zeros((height, width), dtype=np.uint8)
        for k in cells:
            r, c = divmod(int(k), gc)
            m[r * u:(r + 1) * u, c * u:(c + 1) * u] = stamp
        return m

    if spec.style == "fixed":
        shared = paint(_select_cells(view_rng(spec.seed, 0), K, n_select))
        return [shared.copy() for _ in range(n_views)]
    return [paint(_select_cells(view_rng(spec.seed, i), K, n_select)) for i in range(n_views)]


def apply_mask(image: np.ndarray, mask: np.ndarray, fill=DEFAULT_FILL) -> np.ndarray:
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValidationError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[mask.astype(bool)] = np.asarray(fill, dtype=image.dtype)
    return out


def mask_from_boxes(boxes: Sequence[BoundingBox], image_size) -> np.ndarray:
    """Union of box rectangles clipped to ``image_size = (height, width)``."""
    H, W = image_size
    if H < 1 or W < 1:
        raise ValidationError(f"invalid image size {image_size}")
    m = np.zeros((H, W), dtype=np.uint8)
    for b in boxes:
        r0 = int(math.floor(b.center[0] - b.height / 2.0))
        c0 = int(math.floor(b.center[1] - b.width / 2.0))
        r1 = r0 + int(round(b.height))
        c1 = c0 + int(round(b.width))
        r0, c0 = max(r0, 0), max(c0, 0)
        r1, c1 = min(r1, H), min(c1, W)
        if r1 > r0 and c1 > c0:
            m[r0:r1, c0:c1] = 1
    return m


def mask_dataset(dataset: Dataset, spec: MaskSpec) -> Dataset:
    """Masked copy of a clean dataset with mask matrices attached to each view."""
    masks = generate_masks(dataset, spec)
    images = [apply_mask(v.image, m, spec.fill) for v, m in zip(dataset.views, masks)]
    return dataset.with_images(images, masks)
