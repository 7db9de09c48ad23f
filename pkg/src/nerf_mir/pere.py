"""Patch-entropy ray budgeting.

Every image is cut into an l x l grid; each patch gets the Shannon entropy
of its per-channel intensity histogram, entropies are normalised into
weights, and weights are turned into integer ray counts with a one-ray
floor. Training draws rays patch-by-patch in proportion to those counts.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scene_data import PatchGrid, ValidationError


@dataclass(frozen=True)
class PatchHistogram:
    counts: np.ndarray   # (3, 256) int64
    total: int


@dataclass(frozen=True)
class PatchWeights:
    entropy: np.ndarray
    weight: np.ndarray


@dataclass(frozen=True)
class RayBudget:
    counts: np.ndarray   # (K,) int64, every entry >= 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def patch_histogram(image: np.ndarray, rect) -> PatchHistogram:
    r0, c0, r1, c1 = (int(v) for v in rect)
    H, W = image.shape[:2]
    if not (0 <= r0 <= r1 <= H and 0 <= c0 <= c1 <= W):
        raise ValidationError(f"rect {rect} outside {H}x{W} image")
    if r1 == r0 or c1 == c0:
        raise ValidationError(f"empty rect {rect}")
    patch = np.asarray(image[r0:r1, c0:c1]).reshape(-1, image.shape[2]).astype(np.int64)
    counts = np.stack([np.bincount(patch[:, c], minlength=256) for c in range(patch.shape[1])])
    return PatchHistogram(counts, patch.shape[0])


def patch_entropy(hist: PatchHistogram, base: Optional[float] = None) -> float:
    """Channel-summed Shannon entropy in nats (or in ``base`` if given)."""
    p = hist.counts[hist.counts > 0] / hist.total
    h = float(-(p * np.log(p)).sum())
    return h / np.log(base) if base is not None else h


def entropy_map(image: np.ndarray, grid: PatchGrid, base: Optional[float] = None) -> np.ndarray:
    """Entropy of every patch in the grid, vectorised over patches."""
    image = np.asarray(image)
    if image.shape[:2] != (grid.height, grid.width):
        raise ValidationError(f"grid {grid.height}x{grid.width} does not match image {image.shape[:2]}")
    K = grid.K
    pidx = grid.patch_index_map().ravel()
    px = image.reshape(-1, image.shape[2]).astype(np.int64)
    areas = grid.areas().astype(np.float64)
    H = np.zeros(K)
    for c in range(px.shape[1]):
        counts = np.bincount(pidx * 256 + px[:, c], minlength=K * 256).reshape(K, 256)
        p = counts / areas[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            H -= np.where(counts > 0, p * np.log(np.where(counts > 0, p, 1.0)), 0.0).sum(axis=1)
    if base is not None:
        H /= np.log(base)
    return H


def normalize_entropies(entropy: np.ndarray) -> PatchWeights:
    entropy = np.asarray(entropy, dtype=np.float64)
    total = entropy.sum()
    if total > 0:
        w = entropy / total
    else:
        w = np.full(len(entropy), 1.0 / len(entropy))
    return PatchWeights(entropy, w)


def patch_weights(image: np.ndarray, grid: PatchGrid, base: Optional[float] = None) -> PatchWeights:
    return normalize_entropies(entropy_map(image, grid, base))


def uniform_weights(K: int) -> PatchWeights:
    return PatchWeights(np.zeros(K), np.full(K, 1.0 / K))


def default_w_min(K: int, n_p: float) -> float:
    """Smallest weight that earns a whole ray."""
    return 1.0 / (K * n_p)


def assign_rays(weights: PatchWeights, n_p: float = 2, w_min: Optional[float] = None) -> RayBudget:
    """Integer ray counts per patch.

    Patches under ``w_min`` get one ray, the rest ``W * K * n_p``. The real
    valued allocation is integerised by flooring and then handing the
    leftover rays (up to the rounded allocation total) to the largest
    fractional remainders; ties go to the lower patch index.
    """
    w = np.asarray(weights.weight, dtype=np.float64)
    K = len(w)
    if n_p < 1:
        raise ValidationError(f"rays per patch must be >= 1, got {n_p}")
    if w_min is None:
        w_min = default_w_min(K, n_p)
    elif not 0 <= w_min < 1:
        raise ValidationError(f"w_min must lie in [0, 1), got {w_min}")
    raw = np.where(w < w_min, 1.0, w * K * n_p)
    base = np.floor(raw)
    target = int(np.floor(raw.sum() + 0.5))
    short = target - int(base.sum())
    if short > 0:
        rem = raw - base
        order = np.argsort(-rem, kind="stable")
        base[order[:short]] += 1
    counts = np.maximum(base, 1).astype(np.int64)
    return RayBudget(counts)


def compute_budget(image: np.ndarray, grid: PatchGrid, n_p: float = 2, w_min: Optional[float] = None,
                   use_entropy: bool = True):
    """Weights and budget for one view; ``use_entropy=False`` gives the uniform allocation."""
    w = patch_weights(image, grid) if use_entropy else uniform_weights(grid.K)
    return w, assign_rays(w, n_p, w_min)


def sample_ray_pixels(budgets, grid: PatchGrid, seed=0, n_rays: Optional[int] = None) -> np.ndarray:
    """Draw ray pixels for one epoch.

    ``budgets`` is a single :class:`RayBudget` or one per view. Patches are
    drawn with probability proportional to their count (pooled over views),
    then a pixel is chosen uniformly inside the drawn patch's rectangle.
    Returns an ``(n, 3)`` int array of ``(view, row, col)``; ``n`` defaults
    to the budget total.
    """
    if isinstance(budgets, RayBudget):
        budgets = [budgets]
    counts = np.concatenate([np.asarray(b.counts, dtype=np.float64) for b in budgets])
    K = grid.K
    if len(counts) != K * len(budgets):
        raise ValidationError("budget length does not match the patch grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(counts.sum()) if n_rays is None else int(n_rays)
    flat = rng.choice(len(counts), size=n, p=counts / counts.sum())
    view, patch = np.divmod(flat, K)
    rects = grid.rects[patch]
    rows = rects[:, 0] + np.floor(rng.random(n) * (rects[:, 2] - rects[:, 0])).astype(np.int64)
    cols = rects[:, 1] + np.floor(rng.random(n) * (rects[:, 3] - rects[:, 1])).astype(np.int64)
    return np.stack([view, rows, cols], axis=1)


# ---------------------------------------------------------------------------
# visualisation / export

# blue -> cyan -> green -> yellow -> red, evenly spaced stops
RAMP = np.array([
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)


def color_ramp(x: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB along ``RAMP`` (piecewise linear)."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    pos = x * (len(RAMP) - 1)
    i = np.minimum(np.floor(pos).astype(int), len(RAMP) - 2)
    f = (pos - i)[..., None]
    rgb = RAMP[i] * (1 - f) + RAMP[i + 1] * f
    return np.round(rgb).astype(np.uint8)


def heatmap(budget: RayBudget, grid: PatchGrid) -> np.ndarray:
    """(H, W, 3) heat map of per-patch ray counts, min-max normalised.

    A constant budget maps to the middle of the ramp (green).
    """
    c = np.asarray(budget.counts, dtype=np.float64)
    lo, hi = c.min(), c.max()
    v = np.full_like(c, 0.5) if hi == lo else (c - lo) / (hi - lo)
    return color_ramp(v)[grid.patch_index_map()]


def write_budget_csv(path, weights: PatchWeights, budget: RayBudget) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patch_index", "entropy", "weight", "N_k"])
        for k, (h, wt, n) in enumerate(zip(weights.entropy, weights.weight, budget.counts)):
            w.writerow([k, repr(float(h)), repr(float(wt)), int(n)])


def budgets_for_views(images: Sequence[np.ndarray], grid: PatchGrid, n_p: float = 2,
                      w_min: Optional[float] = None, use_entropy: bool = True):
    out = [compute_budget(img, grid, n_p, w_min, use_entropy) for img in images]
    return [w for w, _ in out], [b for _, b in out]
