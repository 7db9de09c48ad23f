"""PSNR / SSIM / MSE with optional region restriction."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .scene_data import ValidationError

REGIONS = ("full", "masked_only", "unmasked_only")


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: Optional[float]
    mse: float
    region: str = "full"
    lpips: Optional[float] = None   # not computed; kept so tables line up


def to_unit(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    return a.astype(np.float64)


def mse(a, b, region: Optional[np.ndarray] = None) -> float:
    a, b = to_unit(a), to_unit(b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    d2 = (a - b) ** 2
    if region is not None:
        region = np.asarray(region).astype(bool)
        if region.shape != a.shape[:2]:
            raise ValidationError(f"region shape {region.shape} does not match image {a.shape[:2]}")
        if not region.any():
            raise ValidationError("empty evaluation region")
        d2 = d2[region]
    return float(d2.mean())


def psnr_from_mse(m: float) -> float:
    return math.inf if m == 0 else 10.0 * math.log10(1.0 / m)


def psnr(a, b, region: Optional[np.ndarray] = None) -> float:
    """PSNR in dB on the [0, 1] scale; ``inf`` for identical inputs."""
    return psnr_from_mse(mse(a, b, region))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    y = correlate1d(x, g, axis=0, mode="reflect")
    y = correlate1d(y, g, axis=1, mode="reflect")
    r = len(g) // 2
    return y[r:-r, r:-r]


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian window, averaged over the interior and channels.

    Border pixels whose window would leave the image are excluded.
    """
    a, b = to_unit(a), to_unit(b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < win:
        raise ValidationError(f"images must be at least {win}x{win} for SSIM")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def region_mask(mask: Optional[np.ndarray], region: str) -> Optional[np.ndarray]:
    if region == "full":
        return None
    if mask is None:
        raise ValidationError(f"region {region!r} needs a mask")
    m = np.asarray(mask).astype(bool)
    return m if region == "masked_only" else ~m


def evaluate(pred, target, mask: Optional[np.ndarray] = None, region: str = "full") -> MetricReport:
    if region not in REGIONS:
        raise ValidationError(f"unknown region {region!r}")
    sel = region_mask(mask, region)
    m = mse(pred, target, sel)
    s = ssim(pred, target) if region == "full" else None
    return MetricReport(psnr_from_mse(m), s, m, region)


def evaluate_views(preds, targets, masks=None, regions=REGIONS) -> dict:
    """Metrics pooled over all views: region -> MetricReport.

    MSE is pooled over every selected pixel before conversion to PSNR;
    SSIM is the mean over views.
    """
    out = {}
    for region in regions:
        if region != "full" and masks is None:
            continue
        num, den = 0.0, 0
        for i, (p, t) in enumerate(zip(preds, targets)):
            sel = region_mask(None if masks is None else masks[i], region)
            d2 = (to_unit(p) - to_unit(t)) ** 2
            if sel is not None:
                d2 = d2[sel]
            num += d2.sum()
            den += d2.size
        if den == 0:
            continue
        m = num / den
        s = float(np.mean([ssim(p, t) for p, t in zip(preds, targets)])) if region == "full" else None
        out[region] = MetricReport(psnr_from_mse(m), s, m, region)
    return out


EVAL_COLUMNS = ["scene", "setting", "region", "psnr", "ssim", "mse", "lpips"]


def write_eval_csv(path, rows) -> None:
    """``rows``: iterable of (scene, setting, MetricReport)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for scene, setting, r in rows:
            w.writerow([scene, setting, r.region, repr(r.psnr),
                        "" if r.ssim is None else repr(r.ssim), repr(r.mse), ""])
