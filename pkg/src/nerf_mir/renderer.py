"""Hierarchical ray sampling and emission-absorption compositing.

All batched routines work on arrays with a leading ray axis: ``t`` is
(R, N), colours (R, N, 3), densities and deltas (R, N).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .field import NerfModel, field_backward, field_forward
from .scene_data import CameraIntrinsics, Pose, Ray, ValidationError, camera_rays

EPS_PDF = 1e-5


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 32
    n_fine: int = 32
    perturb: bool = True
    # "far" closes the last interval at the far bound; a number caps it instead
    last_delta: Union[str, float] = "far"
    eps_pdf: float = EPS_PDF
    use_fine: bool = True
    chunk: int = 2048

    def deterministic(self) -> "SamplingConfig":
        return SamplingConfig(self.n_coarse, self.n_fine, False, self.last_delta, self.eps_pdf,
                              self.use_fine, self.chunk)


@dataclass(frozen=True)
class SampleSet:
    t_values: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_values)
        if t.shape[-1] > 1 and not np.all(np.diff(t, axis=-1) > 0):
            raise ValidationError("t_values must be strictly increasing")
        if not np.all(np.asarray(self.deltas) > 0):
            raise ValidationError("deltas must be positive")


@dataclass(frozen=True)
class CompositeResult:
    rgb: np.ndarray
    weights: np.ndarray
    transmittance_end: np.ndarray
    depth: Optional[np.ndarray] = None


def compute_deltas(t: np.ndarray, far, last_delta: Union[str, float] = "far") -> np.ndarray:
    t = np.asarray(t)
    d = np.empty_like(t)
    d[..., :-1] = np.diff(t, axis=-1)
    if last_delta == "far":
        far = np.asarray(far, dtype=t.dtype)
        d[..., -1] = np.maximum(far - t[..., -1], 1e-10)
    else:
        d[..., -1] = float(last_delta)
    return d


def stratified_t(near, far, n: int, shape=(), rng: Optional[np.random.Generator] = None,
                 perturb: bool = True) -> np.ndarray:
    """One draw per equal-width bin of [near, far]; bin centres when not perturbed."""
    if n < 1:
        raise ValidationError("need at least one sample")
    near = np.asarray(near, dtype=np.float64)[..., None]
    far = np.asarray(far, dtype=np.float64)[..., None]
    if np.any(far <= near):
        raise ValidationError("far must exceed near")
    if perturb:
        if rng is None:
            raise ValidationError("perturbed sampling needs an rng")
        u = rng.random(tuple(shape) + (n,))
    else:
        u = np.full(tuple(shape) + (n,), 0.5)
    return near + (far - near) * (np.arange(n) + u) / n


def stratified_samples(near: float, far: float, n: int, rng: Optional[np.random.Generator] = None,
                       perturb: bool = True, last_delta="far") -> SampleSet:
    t = stratified_t(near, far, n, (), rng, perturb)
    return SampleSet(t, compute_deltas(t, far, last_delta))


def interval_edges(t: np.ndarray, near, far) -> np.ndarray:
    """Interval boundaries around each sample: near, midpoints, far."""
    t = np.asarray(t)
    near = np.broadcast_to(np.asarray(near, dtype=t.dtype), t.shape[:-1])[..., None]
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype), t.shape[:-1])[..., None]
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    return np.concatenate([near, mids, far], axis=-1)


def sample_pdf(edges: np.ndarray, weights: np.ndarray, n: int,
               rng: Optional[np.random.Generator] = None, eps: float = EPS_PDF) -> np.ndarray:
    """Inverse-CDF draws from piecewise-constant densities, one per row of ``weights``.

    ``edges`` is (R, nb + 1), ``weights`` (R, nb). Without an rng the
    quantiles are evenly spaced, ``(i + 0.5) / n``.
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) + eps
    R, nb = w.shape
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (R, n))
    else:
        u = rng.random((R, n))
    # one searchsorted for all rows: shift row r into [2r, 2r + 1]
    offs = np.arange(R)[:, None] * 2.0
    idx = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(R, n)
    idx = idx - np.arange(R)[:, None] * (nb + 1) - 1
    idx = np.clip(idx, 0, nb - 1)
    c0 = np.take_along_axis(cdf, idx, 1)
    c1 = np.take_along_axis(cdf, idx + 1, 1)
    e0 = np.take_along_axis(edges, idx, 1)
    e1 = np.take_along_axis(edges, idx + 1, 1)
    frac = np.clip((u - c0) / np.maximum(c1 - c0, 1e-300), 0.0, 1.0)
    return e0 + frac * (e1 - e0)


def importance_t(t_coarse: np.ndarray, weights: np.ndarray, near, far, n_fine: int,
                 rng: Optional[np.random.Generator] = None, eps: float = EPS_PDF) -> np.ndarray:
    """Merged, sorted coarse + fine sample positions for a batch of rays (R, N)."""
    t_coarse = np.atleast_2d(t_coarse)
    weights = np.atleast_2d(weights)
    if weights.shape != t_coarse.shape:
        raise ValidationError("weights must match the coarse intervals")
    if n_fine < 1:
        raise ValidationError("need at least one fine sample")
    edges = interval_edges(t_coarse, near, far)
    t_fine = sample_pdf(edges, weights, n_fine, rng, eps)
    return np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)


def importance_samples(coarse: SampleSet, weights, n_fine: int, near: float, far: float,
                       rng: Optional[np.random.Generator] = None, eps: float = EPS_PDF,
                       last_delta="far") -> SampleSet:
    t = importance_t(coarse.t_values[None], np.asarray(weights)[None], near, far, n_fine, rng, eps)[0]
    return SampleSet(t, compute_deltas(t, far, last_delta))


def composite(colors, sigmas, deltas, t_values=None) -> CompositeResult:
    """``rgb = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i`` with ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    colors = np.asarray(colors)
    sigmas = np.asarray(sigmas)
    deltas = np.asarray(deltas)
    if sigmas.shape != deltas.shape or colors.shape[:-1] != sigmas.shape:
        raise ValidationError(
            f"shape mismatch: colors {colors.shape}, sigmas {sigmas.shape}, deltas {deltas.shape}")
    s = sigmas * deltas
    cum = np.cumsum(s, axis=-1)
    T = np.exp(-(cum - s))
    w = T * -np.expm1(-s)
    rgb = (w[..., None] * colors).sum(axis=-2)
    t_end = np.exp(-cum[..., -1])
    depth = None if t_values is None else (w * t_values).sum(axis=-1)
    return CompositeResult(rgb, w, t_end, depth)


def composite_backward(colors, sigmas, deltas, grad_rgb, result: Optional[CompositeResult] = None):
    """Gradients of a scalar loss w.r.t. per-sample colours and densities.

    ``grad_rgb`` is dL/d(rgb) with shape (..., 3). Uses
    dL/ds_k = T_{k+1} (g . c_k) - sum_{i>k} w_i (g . c_i), s = sigma * delta.
    """
    colors = np.asarray(colors)
    sigmas = np.asarray(sigmas)
    deltas = np.asarray(deltas)
    if result is None:
        result = composite(colors, sigmas, deltas)
    w = result.weights
    g = np.asarray(grad_rgb)
    grad_colors = w[..., None] * g[..., None, :]
    G = (colors * g[..., None, :]).sum(axis=-1)
    wG = w * G
    suffix = np.cumsum(wG[..., ::-1], axis=-1)[..., ::-1] - wG
    T_next = np.exp(-np.cumsum(sigmas * deltas, axis=-1))
    grad_s = T_next * G - suffix
    return grad_colors, grad_s * deltas


# ---------------------------------------------------------------------------
# rendering with fields

def _field_pass(params, o, d, t, far, config: SamplingConfig, keep_cache: bool):
    R, N = t.shape
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    # one direction per ray; the field groups the N samples behind it
    dirs = d
    rgb, sigma, cache = field_forward(params, pts.reshape(-1, 3), dirs, return_cache=True)
    rgb = rgb.reshape(R, N, 3)
    sigma = sigma.reshape(R, N)
    deltas = compute_deltas(t, far, config.last_delta)
    rgb = rgb.astype(np.float64)
    sigma = sigma.astype(np.float64)
    res = composite(rgb, sigma, deltas, t)
    pass_state = dict(t=t, pts=pts, dirs=dirs, rgb=rgb, sigma=sigma, deltas=deltas, result=res)
    if keep_cache:
        pass_state["cache"] = cache
    return res, pass_state


def render_rays(model: NerfModel, origins, directions, near, far, config: SamplingConfig,
                rng: Optional[np.random.Generator] = None, keep_state: bool = False):
    """Coarse and fine colours for a batch of rays.

    Returns ``(rgb_coarse, rgb_fine, state)``; ``state`` carries what
    :func:`backward_rays` needs when ``keep_state`` is set.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    R = o.shape[0]
    near_b = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far_b = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    t_c = stratified_t(near_b, far_b, config.n_coarse, (R,), rng, config.perturb)
    res_c, st_c = _field_pass(model.coarse, o, d, t_c, far_b, config, keep_state)
    state = {"coarse": st_c}
    if config.use_fine and model.fine is not None and config.n_fine > 0:
        t_f = importance_t(t_c, res_c.weights, near_b, far_b, config.n_fine,
                           rng if config.perturb else None, config.eps_pdf)
        res_f, st_f = _field_pass(model.fine, o, d, t_f, far_b, config, keep_state)
        state["fine"] = st_f
        rgb_f = res_f.rgb
    else:
        rgb_f = res_c.rgb
    return res_c.rgb, rgb_f, (state if keep_state else None)


def backward_rays(model: NerfModel, state: dict, grad_coarse, grad_fine):
    """Parameter gradients for both fields given dL/d(rgb) per ray.

    When the fine pass is disabled, ``grad_fine`` flows into the coarse field
    (the fine output is then the coarse output).
    """
    sc = state["coarse"]
    if "fine" not in state:
        grad_coarse = grad_coarse + grad_fine
    gcol, gsig = composite_backward(sc["rgb"], sc["sigma"], sc["deltas"], grad_coarse, sc["result"])
    g_c = field_backward(model.coarse, sc["pts"].reshape(-1, 3), sc["dirs"], gcol, gsig, sc.get("cache"))
    g_f = None
    if "fine" in state:
        sf = state["fine"]
        gcol, gsig = composite_backward(sf["rgb"], sf["sigma"], sf["deltas"], grad_fine, sf["result"])
        g_f = field_backward(model.fine, sf["pts"].reshape(-1, 3), sf["dirs"], gcol, gsig, sf.get("cache"))
    return g_c, g_f


def render_ray(model: NerfModel, ray: Ray, config: SamplingConfig,
               rng: Optional[np.random.Generator] = None):
    rgb_c, rgb_f, _ = render_rays(model, ray.origin[None], ray.direction[None], ray.near, ray.far,
                                  config, rng)
    return rgb_c[0], rgb_f[0]


def render_pixels(model: NerfModel, intrinsics: CameraIntrinsics, pose: Pose, rows, cols,
                  near: float, far: float, config: SamplingConfig) -> np.ndarray:
    """Deterministic fine-pass colours (float, unclamped) through the given pixels."""
    config = config.deterministic()
    o, d = camera_rays(intrinsics, pose, rows, cols)
    out = np.zeros((len(o), 3))
    for s in range(0, len(o), config.chunk):
        _, rgb_f, _ = render_rays(model, o[s:s + config.chunk], d[s:s + config.chunk], near, far, config)
        out[s:s + config.chunk] = rgb_f
    return out


def quantize(rgb) -> np.ndarray:
    return np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)


def render_image(model: NerfModel, intrinsics: CameraIntrinsics, pose: Pose, near: float, far: float,
                 config: SamplingConfig = SamplingConfig(), as_float: bool = False) -> np.ndarray:
    H, W = intrinsics.height, intrinsics.width
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    rgb = render_pixels(model, intrinsics, pose, rows.ravel(), cols.ravel(), near, far, config)
    rgb = rgb.reshape(H, W, 3)
    return rgb if as_float else quantize(rgb)


def write_ray_debug_csv(path, t_values, weights) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ray", "sample", "t", "weight"])
        for r, (tr, wr) in enumerate(zip(np.atleast_2d(t_values), np.atleast_2d(weights))):
            for i, (t, wt) in enumerate(zip(tr, wr)):
                w.writerow([r, i, repr(float(t)), repr(float(wt))])
