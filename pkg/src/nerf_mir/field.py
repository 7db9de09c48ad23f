"""Radiance field MLP with hand-written reverse mode, Adam and the LR schedule.

Layout (row-vector convention, ``x @ W + b``)::

    x = enc(p)                        3 + 6 L_pos
    h1 = relu(x  @ W0 + b0)           width
    h2 = relu(h1 @ W1 + b1)           width
    h3 = relu(h2 @ W2 + b2)           width
    sigma = softplus(h3 @ W3 + b3)    1      (density head, view independent)
    h4 = relu([h3, enc(v)] @ W4 + b4) width  (direction enters here)
    rgb = sigmoid(h4 @ W5 + b5)       3
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scene_data import ValidationError

LAYER_NAMES = ("hidden1", "hidden2", "hidden3", "sigma_head", "hidden4", "rgb_head")


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 10
    L_dir: int = 4

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise ValidationError("encoding frequency counts must be >= 0")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.L_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.L_dir


@dataclass
class FieldParams:
    layers: list                       # [(W, b), ...] in LAYER_NAMES order
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def arrays(self) -> list:
        return [a for wb in self.layers for a in wb]

    @classmethod
    def from_arrays(cls, arrays, encoding) -> "FieldParams":
        arrays = list(arrays)
        return cls([(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)], encoding)

    def copy(self) -> "FieldParams":
        return FieldParams.from_arrays([a.copy() for a in self.arrays()], self.encoding)

    def layer_shapes(self) -> list:
        return [list(W.shape) for W, _ in self.layers]


def layer_shapes(encoding: EncodingConfig, width: int = 64) -> list:
    return [
        (encoding.pos_dim, width),
        (width, width),
        (width, width),
        (width, 1),
        (width + encoding.dir_dim, width),
        (width, 3),
    ]


def init_field(encoding: EncodingConfig = EncodingConfig(), seed: int = 0, width: int = 64,
               dtype=np.float32, zero: bool = False) -> FieldParams:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in layer_shapes(encoding, width):
        if zero:
            W = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((W.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    return FieldParams(layers, encoding)


def positional_encoding(x, L: int) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``.

    Higher octaves come from the double-angle identities in float64, so only
    one sin/cos pair is evaluated per coordinate.
    """
    x = np.asarray(x)
    if L < 0:
        raise ValidationError("L must be >= 0")
    out = np.empty(x.shape[:-1] + (x.shape[-1] * (1 + 2 * L),), dtype=np.result_type(x, np.float32))
    d = x.shape[-1]
    out[..., :d] = x
    if L == 0:
        return out
    a = np.pi * x.astype(np.float64)
    s, c = np.sin(a), np.cos(a)
    for k in range(L):
        out[..., d * (1 + 2 * k):d * (2 + 2 * k)] = s
        out[..., d * (2 + 2 * k):d * (3 + 2 * k)] = c
        if k + 1 < L:
            s, c = 2.0 * s * c, (c - s) * (c + s)
    return out


def _softplus(z):
    return np.logaddexp(0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _locate_nonfinite(acts):
    for idx, a in enumerate(acts):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {idx} ({LAYER_NAMES[idx]})")


def _forward(params: FieldParams, positions, directions):
    """Shared forward pass.

    ``directions`` is either one row per position or one row per ray, in
    which case positions are grouped contiguously, ``len(positions) //
    len(directions)`` samples per ray, and the direction branch is evaluated
    once per ray.
    """
    enc = params.encoding
    dt = params.dtype
    p = np.asarray(positions).reshape(-1, 3)
    d = np.asarray(directions).reshape(-1, 3)
    M, R = p.shape[0], d.shape[0]
    if R == 0 or M % R:
        raise ValidationError(f"{M} positions cannot be grouped over {R} directions")
    S = M // R
    x = positional_encoding(p.astype(dt, copy=False), enc.L_pos)
    xd = positional_encoding(d.astype(dt, copy=False), enc.L_dir)
    (W0, b0), (W1, b1), (W2, b2), (W3, b3), (W4, b4), (W5, b5) = params.layers
    width = W0.shape[1]
    z1 = x @ W0 + b0
    h1 = np.maximum(z1, 0)
    z2 = h1 @ W1 + b1
    h2 = np.maximum(z2, 0)
    z3 = h2 @ W2 + b2
    h3 = np.maximum(z3, 0)
    zs = h3 @ W3 + b3
    zd = xd @ W4[width:]
    if S > 1:
        zd = np.repeat(zd, S, axis=0)
    z4 = h3 @ W4[:width] + zd + b4
    h4 = np.maximum(z4, 0)
    zc = h4 @ W5 + b5
    if not (np.all(np.isfinite(zc)) and np.all(np.isfinite(zs))):
        _locate_nonfinite([z1, z2, z3, zs, z4, zc])
    rgb = _sigmoid(zc)
    sigma = _softplus(zs[:, 0])
    cache = dict(x=x, xd=xd, S=S, h1=h1, h2=h2, h3=h3, h4=h4, zs=zs, rgb=rgb)
    return rgb, sigma, cache


def field_forward(params: FieldParams, position, direction, return_cache: bool = False):
    """Evaluate the field at one point or a batch of points.

    ``position``/``direction`` have shape (..., 3); returns ``rgb`` (..., 3)
    in [0, 1] and ``sigma`` (...) >= 0.
    """
    position = np.asarray(position)
    lead = position.shape[:-1]
    rgb, sigma, cache = _forward(params, position, direction)
    rgb = rgb.reshape(lead + (3,))
    sigma = sigma.reshape(lead)
    if return_cache:
        return rgb, sigma, cache
    return rgb, sigma


def field_backward(params: FieldParams, positions, directions, grad_rgb, grad_sigma,
                   cache: Optional[dict] = None) -> list:
    """Parameter gradients summed over the batch, in ``FieldParams.layers`` layout.

    ``cache`` from a ``field_forward(..., return_cache=True)`` call on the same
    inputs skips the recomputation of the forward pass.
    """
    if cache is None:
        _, _, cache = _forward(params, positions, directions)
    n = cache["x"].shape[0]
    dt = params.dtype
    g_rgb = np.asarray(grad_rgb, dtype=dt).reshape(-1, 3)
    g_sig = np.asarray(grad_sigma, dtype=dt).reshape(-1)
    if g_rgb.shape[0] != n or g_sig.shape[0] != n:
        raise ValidationError(f"upstream gradients do not match batch of {n}")
    if n == 0:
        raise ValidationError("empty batch")
    (W0, _), (W1, _), (W2, _), (W3, _), (W4, _), (W5, _) = params.layers
    width = W0.shape[1]
    rgb = cache["rgb"]
    # sigmoid' = s(1 - s); softplus' = sigmoid
    dzc = g_rgb * rgb * (1 - rgb)
    dzs = (g_sig * _sigmoid(cache["zs"][:, 0]))[:, None]
    gW5 = cache["h4"].T @ dzc
    gb5 = dzc.sum(0)
    dz4 = (dzc @ W5.T) * (cache["h4"] > 0)
    dzd = dz4 if cache["S"] == 1 else dz4.reshape(-1, cache["S"], width).sum(1)
    gW4 = np.concatenate([cache["h3"].T @ dz4, cache["xd"].T @ dzd], axis=0)
    gb4 = dz4.sum(0)
    dh3 = dz4 @ W4[:width].T + dzs @ W3.T
    gW3 = cache["h3"].T @ dzs
    gb3 = dzs.sum(0)
    dz3 = dh3 * (cache["h3"] > 0)
    gW2 = cache["h2"].T @ dz3
    gb2 = dz3.sum(0)
    dz2 = (dz3 @ W2.T) * (cache["h2"] > 0)
    gW1 = cache["h1"].T @ dz2
    gb1 = dz2.sum(0)
    dz1 = (dz2 @ W1.T) * (cache["h1"] > 0)
    gW0 = cache["x"].T @ dz1
    gb0 = dz1.sum(0)
    return [(gW0, gb0), (gW1, gb1), (gW2, gb2), (gW3, gb3), (gW4, gb4), (gW5, gb5)]


def add_grads(a: list, b: list) -> list:
    return [(ga + gb, ha + hb) for (ga, ha), (gb, hb) in zip(a, b)]


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: FieldParams, **kw) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()], **kw)


def adam_step(state: OptimizerState, params: FieldParams, grads: list, lr: float):
    """One bias-corrected Adam update; returns new ``(state, params)``."""
    flat_g = [g for gw in grads for g in gw]
    arrays = params.arrays()
    if len(flat_g) != len(arrays) or any(g.shape != a.shape for g, a in zip(flat_g, arrays)):
        raise ValidationError("gradient shapes do not match parameters")
    for g in flat_g:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for a, g, m, v in zip(arrays, flat_g, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m.append(m.astype(a.dtype, copy=False))
        new_v.append(v.astype(a.dtype, copy=False))
        new_p.append((a - step).astype(a.dtype, copy=False))
    new_state = OptimizerState(new_m, new_v, t, b1, b2, state.eps)
    return new_state, FieldParams.from_arrays(new_p, params.encoding)


LR_INIT = 5e-4
LR_FINAL = 8e-5


def lr_schedule(step: int, total: int, lr_init: float = LR_INIT, lr_final: float = LR_FINAL) -> float:
    """Exponential decay from ``lr_init`` at step 0 to ``lr_final`` at ``total``."""
    if total <= 0:
        return lr_init
    if not 0 <= step <= total:
        raise ValidationError(f"step {step} outside [0, {total}]")
    return lr_init * (lr_final / lr_init) ** (step / total)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class NerfModel:
    """Coarse and fine fields plus their optimizer states."""

    coarse: FieldParams
    fine: Optional[FieldParams]
    coarse_opt: Optional[OptimizerState] = None
    fine_opt: Optional[OptimizerState] = None
    step: int = 0


def init_model(encoding: EncodingConfig = EncodingConfig(), seed: int = 0, width: int = 64,
               dtype=np.float32, use_fine: bool = True) -> NerfModel:
    coarse = init_field(encoding, seed, width, dtype)
    fine = init_field(encoding, seed + 1, width, dtype) if use_fine else None
    return NerfModel(coarse, fine, OptimizerState.for_params(coarse),
                     OptimizerState.for_params(fine) if fine is not None else None)


def save_checkpoint(path, model: NerfModel, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    arrays = {}
    meta = {"step": model.step, "encoding": {"L_pos": model.coarse.encoding.L_pos,
                                             "L_dir": model.coarse.encoding.L_dir},
            "extra": extra or {}}
    for name in ("coarse", "fine"):
        params = getattr(model, name)
        opt = getattr(model, name + "_opt")
        if params is None:
            continue
        meta[name] = {"layer_shapes": params.layer_shapes(), "dtype": str(params.dtype)}
        for i, a in enumerate(params.arrays()):
            arrays[f"{name}/param{i}"] = a
        if opt is not None:
            meta[name]["optimizer"] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                                       "eps": opt.eps}
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"{name}/m{i}"] = m
                arrays[f"{name}/v{i}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path) -> tuple:
    """Returns ``(model, extra_metadata)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        enc = EncodingConfig(**meta["encoding"])
        parts = {}
        for name in ("coarse", "fine"):
            if name not in meta:
                parts[name] = (None, None)
                continue
            n = 2 * len(meta[name]["layer_shapes"])
            params = FieldParams.from_arrays([z[f"{name}/param{i}"] for i in range(n)], enc)
            opt = None
            if "optimizer" in meta[name]:
                o = meta[name]["optimizer"]
                opt = OptimizerState([z[f"{name}/m{i}"] for i in range(n)],
                                     [z[f"{name}/v{i}"] for i in range(n)],
                                     o["step"], o["beta1"], o["beta2"], o["eps"])
            parts[name] = (params, opt)
    model = NerfModel(parts["coarse"][0], parts["fine"][0], parts["coarse"][1], parts["fine"][1],
                      meta["step"])
    return model, meta["extra"]
