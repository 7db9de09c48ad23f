"""Procedural multi-view scenes of flat-coloured spheres and boxes.

Cameras sit on a circular orbit around the world z axis, look at the
origin, and see a black background. Images are ray traced analytically:
each pixel takes the colour of the nearest primitive hit by its centre ray.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene_data import CameraIntrinsics, Dataset, Pose, ValidationError, View, camera_rays, save_dataset


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "sphere" or "box"
    center: tuple
    size: float               # sphere radius or box half-extent
    rgb: tuple                # 0..255

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValidationError(f"unknown primitive {self.kind!r}")
        if not self.size > 0:
            raise ValidationError("primitive size must be positive")


@dataclass(frozen=True)
class ToySceneSpec:
    primitives: Sequence[Primitive] = field(default_factory=tuple)
    views: int = 12
    radius: float = 4.0
    elevation_deg: float = 20.0
    width: int = 64
    height: int = 64
    fov_deg: float = 40.0
    near: float = 2.0
    far: float = 6.0
    seed: int = 0       # phase offset of the orbit

    def __post_init__(self):
        if self.views < 2:
            raise ValidationError("a toy scene needs at least two views")


def two_primitive_spec(views: int = 12, size: int = 64, seed: int = 0) -> ToySceneSpec:
    """A red sphere next to a blue-green box, the default acceptance scene."""
    return ToySceneSpec(
        primitives=(
            Primitive("sphere", (0.45, -0.3, 0.1), 0.6, (220, 60, 40)),
            Primitive("box", (-0.5, 0.45, -0.15), 0.42, (40, 170, 200)),
        ),
        views=views, width=size, height=size, seed=seed,
    )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return Pose(m)


def orbit_poses(n: int, radius: float, elevation_deg: float, phase: float = 0.0) -> list:
    el = np.deg2rad(elevation_deg)
    poses = []
    for i in range(n):
        az = phase + 2 * np.pi * i / n
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye))
    return poses


def intrinsics_for(spec: ToySceneSpec) -> CameraIntrinsics:
    f = 0.5 * spec.width / np.tan(0.5 * np.deg2rad(spec.fov_deg))
    return CameraIntrinsics(f, f, spec.width / 2.0, spec.height / 2.0, spec.width, spec.height)


def intersect(prim: Primitive, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Distance to the first hit along each unit ray, ``inf`` on a miss."""
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.kind == "sphere":
        oc = o - c
        b = (oc * d).sum(-1)
        disc = b * b - ((oc * oc).sum(-1) - prim.size ** 2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)
    # slab test for an axis-aligned cube
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (c - prim.size - o) * inv
        tb = (c + prim.size - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 0), t, np.inf)


def trace(primitives: Sequence[Primitive], o: np.ndarray, d: np.ndarray):
    """Nearest-hit colour (uint8) and primitive index (-1 for background)."""
    n = o.shape[0]
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    for k, p in enumerate(primitives):
        t = intersect(p, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        idx = np.where(closer, k, idx)
    palette = np.array([p.rgb for p in primitives] + [(0, 0, 0)], dtype=np.uint8)
    return palette[idx], idx


def render_view(spec: ToySceneSpec, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    o, d = camera_rays(intr, pose, rows.ravel(), cols.ravel())
    rgb, _ = trace(spec.primitives, o, d)
    return rgb.reshape(spec.height, spec.width, 3)


def build_scene(spec: ToySceneSpec) -> Dataset:
    intr = intrinsics_for(spec)
    phase = 2 * np.pi * np.random.default_rng(spec.seed).random() if spec.seed else 0.0
    poses = orbit_poses(spec.views, spec.radius, spec.elevation_deg, phase)
    views = [View(render_view(spec, intr, p), p) for p in poses]
    return Dataset(intr, views, spec.near, spec.far)


def generate_scene(spec: ToySceneSpec, out_dir) -> Path:
    """Render the scene and write PNGs plus a manifest; returns the manifest path."""
    return save_dataset(build_scene(spec), Path(out_dir))


def project(intr: CameraIntrinsics, pose: Pose, point) -> tuple:
    """(row, col) pixel coordinates of a world point, floats."""
    p = np.asarray(point, dtype=np.float64) - pose.translation
    pc = pose.rotation.T @ p
    col = intr.fx * pc[0] / -pc[2] + intr.cx - 0.5
    row = -intr.fy * pc[1] / -pc[2] + intr.cy - 0.5
    return row, col
