"""Posed multi-view image sets, pinhole camera rays and patch gridding.

Camera convention: the camera looks down its local -z axis, +y is up and
+x is right; pixel centres sit at half-integer coordinates.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"invalid image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(f"principal point ({self.cx}, {self.cy}) outside image")

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform stored as a 4x4 matrix."""

    camera_to_world: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError(f"pose must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("pose contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValidationError("pose bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValidationError("pose rotation block is not orthonormal")
        object.__setattr__(self, "camera_to_world", _frozen(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))


@dataclass(frozen=True)
class View:
    image: np.ndarray                 # (H, W, 3) uint8
    pose: Pose
    mask: Optional[np.ndarray] = None  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValidationError(f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
        object.__setattr__(self, "image", _frozen(img))
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != img.shape[:2]:
                raise ValidationError(f"mask shape {m.shape} != image shape {img.shape[:2]}")
            if not np.isin(m, (0, 1)).all():
                raise ValidationError("mask values must be 0 or 1")
            object.__setattr__(self, "mask", _frozen(m.astype(np.uint8)))


@dataclass(frozen=True)
class Dataset:
    intrinsics: CameraIntrinsics
    views: tuple
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if len(self.views) == 0:
            raise ValidationError("empty dataset")
        if not self.near > 0:
            raise ValidationError(f"near must be positive, got {self.near}")
        if not self.far > self.near:
            raise ValidationError(f"far ({self.far}) must exceed near ({self.near})")
        shape = (self.intrinsics.height, self.intrinsics.width, 3)
        for i, v in enumerate(self.views):
            if v.image.shape != shape:
                raise ValidationError(
                    f"view {i}: image shape {v.image.shape} does not match intrinsics {shape}")

    def __len__(self):
        return len(self.views)

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.image for v in self.views])

    @property
    def masks(self) -> Optional[np.ndarray]:
        if any(v.mask is None for v in self.views):
            return None
        return np.stack([v.mask for v in self.views])

    @property
    def poses(self) -> np.ndarray:
        return np.stack([v.pose.camera_to_world for v in self.views])

    def with_images(self, images, masks=None) -> "Dataset":
        """Copy of the dataset with replaced images (and optionally masks)."""
        views = []
        for i, v in enumerate(self.views):
            m = v.mask if masks is None else masks[i]
            views.append(View(np.asarray(images[i]), v.pose, m))
        return Dataset(self.intrinsics, views, self.near, self.far)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple
    view_index: int = 0

    def __post_init__(self):
        if not self.far > self.near:
            raise ValidationError("ray far bound must exceed near bound")


@dataclass(frozen=True)
class PatchGrid:
    """Row-major tiling of an image into l x l patches.

    ``rects[k]`` is ``(row0, col0, row1, col1)`` with exclusive ends; tiles
    on the bottom and right borders are clipped when ``l`` does not divide
    the image size.
    """

    l: int
    height: int
    width: int
    rects: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.rects)

    @property
    def shape(self) -> tuple:
        """Patch rows and columns."""
        return (-(-self.height // self.l), -(-self.width // self.l))

    def areas(self) -> np.ndarray:
        r = self.rects
        return (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])

    def patch_index_map(self) -> np.ndarray:
        """(H, W) array holding the patch index of every pixel."""
        rows = np.arange(self.height) // self.l
        cols = np.arange(self.width) // self.l
        return rows[:, None] * self.shape[1] + cols[None, :]


def split_patches(width: int, height: int, l: int) -> PatchGrid:
    if l < 1:
        raise ValidationError(f"patch size must be >= 1, got {l}")
    if l > min(width, height):
        raise ValidationError(f"patch size {l} exceeds image size {width}x{height}")
    r0 = np.arange(0, height, l)
    c0 = np.arange(0, width, l)
    rr, cc = np.meshgrid(r0, c0, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    rects = np.stack([rr, cc, np.minimum(rr + l, height), np.minimum(cc + l, width)], axis=1)
    return PatchGrid(l, height, width, _frozen(rects.astype(np.int64)))


def camera_rays(intrinsics: CameraIntrinsics, pose: Pose, rows, cols):
    """Vectorised ray generation; returns ``(origins, directions)`` of shape (n, 3)."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_cam = np.stack([
        (cols + 0.5 - intrinsics.cx) / intrinsics.fx,
        -(rows + 0.5 - intrinsics.cy) / intrinsics.fy,
        -np.ones_like(rows),
    ], axis=-1)
    d = d_cam @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def camera_ray(intrinsics: CameraIntrinsics, pose: Pose, pixel, near: float = 0.0,
               far: float = np.inf, view_index: int = 0) -> Ray:
    row, col = pixel
    if not (0 <= row < intrinsics.height and 0 <= col < intrinsics.width):
        raise ValidationError(f"pixel {pixel} outside {intrinsics.height}x{intrinsics.width} image")
    o, d = camera_rays(intrinsics, pose, [row], [col])
    return Ray(o[0], d[0], near, far, (int(row), int(col)), view_index)


# ---------------------------------------------------------------------------
# manifest I/O

def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with Image.open(path) as im:
        if im.mode != mode:
            im = im.convert(mode)
        return np.array(im)


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing file: {manifest_path}")
    with open(manifest_path) as f:
        doc = json.load(f)
    root = manifest_path.parent
    intr = CameraIntrinsics(**doc["intrinsics"])
    views = []
    for i, entry in enumerate(doc.get("views", [])):
        image = _read_png(root / entry["image"], "RGB")
        if image.shape[:2] != (intr.height, intr.width):
            raise ValidationError(
                f"view {i}: image {entry['image']} is {image.shape[1]}x{image.shape[0]}, "
                f"intrinsics say {intr.width}x{intr.height}")
        mask = None
        if entry.get("mask"):
            raw = _read_png(root / entry["mask"], "L")
            if not np.isin(raw, (0, 255)).all():
                raise ValidationError(f"mask {entry['mask']} must contain only 0 and 255")
            mask = (raw == 255).astype(np.uint8)
        try:
            pose = Pose(np.array(entry["camera_to_world"], dtype=np.float64))
        except ValidationError as e:
            raise ValidationError(f"view {i}: {e}") from None
        views.append(View(image, pose, mask))
    return Dataset(intr, views, float(doc["near"]), float(doc["far"]))


def save_dataset(dataset: Dataset, out_dir, prefix: str = "view", manifest_name: str = "manifest.json",
                 extra: Optional[dict] = None) -> Path:
    """Write PNGs and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(dataset.views):
        img_rel = f"images/{prefix}_{i:03d}.png"
        Image.fromarray(v.image).save(out_dir / img_rel)
        entry = {"image": img_rel}
        if v.mask is not None:
            (out_dir / "masks").mkdir(exist_ok=True)
            mask_rel = f"masks/{prefix}_{i:03d}.png"
            Image.fromarray((v.mask * 255).astype(np.uint8)).save(out_dir / mask_rel)
            entry["mask"] = mask_rel
        entry["camera_to_world"] = v.pose.camera_to_world.tolist()
        entries.append(entry)
    doc = {"intrinsics": dataset.intrinsics.to_dict(), "near": dataset.near, "far": dataset.far,
           "views": entries}
    if extra:
        doc.update(extra)
    path = out_dir / manifest_name
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=1)
    os.replace(tmp, path)
    return path

