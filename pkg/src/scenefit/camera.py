"""Pinhole camera model, depth backprojection, and mask partitioning.

Stored arrays are 0-based; the flat pixel index follows the row-major map
i = v*U + u (the 1-based variant (v-1)*U + u shifted by one). The helper
:func:`pixel_index` is the single place that owns this convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmptyCloud

MIN_OBJECT_POINTS = 10


@lru_cache(maxsize=16)
def _ray_directions_cached(fx, fy, cx, cy, width, height):
    u = np.arange(width, dtype=np.float64)
    v = np.arange(height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    x = (uu - cx) / fx
    y = (vv - cy) / fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, fraction):
        """Intrinsics for an image scaled by ``fraction`` in each dimension."""
        return CameraIntrinsics(
            fx=self.fx * fraction, fy=self.fy * fraction,
            cx=self.cx * fraction, cy=self.cy * fraction,
            width=int(round(self.width * fraction)),
            height=int(round(self.height * fraction)),
        )

    def ray_directions(self):
        """Unit ray directions per pixel, shape (V, U, 3), camera at origin.

        Cached per intrinsics; the returned array is read-only.
        """
        return _ray_directions_cached(self.fx, self.fy, self.cx, self.cy,
                                      self.width, self.height)


@dataclass
class ObservationSet:
    """A single RGBD observation plus per-object masks."""

    rgb: np.ndarray      # (V, U, 3) in [0, 1]
    depth: np.ndarray    # (V, U) meters, 0 = invalid
    masks: list          # of (V, U) uint8/bool arrays
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.rgb.shape != shape + (3,):
            raise ValueError(f"rgb shape {self.rgb.shape} != {shape + (3,)}")
        if self.depth.shape != shape:
            raise ValueError(f"depth shape {self.depth.shape} != {shape}")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise ValueError("rgb values must lie in [0, 1]")
        masks = []
        for m in self.masks:
            if m.shape != shape:
                raise ValueError(f"mask shape {m.shape} != {shape}")
            m = np.asarray(m)
            if not np.isin(m, (0, 1)).all():
                raise ValueError("masks must be binary")
            masks.append(m.astype(bool))
        self.masks = masks

    @property
    def num_objects(self):
        return len(self.masks)


@dataclass
class PointCloud:
    points: np.ndarray         # (N, 3) meters
    source_pixels: np.ndarray  # (N, 2) int (u, v), 0-based

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.source_pixels = np.asarray(self.source_pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.points) != len(self.source_pixels):
            raise ValueError("points and source_pixels must be parallel")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


def pixel_index(u, v, width, one_based=False):
    """Flat index of pixel (u, v); row-major, matching (v-1)*U + u when 1-based."""
    if one_based:
        return (v - 1) * width + u
    return v * width + u


def backproject(depth, intrinsics: CameraIntrinsics) -> PointCloud:
    """Lift valid depth pixels to camera-frame 3D points.

    Each pixel with D(u,v) > 0 contributes D(u,v) * K^-1 (u, v, 1)^T; pixels
    with zero depth are omitted. Output ordering follows the flat pixel index.
    """
    depth = np.asarray(depth, dtype=np.float64)
    v_idx, u_idx = np.nonzero(depth > 0)
    order = np.argsort(pixel_index(u_idx, v_idx, intrinsics.width), kind="stable")
    u_idx, v_idx = u_idx[order], v_idx[order]
    d = depth[v_idx, u_idx]
    x = (u_idx - intrinsics.cx) / intrinsics.fx * d
    y = (v_idx - intrinsics.cy) / intrinsics.fy * d
    points = np.stack([x, y, d], axis=-1)
    return PointCloud(points=points, source_pixels=np.stack([u_idx, v_idx], axis=-1))


def project(points, intrinsics: CameraIntrinsics):
    """Camera-frame points to (u, v, z); inverse of :func:`backproject`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    u = points[:, 0] / z * intrinsics.fx + intrinsics.cx
    v = points[:, 1] / z * intrinsics.fy + intrinsics.cy
    return np.stack([u, v, z], axis=-1)


def partition_by_masks(cloud: PointCloud, masks):
    """Split a cloud into per-object clouds by mask membership.

    A point lands in every mask that covers its source pixel (overlapping
    masks duplicate points). Returns (clouds, empty_flags) where a flag marks
    objects with fewer than MIN_OBJECT_POINTS points (unusable mask).
    """
    clouds = []
    flags = []
    for mask in masks:
        mask = np.asarray(mask).astype(bool)
        inside = mask[cloud.source_pixels[:, 1], cloud.source_pixels[:, 0]]
        sub = PointCloud(points=cloud.points[inside],
                         source_pixels=cloud.source_pixels[inside])
        clouds.append(sub)
        flags.append(len(sub) < MIN_OBJECT_POINTS)
    return clouds, flags


def cloud_stats(cloud: PointCloud):
    """Per-axis mean and population standard deviation of a cloud."""
    if len(cloud) == 0:
        raise EmptyCloud("cloud_stats needs a non-empty cloud")
    mean = cloud.points.mean(axis=0)
    std = cloud.points.std(axis=0)
    return mean, std
