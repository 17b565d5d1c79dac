"""Pinhole camera projection and normalized bounding boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 1024 px frames: an animal 3.8 units off-axis stays in view at depth 8
DEFAULT_FOCAL = 1000.0
DEFAULT_IMAGE_SIZE = (1024, 1024)


class EmptyBoxError(ValueError):
    """No valid point to build a box from."""


@dataclass(frozen=True)
class PerspectiveCamera:
    focal: float = DEFAULT_FOCAL
    principal_point: tuple[float, float] = (512.0, 512.0)
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE  # (width, height)

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if not (self.image_size[0] > 0 and self.image_size[1] > 0):
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))

    @classmethod
    def centered(cls, image_size=DEFAULT_IMAGE_SIZE, focal=DEFAULT_FOCAL) -> "PerspectiveCamera":
        w, h = image_size
        return cls(focal, (w / 2.0, h / 2.0), (w, h))

    def to_dict(self) -> dict:
        return {"focal": self.focal, "principal": list(self.principal_point)}


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image coordinates (center, width, height)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box width and height must be nonnegative")

    @classmethod
    def from_array(cls, a) -> "BBox":
        cx, cy, w, h = (float(x) for x in a)
        return cls(cx, cy, w, h)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def pixel_size(self, image_size) -> tuple[float, float]:
        return self.w * image_size[0], self.h * image_size[1]


def project(points3d, camera: PerspectiveCamera) -> tuple[np.ndarray, np.ndarray]:
    """Project (n, 3) camera-frame points to pixels.

    Returns ``(uv, valid)``; points with non-positive depth get ``valid=False``
    and NaN coordinates.
    """
    p = np.asarray(points3d, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    valid = z > 0
    safe = np.where(valid, z, 1.0)
    uv = np.asarray(camera.principal_point) + camera.focal * p[:, :2] / safe[:, None]
    uv[~valid] = np.nan
    return uv, valid


def in_image(uv: np.ndarray, image_size) -> np.ndarray:
    w, h = image_size
    with np.errstate(invalid="ignore"):
        return (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)


def bbox_from_points(points2d, image_size, valid=None) -> BBox:
    """Tight box around the valid pixel points, normalized and clamped to [0, 1]."""
    pts = np.asarray(points2d, dtype=float).reshape(-1, 2)
    mask = np.isfinite(pts).all(1)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise EmptyBoxError("no valid points")
    w, h = image_size
    lo = pts[mask].min(0) / (w, h)
    hi = pts[mask].max(0) / (w, h)
    x0, y0 = np.clip(lo, 0.0, 1.0)
    x1, y1 = np.clip(hi, 0.0, 1.0)
    return BBox.from_xyxy(float(x0), float(y0), float(x1), float(y1))
