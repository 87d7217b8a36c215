"""Equirectangular panorama <-> flat ground plane geometry.

Conventions, fixed once for the whole package:

* Ground frame: x meters East, y meters North; the camera sits at the
  origin, ``h`` meters above the plane z = 0.
* Azimuth ``theta``: radians in [-pi, pi), 0 = North, clockwise
  positive, so East = +pi/2.
* Elevation ``phi``: radians in [-pi/2, pi/2], 0 = horizon, negative
  below; every ground point has phi < 0.
* Equirectangular pixels: continuous column u and row v with integer
  coordinates at pixel centers. u = 0 is the theta = -pi seam, North is
  column W/2; v = 0 is the zenith, the horizon is row H/2 and the nadir
  is row H. Columns wrap (360 degrees), rows clamp.
* BEV pixels: square image with row 0 at the North edge, column 0 at
  the West edge and the camera above the image center.

The panorama -> BEV transform is the flat-ground inverse perspective
mapping under these conventions; it is pure geometry with no learned
parts and is counted by :mod:`crossview.counters` under
``"pano_to_bev"`` so the inference path can prove it never runs there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from crossview import counters

__all__ = [
    "EquirectImage",
    "BevImage",
    "SphericalCoord",
    "ground_to_sphere",
    "sphere_to_ground",
    "sphere_to_pixel",
    "pixel_to_sphere",
    "bilinear_sample",
    "pano_to_bev",
]


class SphericalCoord(NamedTuple):
    """Ray direction; fields may be scalars or arrays."""

    azimuth: np.ndarray
    elevation: np.ndarray


@dataclass
class EquirectImage:
    """Full-sphere panorama, data [H, W, C] float in [0,1], W = 2H."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError(f"equirect data must be [H,W,1|3], got {self.data.shape}")
        h, w, _ = self.data.shape
        if w != 2 * h:
            raise ValueError(f"equirect image must be 2:1, got {w}x{h}")
        if self.data.min() < -1e-6 or self.data.max() > 1 + 1e-6:
            raise ValueError("equirect values must lie in [0,1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class BevImage:
    """Top-down square image; valid_mask is False where no ground ray exists."""

    data: np.ndarray
    valid_mask: np.ndarray
    ground_res: float
    cam_height: float

    @property
    def size(self) -> int:
        return self.data.shape[0]


def ground_to_sphere(x, y, h: float) -> SphericalCoord:
    """Ray from the camera at height h to ground offset (x East, y North).

    theta = atan2(x, y) folded into [-pi, pi); phi = -atan2(h, r) with
    r the horizontal distance, so phi is in (-pi/2, 0).
    """
    if h <= 0:
        raise ValueError(f"camera height must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = np.hypot(x, y)
    if np.any(r == 0):
        raise ValueError("azimuth undefined directly under the camera")
    theta = np.arctan2(x, y)
    theta = np.where(theta >= np.pi, theta - 2.0 * np.pi, theta)
    phi = -np.arctan2(h, r)
    return SphericalCoord(theta, phi)


def sphere_to_ground(coord: SphericalCoord, h: float):
    """Ground intersection of a downward ray; inverse of ground_to_sphere."""
    if h <= 0:
        raise ValueError(f"camera height must be positive, got {h}")
    phi = np.asarray(coord.elevation, dtype=np.float64)
    if np.any(phi >= 0):
        raise ValueError("ray at or above the horizon never hits the ground")
    rho = h / np.tan(-phi)
    theta = np.asarray(coord.azimuth, dtype=np.float64)
    return rho * np.sin(theta), rho * np.cos(theta)


def sphere_to_pixel(coord: SphericalCoord, width: int, height: int):
    """Continuous equirect pixel (u, v) of a ray direction."""
    theta = np.asarray(coord.azimuth, dtype=np.float64)
    phi = np.asarray(coord.elevation, dtype=np.float64)
    u = (theta + np.pi) / (2.0 * np.pi) * width
    v = (np.pi / 2.0 - phi) / np.pi * height
    return u, v


def pixel_to_sphere(u, v, width: int, height: int) -> SphericalCoord:
    """Ray direction at continuous equirect pixel (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = u / width * 2.0 * np.pi - np.pi
    phi = np.pi / 2.0 - v / height * np.pi
    return SphericalCoord(theta, phi)


def bilinear_sample(img: EquirectImage, u, v) -> np.ndarray:
    """Bilinear lookup at continuous (u, v); columns wrap, rows clamp.

    Integer coordinates return exact pixel values. Returns [..., C].
    """
    h, w = img.height, img.width
    u = np.mod(np.asarray(u, dtype=np.float64), w)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1.0)
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = (u - j0)[..., None]
    fv = (v - i0)[..., None]
    j0 = np.mod(j0, w)
    j1 = np.mod(j0 + 1, w)
    i1 = np.minimum(i0 + 1, h - 1)
    d = img.data
    top = d[i0, j0] * (1.0 - fu) + d[i0, j1] * fu
    bot = d[i1, j0] * (1.0 - fu) + d[i1, j1] * fu
    return top * (1.0 - fv) + bot * fv


def pano_to_bev(
    pano: EquirectImage,
    h: float,
    size: int,
    ground_res: float,
) -> BevImage:
    """Project a panorama onto the ground plane seen from above.

    BEV pixel (i, j) corresponds to the ground offset
    x = (j - size/2 + 0.5) * ground_res, y = (size/2 - i - 0.5) * ground_res
    from the camera; the pixel is invalid only where the ray is not
    strictly downward (the exact camera footprint point).
    """
    if h <= 0 or size <= 0 or ground_res <= 0:
        raise ValueError("camera height, BEV size and resolution must be positive")
    counters.increment("pano_to_bev")

    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x = (j - size / 2.0 + 0.5) * ground_res
    y = (size / 2.0 - i - 0.5) * ground_res
    r = np.hypot(x, y)
    valid = r > 0

    data = np.zeros((size, size, pano.channels), dtype=np.float32)
    theta = np.arctan2(x[valid], y[valid])
    theta = np.where(theta >= np.pi, theta - 2.0 * np.pi, theta)
    phi = -np.arctan2(h, r[valid])
    coord = SphericalCoord(theta, phi)
    u, v = sphere_to_pixel(coord, pano.width, pano.height)
    data[valid] = bilinear_sample(pano, u, v)
    # phi < 0 exactly where r > 0, and a full-sphere panorama covers
    # every downward ray, so no further mask terms arise.
    return BevImage(data=data, valid_mask=valid, ground_res=ground_res, cam_height=h)
