"""Equirectangular environment maps: rotation, projection, and irradiance.

Coordinate conventions used throughout the package:

* World frame: +y is up, +z is forward, +x is right.
* A unit direction d maps to spherical angles by
  ``d = (sin(theta)*sin(phi), cos(theta), sin(theta)*cos(phi))`` with
  polar angle ``theta`` in [0, pi] measured from +y and azimuth ``phi``
  in [-pi, pi) measured around +y with phi = 0 at +z.
* An H x W map stores radiance with row v spanning theta in [0, pi]
  (top row = north pole) and column u spanning phi in [-pi, pi)
  (left edge = looking backward, center column = +z).

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

ENVM_MAGIC = b"ENVM"

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class EnvMap:
    """Radiance panorama over the full sphere, linear units, float32.

    ``pixels`` is an (H, W, 3) grid of nonnegative finite radiance with
    W == 2 * H.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"envmap pixels must be (H, W, 3), got {px.shape}")
        h, w, _ = px.shape
        if w != 2 * h:
            raise ValueError(f"envmap must have W == 2H, got H={h} W={w}")
        if not np.all(np.isfinite(px)):
            raise ValueError("envmap radiance must be finite")
        if px.min() < 0.0:
            raise ValueError("envmap radiance must be nonnegative")
        object.__setattr__(self, "pixels", px)

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CropSpec:
    """Pinhole view into a panorama.

    ``fov_deg`` is the horizontal field of view; the vertical extent
    follows from the output aspect ratio (square pixels). ``yaw`` turns
    the camera toward +x for positive values, ``pitch`` tilts it up.
    """

    fov_deg: float
    yaw: float
    pitch: float
    out_w: int
    out_h: int

    def __post_init__(self):
        if not 10.0 < self.fov_deg < 150.0:
            raise ValueError(f"fov_deg must be in (10, 150), got {self.fov_deg}")
        if not -np.pi / 2 < self.pitch < np.pi / 2:
            raise ValueError(f"pitch must be in (-pi/2, pi/2), got {self.pitch}")
        if self.out_w < 8 or self.out_h < 8:
            raise ValueError("output dimensions must be >= 8")


def rotate_envmap(env: EnvMap, yaw: float) -> EnvMap:
    """Rotate the viewing frame by ``yaw`` radians around the up axis.

    Columns are cyclically shifted by round(yaw / 2pi * W); radiance
    values are permuted, never altered. The shift direction is chosen so
    that ``project_to_background(rotate_envmap(env, a), yaw=0)`` matches
    ``project_to_background(env, yaw=a)``. Yaw wraps modulo 2pi.
    """
    shift = int(round(yaw / _TWO_PI * env.w)) % env.w
    if shift == 0:
        return EnvMap(env.pixels.copy())
    return EnvMap(np.roll(env.pixels, -shift, axis=1))


def _check_unit(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise ValueError("direction vectors must be unit length within 1e-6")
    return d


def dir_to_equirect(d: np.ndarray, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Map unit direction(s) to continuous pixel coordinates (u, v).

    v = theta / pi * H and u = (phi + pi) / 2pi * W. At the poles the
    azimuth is undefined and u = W/2 is returned by convention
    (atan2(0, 0) == 0). Raises for non-unit input.
    """
    d = _check_unit(d)
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 0], d[..., 2])
    u = (phi + np.pi) / _TWO_PI * w
    v = theta / np.pi * h
    return u, v


def equirect_to_dir(u: np.ndarray, v: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`dir_to_equirect`; returns unit direction(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = u / w * _TWO_PI - np.pi
    theta = v / h * np.pi
    sin_t = np.sin(theta)
    return np.stack(
        [sin_t * np.sin(phi), np.cos(theta), sin_t * np.cos(phi)], axis=-1
    )


def bilinear_sample(env: EnvMap, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample the panorama at continuous (u, v) pixel coordinates.

    Texel centers sit at integer + 0.5. Horizontal lookups wrap, vertical
    lookups clamp to the pole rows.
    """
    px = env.pixels
    h, w = env.h, env.w
    u = np.asarray(u, dtype=np.float64) - 0.5
    v = np.asarray(v, dtype=np.float64) - 0.5

    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]

    u0w = u0 % w
    u1w = (u0 + 1) % w
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)

    top = px[v0c, u0w] * (1.0 - fu) + px[v0c, u1w] * fu
    bot = px[v1c, u0w] * (1.0 - fu) + px[v1c, u1w] * fu
    return (top * (1.0 - fv) + bot * fv).astype(np.float32)


def _camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    rot_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    return rot_y @ rot_x


def crop_ray_directions(crop: CropSpec) -> np.ndarray:
    """World-space unit ray per output pixel, shape (out_h, out_w, 3)."""
    tan_h = np.tan(np.radians(crop.fov_deg) / 2.0)
    tan_v = tan_h * crop.out_h / crop.out_w
    xs = ((np.arange(crop.out_w) + 0.5) / crop.out_w * 2.0 - 1.0) * tan_h
    ys = ((np.arange(crop.out_h) + 0.5) / crop.out_h * 2.0 - 1.0) * -tan_v
    gx, gy = np.meshgrid(xs, ys)
    local = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    return local @ _camera_rotation(crop.yaw, crop.pitch).T


def project_to_background(env: EnvMap, crop: CropSpec) -> np.ndarray:
    """Render the pinhole view of the panorama, linear radiance out."""
    dirs = crop_ray_directions(crop)
    u, v = dir_to_equirect(dirs, env.h, env.w)
    return bilinear_sample(env, u, v)


@lru_cache(maxsize=8)
def _texel_geometry(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-texel unit directions (T, 3) and solid angles (T,)."""
    vs = np.arange(h) + 0.5
    us = np.arange(w) + 0.5
    gu, gv = np.meshgrid(us, vs)
    dirs = equirect_to_dir(gu, gv, h, w).reshape(-1, 3)
    theta = (vs / h) * np.pi
    sin_t = np.sin(theta)
    omega = np.repeat(sin_t, w) * (np.pi / h) * (_TWO_PI / w)
    dirs.setflags(write=False)
    omega.setflags(write=False)
    return dirs, omega


def solid_angle_map(h: int, w: int) -> np.ndarray:
    """Solid angle of each texel, shape (H, W); sums to ~4pi."""
    _, omega = _texel_geometry(h, w)
    return omega.reshape(h, w).copy()


def irradiance(env: EnvMap, n: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Cosine-weighted hemisphere integral of incident radiance.

    ``n`` is one unit normal (3,) or a batch (..., 3); the result has the
    same leading shape with an RGB last axis. Linear in the map radiance.
    """
    n = _check_unit(n)
    single = n.ndim == 1
    flat = n.reshape(-1, 3)
    dirs, omega = _texel_geometry(env.h, env.w)
    radiance = env.pixels.reshape(-1, 3).astype(np.float64) * omega[:, None]
    out = np.empty((flat.shape[0], 3))
    for start in range(0, flat.shape[0], chunk):
        block = flat[start : start + chunk]
        cos = np.clip(block @ dirs.T, 0.0, None)
        out[start : start + chunk] = cos @ radiance
    out = out.reshape(n.shape[:-1] + (3,))
    return out[0] if single else out


def tonemap_ldr(img: np.ndarray) -> np.ndarray:
    """Reinhard x/(1+x) then gamma 1/2.2; maps [0, inf) into [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0.0:
        raise ValueError("tonemap input must be nonnegative")
    return np.power(img / (1.0 + img), 1.0 / 2.2).astype(np.float32)


def save_envmap(env: EnvMap, path: str | Path) -> None:
    """Write the binary panorama file: 'ENVM', u32 H, u32 W, f32 LE data."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", ENVM_MAGIC, env.h, env.w))
        f.write(env.pixels.astype("<f4").tobytes())


def load_envmap(path: str | Path) -> EnvMap:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise ValueError(f"truncated envmap file: {path}")
        magic, h, w = struct.unpack("<4sII", header)
        if magic != ENVM_MAGIC:
            raise ValueError(f"bad envmap magic in {path}: {magic!r}")
        data = np.frombuffer(f.read(h * w * 3 * 4), dtype="<f4")
    if data.size != h * w * 3:
        raise ValueError(f"truncated envmap payload: {path}")
    return EnvMap(data.reshape(h, w, 3).copy())


def save_envmap_png(env: EnvMap, path: str | Path) -> None:
    """Export the tonemapped LDR preview as an 8-bit PNG."""
    ldr = np.round(tonemap_ldr(env.pixels) * 255.0).astype(np.uint8)
    Image.fromarray(ldr, mode="RGB").save(path)
