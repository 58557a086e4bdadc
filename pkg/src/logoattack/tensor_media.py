"""Dense video/image tensors, masks and the geometry shared by every stage.

Layout convention: videos are ``T x C x H x W`` float arrays, images are
``C x H x W``; all values live in [0, 1]. Masks are stored as the full
``T x C x H x W`` binary array plus the rectangle that produced them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SLAT_MAGIC = b"SLAT"


class PlacementError(ValueError):
    """Logo rectangle does not fit inside the frame."""


class ShapeError(ValueError):
    pass


def round_half_away(x: float) -> int:
    # Python's round() is banker's rounding; we want 2.5 -> 3 on every platform.
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def scaled_size(k: float, n: int) -> int:
    return round_half_away(k * n)


def as_video(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ShapeError(f"video must be T x C x H x W, got shape {arr.shape}")
    return arr


def as_image(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"image must be C x H x W, got shape {arr.shape}")
    return arr


def _axis_weights(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centred linear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a ``C x H x W`` image to ``C x out_h x out_w``."""
    img = as_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    _, h, w = img.shape
    if h == out_h and w == out_w:
        return img.copy()
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    top = img[:, r0, :] * (1.0 - fr)[None, :, None] + img[:, r1, :] * fr[None, :, None]
    out = top[:, :, c0] * (1.0 - fc)[None, None, :] + top[:, :, c1] * fc[None, None, :]
    return np.clip(out, 0.0, 1.0)


def upscale_to_video(img, t: int, h: int, w: int) -> np.ndarray:
    """Resize a small image to the frame size and repeat it over ``t`` frames."""
    frame = resize_bilinear(img, w, h)
    return np.repeat(frame[None], t, axis=0)


@dataclass(frozen=True)
class Mask:
    """Rectangular logo mask, identical in every frame and channel."""

    u: int
    v: int
    height: int
    width: int
    shape: tuple  # (T, C, H, W)

    @property
    def data(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint8)
        out[:, :, self.rows, self.cols] = 1
        return out

    @property
    def rows(self) -> slice:
        return slice(self.u, self.u + self.height)

    @property
    def cols(self) -> slice:
        return slice(self.v, self.v + self.width)

    @property
    def area(self) -> int:
        return self.height * self.width

    def frame_mask(self) -> np.ndarray:
        out = np.zeros(self.shape[2:], dtype=bool)
        out[self.rows, self.cols] = True
        return out


def make_mask(u: int, v: int, k: float, logo_h: int, logo_w: int,
              video_h: int, video_w: int, t: int, c: int) -> Mask:
    hh = scaled_size(k, logo_h)
    ww = scaled_size(k, logo_w)
    if hh < 1 or ww < 1:
        raise PlacementError(f"scale {k} collapses a {logo_h}x{logo_w} logo")
    if not (0 <= u <= video_h - hh and 0 <= v <= video_w - ww):
        raise PlacementError(
            f"logo {hh}x{ww} at ({u}, {v}) exceeds frame {video_h}x{video_w}")
    return Mask(int(u), int(v), hh, ww, (t, c, video_h, video_w))


def overlay(video, patch, mask: Mask, u: int | None = None, v: int | None = None) -> np.ndarray:
    """Paste ``patch`` into every frame at the mask's rectangle.

    ``u``/``v`` default to the mask origin; passing different values is an error.
    """
    video = as_video(video)
    patch = as_image(patch)
    if u is not None and u != mask.u or v is not None and v != mask.v:
        raise ShapeError("overlay position disagrees with the mask origin")
    if video.shape != mask.shape:
        raise ShapeError(f"video {video.shape} vs mask {mask.shape}")
    if patch.shape != (video.shape[1], mask.height, mask.width):
        raise ShapeError(
            f"patch {patch.shape} does not fill mask {mask.height}x{mask.width}")
    out = video.copy()
    out[:, :, mask.rows, mask.cols] = patch[None]
    return out


def linf_project(base, x, eps: float) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if base.shape != x.shape:
        raise ShapeError(f"{base.shape} vs {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    lo = np.maximum(base - eps, 0.0)
    hi = np.minimum(base + eps, 1.0)
    # keep lo <= hi when base itself sits outside [0, 1]
    hi = np.maximum(hi, lo)
    return np.minimum(np.maximum(x, lo), hi)


# -- SLAT tensor files ------------------------------------------------------

def save_slat(path, arr) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"cannot store rank-{arr.ndim} tensor as SLAT")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SLAT_MAGIC)
        fh.write(struct.pack("<4I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_slat(path, image: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SLAT_MAGIC:
        raise ValueError(f"{path}: not a SLAT file")
    dims = struct.unpack("<4I", blob[4:20])
    n = int(np.prod(dims))
    if len(blob) != 20 + 4 * n:
        raise ValueError(f"{path}: truncated payload ({len(blob) - 20} bytes for dims {dims})")
    arr = np.frombuffer(blob, dtype="<f4", offset=20).reshape(dims).astype(np.float64)
    if image:
        if dims[0] != 1:
            raise ShapeError(f"{path}: expected T=1 for an image, got {dims[0]}")
        return arr[0]
    return arr
