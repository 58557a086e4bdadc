"""Logo sets: PNG ingestion with transparency/whiteness filtering, plus a
procedural generator used when no logo corpus is available."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor_media import resize_bilinear

log = logging.getLogger(__name__)

WHITE_LEVEL = 0.95


class IngestionError(RuntimeError):
    pass


@dataclass
class LogoSet:
    images: list = field(default_factory=list)    # 3 x S x S arrays
    ids: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def head(self, n: int) -> "LogoSet":
        return LogoSet(self.images[:n], self.ids[:n], self.paths[:n])


def rgba_stats(rgba: np.ndarray) -> tuple[float, float]:
    """Fractions of non-opaque pixels and of near-white pixels (H x W x 4 in [0, 1])."""
    alpha = rgba[..., 3]
    transparent = float(np.mean(alpha < 1.0))
    white = float(np.mean(np.all(rgba[..., :3] > WHITE_LEVEL, axis=-1)))
    return transparent, white


def accept_logo(rgba: np.ndarray, max_transparent_frac: float, max_white_frac: float) -> bool:
    transparent, white = rgba_stats(rgba)
    return transparent <= max_transparent_frac and white <= max_white_frac


def to_logo_tensor(rgba: np.ndarray, size: int) -> np.ndarray:
    """Composite over white, drop alpha, resize to ``3 x size x size``."""
    alpha = rgba[..., 3:4]
    rgb = rgba[..., :3] * alpha + (1.0 - alpha)
    return resize_bilinear(rgb.transpose(2, 0, 1), size, size)


def read_rgba(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0


def ingest_logos(directory, max_transparent_frac: float = 0.0, max_white_frac: float = 0.5,
                 size: int = 32, limit: int | None = None) -> LogoSet:
    directory = Path(directory)
    out = LogoSet()
    for path in sorted(directory.glob("*.png")):
        try:
            rgba = read_rgba(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable logo %s: %s", path, exc)
            continue
        if not accept_logo(rgba, max_transparent_frac, max_white_frac):
            continue
        out.images.append(to_logo_tensor(rgba, size))
        out.ids.append(path.stem)
        out.paths.append(str(path))
        if limit is not None and len(out) >= limit:
            break
    if not len(out):
        raise IngestionError(f"no usable logos in {directory}")
    return out


# -- procedural logos ----------------------------------------------------------------

def _palette(rng):
    base = rng.uniform(0.0, 1.0, 3)
    base[rng.integers(3)] = rng.uniform(0.7, 1.0)
    base[rng.integers(3)] = rng.uniform(0.0, 0.3)
    return base


def procedural_logo(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """One opaque RGBA logo: coloured field with a few flat shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    img[:] = _palette(rng) if rng.uniform() < 0.6 else rng.uniform(0.85, 1.0)
    for _ in range(rng.integers(1, 4)):
        color = _palette(rng)
        kind = rng.integers(4)
        cx, cy = rng.uniform(0.25, 0.75, 2)
        r = rng.uniform(0.15, 0.35)
        if kind == 0:
            m = (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2
        elif kind == 1:
            m = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.3, 1.0))
        elif kind == 2:
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
            m = (d < r) & (d > r * 0.6)
        else:
            m = (yy > cy - r) & (yy < cy + r) & (np.abs(xx - cx) < (yy - (cy - r)) / 2)
        img[m] = color
    rgba = np.concatenate([img, np.ones((size, size, 1))], axis=-1)
    return rgba


@lru_cache(maxsize=8)
def _procedural_cached(n: int, seed: int, size: int) -> tuple:
    rng = np.random.default_rng([seed, 7919])
    return tuple(to_logo_tensor(procedural_logo(rng), size) for _ in range(n))


def procedural_logo_set(n: int, seed: int = 0, size: int = 32) -> LogoSet:
    imgs = [x.copy() for x in _procedural_cached(n, seed, size)]
    return LogoSet(imgs, [f"proc{seed}_{i:04d}" for i in range(n)], [""] * n)


def write_procedural_pngs(directory, n: int, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 7919])
    paths = []
    for i in range(n):
        rgba = procedural_logo(rng)
        p = directory / f"logo_{i:04d}.png"
        Image.fromarray(np.round(rgba * 255).astype(np.uint8), "RGBA").save(p)
        paths.append(p)
    return paths
