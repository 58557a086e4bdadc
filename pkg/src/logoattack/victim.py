"""Black-box score oracles, the query budget, and the desk-scale toy victim.

The toy victim classifies videos of a coloured square drifting over a
textured background. Classes are (direction, hue) pairs::

    class_id = 2 * direction + hue
    direction: 0 up, 1 down, 2 left, 3 right
    hue:       0 red, 1 blue
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .tensor_media import as_video, save_slat

NUM_CLASSES = 8
DIRECTIONS = ("up", "down", "left", "right")
HUES = ("red", "blue")
# unit vectors in (x, y) image coordinates, y pointing down
DIRECTION_VECTORS = np.array([[0.0, -1.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])
SPEED = 2  # px / frame
SQUARE_SIZE = 12
FLOOR_SCORE = 1e-6


class BudgetExhausted(RuntimeError):
    """Raised when an attack tries to query past its hard cap."""


class QueryBudget:
    """Hard cap on oracle calls. ``used`` only grows and never passes ``limit``."""

    def __init__(self, limit: int):
        if limit < 0:
            raise ValueError("limit must be non-negative")
        self.limit = int(limit)
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.limit - self._used

    @property
    def exhausted(self) -> bool:
        return self._used >= self.limit

    def consume(self) -> int:
        with self._lock:
            if self._used >= self.limit:
                raise BudgetExhausted(f"query limit {self.limit} reached")
            self._used += 1
            return self._used

    def __repr__(self):
        return f"QueryBudget(used={self._used}, limit={self.limit})"


@dataclass(frozen=True)
class QueryResult:
    top1_label: int
    top1_score: float
    requested_score: Optional[float] = None


class ScoreOracle:
    """Base class: subclasses implement ``scores(video) -> probability vector``.

    ``calls`` counts every classification, so it can be compared against the
    budgets handed to the attack.
    """

    num_classes = NUM_CLASSES

    def __init__(self):
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def scores(self, video: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def classify(self, video) -> np.ndarray:
        with self._lock:
            self._calls += 1
        return self.scores(as_video(video))


class FunctionOracle(ScoreOracle):
    """Wrap a plain ``video -> scores`` callable."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], num_classes: int = NUM_CLASSES):
        super().__init__()
        self.fn = fn
        self.num_classes = num_classes

    def scores(self, video):
        return np.asarray(self.fn(video), dtype=np.float64)


def query(oracle: ScoreOracle, budget: QueryBudget, video, requested: Optional[int] = None,
          strict_top1: bool = False) -> QueryResult:
    """The only gate between an attack and its oracle.

    With ``strict_top1`` the requested score is only revealed when the class is
    the top-1 class; otherwise it is reported as ``FLOOR_SCORE``.
    """
    budget.consume()
    probs = oracle.classify(video)
    top = int(np.argmax(probs))
    top_score = float(probs[top])
    req = None
    if requested is not None:
        if requested == top:
            req = top_score
        elif strict_top1:
            req = FLOOR_SCORE
        else:
            req = float(probs[requested])
    return QueryResult(top, top_score, req)


# -- synthetic dataset -------------------------------------------------------

def class_parts(class_id: int) -> tuple[int, int]:
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    return class_id // 2, class_id % 2


def class_name(class_id: int) -> str:
    d, h = class_parts(class_id)
    return f"{DIRECTIONS[d]}/{HUES[h]}"


def gen_synthetic_video(class_id: int, seed: int, t: int = 8, h: int = 64, w: int = 64) -> np.ndarray:
    """A coloured square moving 2 px/frame over a static grey texture."""
    direction, hue = class_parts(class_id)
    rng = np.random.default_rng([class_id, seed])
    s = min(SQUARE_SIZE, h // 2, w // 2)
    travel = SPEED * (t - 1)
    if h - s < travel or w - s < travel:
        raise ValueError(f"{h}x{w} frame too small for {t} frames of motion")

    # smooth grey texture: low-res noise upsampled, identical in R, G, B
    coarse = rng.uniform(0.3, 0.7, size=(h // 8 + 1, w // 8 + 1))
    tex = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    tex = tex + rng.normal(0.0, 0.03, size=(h, w))
    background = np.clip(np.repeat(tex[None], 3, axis=0), 0.0, 1.0)

    if hue == 0:
        color = np.array([0.85, 0.25, 0.25]) + rng.uniform(-0.05, 0.05, 3)
    else:
        color = np.array([0.25, 0.25, 0.85]) + rng.uniform(-0.05, 0.05, 3)

    dx, dy = (DIRECTION_VECTORS[direction] * SPEED).astype(int)
    x_lo = max(0, -dx * (t - 1))
    x_hi = w - s - max(0, dx * (t - 1))
    y_lo = max(0, -dy * (t - 1))
    y_hi = h - s - max(0, dy * (t - 1))
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))

    video = np.empty((t, 3, h, w))
    for i in range(t):
        frame = background.copy()
        y = y0 + dy * i
        x = x0 + dx * i
        frame[:, y:y + s, x:x + s] = color[:, None, None]
        video[i] = frame
    return video


def write_dataset(out_dir, classes=range(NUM_CLASSES), seeds=range(4), t: int = 8,
                  h: int = 64, w: int = 64) -> list[Path]:
    """Emit ``<class_id>/<seed>.slat`` files."""
    out_dir = Path(out_dir)
    paths = []
    for c in classes:
        for s in seeds:
            p = out_dir / str(c) / f"{s}.slat"
            save_slat(p, gen_synthetic_video(c, s, t, h, w))
            paths.append(p)
    return paths


def iter_dataset(data_dir):
    """Yield ``(video_id, class_id, path)`` in a fixed order."""
    data_dir = Path(data_dir)
    for cdir in sorted((d for d in data_dir.iterdir() if d.is_dir() and d.name.isdigit()),
                       key=lambda d: int(d.name)):
        for p in sorted(cdir.glob("*.slat"), key=lambda q: (len(q.stem), q.stem)):
            yield f"{cdir.name}/{p.stem}", int(cdir.name), p


# -- analytic toy victim -------------------------------------------------------

@dataclass(frozen=True)
class MotionHueWeights:
    motion: float = 1.5      # logits per px/frame along the class direction
    layout: float = 60.0     # logits per unit of luminance/position covariance
    hue: float = 60.0        # logits per unit of mean (R - B)
    texture: float = 200.0   # logits per unit of fine-texture template response


TEMPLATE_SEED = 20240501
TEMPLATE_CELL = 2    # template resolution, px
TEMPLATE_BLOCK = 8   # block means removed at this scale


@lru_cache(maxsize=8)
def texture_templates(h: int, w: int) -> np.ndarray:
    """One fixed high-pass pattern per direction, shape (4, h, w).

    Cells of ``TEMPLATE_CELL`` px carry i.i.d. normal values; every
    ``TEMPLATE_BLOCK`` block is then made zero-mean, so anything constant on
    those blocks (uniform frames, the blocky background texture) has exactly
    zero response. Each template is scaled to unit RMS.
    """
    rng = np.random.default_rng(TEMPLATE_SEED)
    c, b = TEMPLATE_CELL, TEMPLATE_BLOCK
    out = np.empty((len(DIRECTIONS), h, w))
    for d in range(len(DIRECTIONS)):
        cells = rng.standard_normal((-(-h // c), -(-w // c)))
        tpl = np.kron(cells, np.ones((c, c)))[:h, :w]
        for r0 in range(0, h, b):
            for c0 in range(0, w, b):
                blk = tpl[r0:r0 + b, c0:c0 + b]
                blk -= blk.mean()
        out[d] = tpl / np.sqrt((tpl ** 2).mean())
    out.setflags(write=False)
    return out


def _centroids(diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroids (x, y) of each |frame difference| map; ``valid`` flags non-empty maps."""
    t1, h, w = diff.shape
    mass = diff.sum(axis=(1, 2))
    valid = mass > 1e-9
    safe = np.where(valid, mass, 1.0)
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    cy = (diff.sum(axis=2) @ ys) / safe
    cx = (diff.sum(axis=1) @ xs) / safe
    return np.stack([cx, cy], axis=1), valid


def video_features(video) -> dict:
    """Motion, layout and hue features used by the toy victim."""
    video = as_video(video)
    t, c, h, w = video.shape
    if c != 3:
        raise ValueError("toy victim expects RGB video")
    lum = video.mean(axis=1)                       # T x H x W

    motion = np.zeros(2)
    if t >= 3:
        diff = np.abs(np.diff(lum, axis=0)) + np.abs(np.diff(video[:, 0] - video[:, 2], axis=0))
        cents, valid = _centroids(diff)
        ok = valid[1:] & valid[:-1]
        if ok.any():
            motion = (cents[1:] - cents[:-1])[ok].mean(axis=0)

    # covariance of luminance with normalised pixel position, in (x, y)
    px = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    py = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    mean_frame = lum.mean(axis=0)
    centred = mean_frame - mean_frame.mean()
    layout = np.array([(centred.mean(axis=0) * px).mean(), (centred.mean(axis=1) * py).mean()])

    # response of the mean frame to each direction's fine-texture template
    texture = (texture_templates(h, w) * mean_frame).mean(axis=(1, 2))

    hue = float((video[:, 0] - video[:, 2]).mean())
    return {"motion": motion, "layout": layout, "texture": texture, "hue": hue}


def motion_hue_logits(video, weights: MotionHueWeights = MotionHueWeights()) -> np.ndarray:
    f = video_features(video)
    hue_sign = np.array([1.0, -1.0])
    logits = np.empty(NUM_CLASSES)
    for cid in range(NUM_CLASSES):
        d, hh = divmod(cid, 2)
        dvec = DIRECTION_VECTORS[d]
        logits[cid] = (weights.motion * f["motion"] @ dvec
                       + weights.layout * f["layout"] @ dvec
                       + weights.texture * f["texture"][d]
                       + weights.hue * f["hue"] * hue_sign[hh])
    return logits


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def motion_hue_scores(video, weights: MotionHueWeights = MotionHueWeights()) -> np.ndarray:
    return softmax(motion_hue_logits(video, weights))


class MotionHueOracle(ScoreOracle):
    def __init__(self, weights: MotionHueWeights = MotionHueWeights()):
        super().__init__()
        self.weights = weights

    def scores(self, video):
        return motion_hue_scores(video, self.weights)


ORACLES: dict[str, Callable[[], ScoreOracle]] = {
    "motion_hue": MotionHueOracle,
}


def make_oracle(name: str) -> ScoreOracle:
    try:
        return ORACLES[name]()
    except KeyError:
        raise ValueError(f"unknown oracle {name!r}; known: {sorted(ORACLES)}") from None
