"""Attack-quality metrics and simplified patch defenses."""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor_media import Mask, as_video
from .victim import QueryBudget, ScoreOracle, query

FLOW_MAGIC = b"SLAF"
GRAY = 0.5


@dataclass
class AttackResult:
    video_id: str
    mode: str
    y0: int
    yt: Optional[int]
    success: bool
    stage_of_success: Optional[int]
    aq1: int
    aq2: int
    aq3: int
    aoa: float
    ti: float
    attrs: Optional[dict] = None
    final_label: Optional[int] = None
    note: str = ""

    @property
    def total_queries(self) -> int:
        return self.aq1 + self.aq2 + self.aq3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        return cls(**d)


@dataclass
class FlowField:
    """Backward flow for one frame pair: ``flow[..., 0]`` is dx, ``[..., 1]`` dy."""

    flow: np.ndarray           # H x W x 2
    occlusion: np.ndarray      # H x W, 1 = valid

    @classmethod
    def zero(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w, 2)), np.ones((h, w)))


def aoa(mask: Optional[Mask], video_h: int, video_w: int) -> float:
    if mask is None:
        return 0.0
    return mask.area / (video_h * video_w)


def mask_fraction(mask_arr: np.ndarray) -> float:
    """Occluded fraction of one frame/channel of a raw binary mask array."""
    m = np.asarray(mask_arr)
    while m.ndim > 2:
        m = m[0]
    return float(m.sum()) / m.size


def backward_warp(frame: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``frame`` (C x H x W) at ``p + flow(p)`` with bilinear weights."""
    c, h, w = frame.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xs + flow[..., 0], 0, w - 1)
    sy = np.clip(ys + flow[..., 1], 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = frame[:, y0, x0] * (1 - fx) + frame[:, y0, x1] * fx
    bot = frame[:, y1, x0] * (1 - fx) + frame[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def e_pair(xt: np.ndarray, xm: np.ndarray, flow: Optional[FlowField] = None) -> float:
    xt = np.asarray(xt, dtype=np.float64)
    xm = np.asarray(xm, dtype=np.float64)
    if xt.shape != xm.shape:
        raise ValueError(f"{xt.shape} vs {xm.shape}")
    c, h, w = xt.shape
    if flow is None:
        flow = FlowField.zero(h, w)
    warped = backward_warp(xm, flow.flow)
    return float(np.sum(flow.occlusion[None] * np.abs(xt - warped)) / (h * w * c))


def e_warp(video, flows: Optional[Sequence[FlowField]] = None) -> float:
    """Warping error; ``flows`` lists, for t = 2..T, the (t -> 1) flow then the
    (t -> t-1) flow. ``None`` means zero flow with no occlusion."""
    video = as_video(video)
    t = video.shape[0]
    if t < 2:
        raise ValueError("need at least two frames")
    if flows is not None and len(flows) != 2 * (t - 1):
        raise ValueError(f"expected {2 * (t - 1)} flow fields, got {len(flows)}")
    total = 0.0
    for i in range(1, t):
        f_first = flows[2 * (i - 1)] if flows is not None else None
        f_prev = flows[2 * (i - 1) + 1] if flows is not None else None
        total += e_pair(video[i], video[0], f_first) + e_pair(video[i], video[i - 1], f_prev)
    return total / (t - 1)


def save_flows(path, flows: Sequence[FlowField]) -> None:
    h, w = flows[0].occlusion.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<3I", len(flows), h, w))
        for f in flows:
            fh.write(np.asarray(f.flow, dtype="<f4").tobytes())
            fh.write(np.asarray(f.occlusion, dtype="<f4").tobytes())


def load_flows(path) -> list[FlowField]:
    blob = Path(path).read_bytes()
    if blob[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow file")
    n, h, w = struct.unpack("<3I", blob[4:16])
    per = h * w * 3
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != n * per:
        raise ValueError(f"{path}: truncated flow payload")
    out = []
    for i in range(n):
        chunk = data[i * per:(i + 1) * per].astype(np.float64)
        out.append(FlowField(chunk[:h * w * 2].reshape(h, w, 2), chunk[h * w * 2:].reshape(h, w)))
    return out


# -- defenses -----------------------------------------------------------------------

def lgs(video, block: int = 8, threshold: float = 0.1, smoothing: float = 0.8) -> np.ndarray:
    """Block-wise local gradient suppression.

    Blocks whose mean first-order gradient magnitude exceeds ``threshold`` get
    their deviations from the block mean scaled by ``1 - smoothing``.
    """
    video = as_video(video)
    if smoothing == 0:
        return video.copy()
    out = video.copy()
    t, c, h, w = video.shape
    lum = video.mean(axis=1)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :, :-1] = np.diff(lum, axis=2)
    gy[:, :-1, :] = np.diff(lum, axis=1)
    mag = np.sqrt(gx ** 2 + gy ** 2)
    for f in range(t):
        for r in range(0, h, block):
            for q in range(0, w, block):
                rs, cs = slice(r, min(r + block, h)), slice(q, min(q + block, w))
                if mag[f, rs, cs].mean() > threshold:
                    blk = video[f, :, rs, cs]
                    mean = blk.mean(axis=(1, 2), keepdims=True)
                    out[f, :, rs, cs] = mean + (1.0 - smoothing) * (blk - mean)
    return np.clip(out, 0.0, 1.0)


def cleanser_grid(h: int, w: int, max_patch: int, per_axis: int = 3) -> list[tuple]:
    """Rectangles ``(r0, r1, c0, c1)`` of a ``per_axis x per_axis`` mask set
    such that every ``max_patch`` square is fully inside at least one mask."""
    def axis(n):
        if per_axis == 1:
            return [(0, n)]
        stride = int(np.ceil((n - max_patch + 1) / per_axis))
        stride = max(stride, 1)
        size = min(max_patch + stride - 1, n)
        starts = [min(i * stride, n - size) for i in range(per_axis)]
        return [(s, s + size) for s in starts]
    return [(r0, r1, c0, c1) for r0, r1 in axis(h) for c0, c1 in axis(w)]


def apply_gray(video: np.ndarray, rects) -> np.ndarray:
    """Set masked pixels to gray. Masks are (r0, r1, c0, c1) rectangles or Mask objects."""
    out = video.copy()
    for m in rects:
        if isinstance(m, Mask):
            out[m.data.astype(bool)] = GRAY
        else:
            r0, r1, c0, c1 = m
            out[:, :, r0:r1, c0:c1] = GRAY
    return out


def patch_cleanser(oracle: ScoreOracle, budget: QueryBudget, video, mask_grid) -> int:
    """Two-round masking decision (one query per masked variant).

    Round 1 classifies the video under each single mask. Unanimity returns that
    label. Otherwise each mask whose label disagrees with the majority is
    re-checked with every second mask added; if all those agree with it, its
    label wins. Failing that, the round-1 majority label is returned.
    """
    video = as_video(video)
    rects = list(mask_grid)
    first = [query(oracle, budget, apply_gray(video, [m])).top1_label for m in rects]
    counts = Counter(first)
    if len(counts) == 1:
        return first[0]
    majority = min(counts, key=lambda lab: (-counts[lab], lab))
    for i, lab in enumerate(first):
        if lab == majority:
            continue
        second = [query(oracle, budget, apply_gray(video, [rects[i], m])).top1_label for m in rects]
        if all(s == lab for s in second):
            return lab
    return majority


def cleanser_queries(first_round_labels: Sequence[int], n_masks: int) -> int:
    """Worst-case queries spent by :func:`patch_cleanser` given round-1 labels
    (an upper bound: the second round stops at the first certified mask)."""
    counts = Counter(first_round_labels)
    if len(counts) == 1:
        return n_masks
    majority = min(counts, key=lambda lab: (-counts[lab], lab))
    return n_masks + n_masks * sum(1 for lab in first_round_labels if lab != majority)


# -- aggregation --------------------------------------------------------------------

@dataclass
class Report:
    n: int
    fr: float
    fr2: float
    aq: Optional[float]
    aq2: Optional[float]
    aq1_mean: Optional[float]
    aq2_mean: Optional[float]
    aq3_mean: Optional[float]
    aoa: Optional[float]
    ti: Optional[float]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        return {k: v for k, v in d.items() if v is not None}


def _mean(xs):
    xs = list(xs)
    return float(np.mean(xs)) if xs else None


def summarize(results: Sequence[AttackResult]) -> Report:
    """FR and query statistics; query and quality means are over successes."""
    results = sorted(results, key=lambda r: r.video_id)
    if not results:
        raise ValueError("no results to summarise")
    n = len(results)
    wins = [r for r in results if r.success]
    wins2 = [r for r in wins if r.stage_of_success == 2]
    return Report(
        n=n,
        fr=len(wins) / n,
        fr2=len(wins2) / n,
        aq=_mean(r.total_queries for r in wins),
        aq2=_mean(r.aq1 + r.aq2 for r in wins2),
        aq1_mean=_mean(r.aq1 for r in wins),
        aq2_mean=_mean(r.aq2 for r in wins),
        aq3_mean=_mean(r.aq3 for r in wins),
        aoa=_mean(r.aoa for r in wins),
        ti=_mean(r.ti for r in wins),
    )
