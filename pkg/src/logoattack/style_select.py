"""Stage 1: square random search for small style images the victim already
classifies as the goal class once upscaled to the video size."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .tensor_media import load_slat, round_half_away, save_slat, upscale_to_video
from .victim import QueryBudget, QueryResult, ScoreOracle, query

log = logging.getLogger(__name__)

TARGETED = "targeted"
UNTARGETED = "untargeted"
SCHEDULE_FRACTIONS = (0.1, 0.25, 0.5, 0.75)


class StageOneFailure(RuntimeError):
    pass


def square_side(alpha: float, wi: int, hi: int) -> int:
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    h = round_half_away(np.sqrt(alpha * wi * hi))
    return int(min(max(h, 1), min(wi, hi)))


def alpha_schedule(alpha0: float, i: int, total: int) -> float:
    """Piecewise-constant: halves at 10%, 25%, 50% and 75% of ``total``."""
    if not 0 <= i < total:
        raise ValueError(f"iteration {i} outside [0, {total})")
    frac = i / total
    return alpha0 / 2 ** sum(frac >= f for f in SCHEDULE_FRACTIONS)


def sample_square_position(rng: np.random.Generator, wi: int, hi: int, h: int) -> tuple[int, int]:
    """Top-left corner (row, col) of an ``h x h`` square inside ``hi x wi``."""
    if h > min(wi, hi):
        raise ValueError("square larger than the image")
    return int(rng.integers(0, hi - h + 1)), int(rng.integers(0, wi - h + 1))


def goal_reached(label: int, mode: str, y0: int, yt: Optional[int]) -> bool:
    return label == yt if mode == TARGETED else label != y0


def improves(new: float, old: float, mode: str) -> bool:
    return new > old if mode == TARGETED else new < old


@dataclass
class SsaState:
    """Current style image as ``clip(x0 + eta * lattice, 0, 1)``.

    ``lattice`` holds integer steps in {-1, 0, 1} relative to the initial
    image ``x0``; with ``cumulative=False`` the steps are not re-projected and
    may accumulate.
    """

    x0: np.ndarray
    eta: float
    mode: str
    lattice: np.ndarray = None
    best_score: float = float("nan")
    label: int = -1
    iter: int = 0
    cumulative: bool = True

    def __post_init__(self):
        if self.lattice is None:
            self.lattice = np.zeros(self.x0.shape, dtype=np.int64)

    @property
    def x(self) -> np.ndarray:
        return np.clip(self.x0 + self.eta * self.lattice, 0.0, 1.0)


class Stage1Evaluator:
    """Resize a candidate style image to video size and query it."""

    def __init__(self, oracle: ScoreOracle, budget: QueryBudget, video_shape, objective_class: int,
                 strict_top1: bool = False, on_query: Optional[Callable] = None):
        self.oracle = oracle
        self.budget = budget
        self.t, _, self.h, self.w = video_shape
        self.cls = objective_class
        self.strict = strict_top1
        self.on_query = on_query

    def __call__(self, img) -> QueryResult:
        res = query(self.oracle, self.budget, upscale_to_video(img, self.t, self.h, self.w),
                    self.cls, self.strict)
        if self.on_query is not None:
            self.on_query(res)
        return res


def ssa_round(state: SsaState, evaluate: Callable[[np.ndarray], QueryResult],
              rng: np.random.Generator, alpha: float) -> SsaState:
    """One +delta / -delta proposal on a random square; at most two queries."""
    c, hi, wi = state.x0.shape
    h = square_side(alpha, wi, hi)
    r, q = sample_square_position(rng, wi, hi, h)
    for sign in (1, -1):
        cand = state.lattice.copy()
        cand[:, r:r + h, q:q + h] += sign
        if state.cumulative:
            np.clip(cand, -1, 1, out=cand)
        x = np.clip(state.x0 + state.eta * cand, 0.0, 1.0)
        res = evaluate(x)
        if improves(res.requested_score, state.best_score, state.mode):
            state.lattice = cand
            state.best_score = res.requested_score
            state.label = res.top1_label
            break
    state.iter += 1
    return state


def init_image(rng: np.random.Generator, shape, how: str = "uniform", eta: float = 0.3) -> np.ndarray:
    """Starting style image: uniform noise, a solid colour, or vertical stripes."""
    c, hi, wi = shape
    if how == "uniform":
        return rng.uniform(0.0, 1.0, size=shape)
    if how == "solid":
        return np.broadcast_to(rng.uniform(0.0, 1.0, size=(c, 1, 1)), shape).copy()
    if how == "stripes":
        stripes = rng.choice([-eta, eta], size=(c, 1, wi))
        return np.clip(0.5 + np.broadcast_to(stripes, shape), 0.0, 1.0)
    raise ValueError(f"unknown init {how!r}")


@dataclass
class StyleSet:
    images: list = field(default_factory=list)
    certified_labels: list = field(default_factory=list)
    queries: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.images)

    def __len__(self):
        return len(self.images)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            save_slat(out_dir / f"style_{i}.slat", img)
        manifest = {"files": [f"style_{i}.slat" for i in range(self.size)],
                    "certified_labels": self.certified_labels, "queries": self.queries}
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, in_dir) -> "StyleSet":
        in_dir = Path(in_dir)
        manifest = json.loads((in_dir / "manifest.json").read_text())
        imgs = [load_slat(in_dir / f, image=True) for f in manifest["files"]]
        return cls(imgs, list(manifest["certified_labels"]), list(manifest["queries"]))


def search_style_image(evaluate, rng, shape, mode, y0, yt, iters: int, alpha0: float,
                       eta: float, init: str = "uniform", cumulative: bool = True):
    """One restart of the square search. Returns ``(image, label)`` or ``None``."""
    state = SsaState(init_image(rng, shape, init, eta), eta, mode, cumulative=cumulative)
    res = evaluate(state.x)
    state.best_score, state.label = res.requested_score, res.top1_label
    if goal_reached(state.label, mode, y0, yt):
        return state.x, state.label
    for i in range(iters):
        ssa_round(state, evaluate, rng, alpha_schedule(alpha0, i, iters))
        if goal_reached(state.label, mode, y0, yt):
            return state.x, state.label
    return None


def build_style_set(oracle: ScoreOracle, budget: QueryBudget, y0: int, yt: Optional[int],
                    iters: int, alpha0: float, ns: int, *, rng: np.random.Generator,
                    video_shape, mode: str = TARGETED, eta: float = 0.3,
                    image_size: tuple[int, int] = (32, 32), max_restarts: int = 10,
                    init: str = "uniform", cumulative: bool = True,
                    strict_top1: bool = False, on_query=None) -> StyleSet:
    """Collect up to ``ns`` certified style images.

    Raises :class:`StageOneFailure` if no image at all could be certified.
    Budget exhaustion propagates.
    """
    if ns < 1:
        raise ValueError("ns must be >= 1")
    if mode == TARGETED and yt is None:
        raise ValueError("targeted mode needs a target class")
    cls = yt if mode == TARGETED else y0
    evaluate = Stage1Evaluator(oracle, budget, video_shape, cls, strict_top1, on_query)
    shape = (video_shape[1], *image_size)
    out = StyleSet()
    for _ in range(ns):
        start = budget.used
        for _attempt in range(max_restarts):
            found = search_style_image(evaluate, rng, shape, mode, y0, yt, iters, alpha0, eta,
                                       init, cumulative)
            if found is not None:
                out.images.append(found[0])
                out.certified_labels.append(found[1])
                out.queries.append(budget.used - start)
                break
        else:
            log.info("style image %d: no certified image after %d restarts", out.size, max_restarts)
    if out.size == 0:
        raise StageOneFailure(f"no style image certified after {max_restarts} restarts")
    return out


def random_style_set(rng: np.random.Generator, ns: int, channels: int = 3,
                     image_size: tuple[int, int] = (32, 32)) -> StyleSet:
    """Uncertified random style images; costs no queries."""
    imgs = [rng.uniform(0.0, 1.0, size=(channels, *image_size)) for _ in range(ns)]
    return StyleSet(imgs, [-1] * ns, [0] * ns)
