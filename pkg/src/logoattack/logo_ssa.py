"""Stage 3: square random search confined to the logo rectangle."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .style_select import TARGETED, alpha_schedule, goal_reached, improves, square_side
from .tensor_media import Mask, linf_project
from .victim import BudgetExhausted, QueryBudget, ScoreOracle, query

log = logging.getLogger(__name__)


@dataclass
class OptState:
    """``x_cur`` equals ``x_base`` outside the mask; inside it is
    ``clip(base + eta_p * lattice)`` with lattice entries in {-1, 0, 1}."""

    x_base: np.ndarray
    mask: Mask
    eta_p: float
    eps: float
    lattice: np.ndarray
    best_score: float = float("nan")
    label: int = -1

    def render(self, lattice=None) -> np.ndarray:
        lat = self.lattice if lattice is None else lattice
        m = self.mask
        out = self.x_base.copy()
        base = self.x_base[:, :, m.rows, m.cols]
        out[:, :, m.rows, m.cols] = linf_project(base, base + self.eta_p * lat, self.eps)
        return out

    @property
    def x_cur(self) -> np.ndarray:
        return self.render()


@dataclass
class LogoSSAResult:
    x_adv: np.ndarray
    success: bool
    queries: int
    rounds: int
    best_score: float
    label: int = -1
    trace: list = field(default_factory=list)


def logo_ssa(oracle: ScoreOracle, budget: QueryBudget, x_s: np.ndarray, mask: Mask, y0: int,
             yt: Optional[int], mode: str = TARGETED, eta_p: float = 0.2, eps: float = 0.5, *,
             rng: np.random.Generator, alpha0: float = 0.3, max_rounds: int = 10000,
             per_frame: bool = False, random_direction: bool = False,
             strict_top1: bool = False, trace_path=None, on_query=None) -> LogoSSAResult:
    """Accept-if-better square search on the masked region of ``x_s``.

    Every iterate stays bit-identical to ``x_s`` outside ``mask`` and within
    ``eps`` (L-inf) of it inside. Running out of budget returns the best
    iterate found so far with ``success=False``.
    """
    if mask.area == 0:
        raise ValueError("empty mask")
    if eta_p > eps and eps > 0:
        raise ValueError("eta_p must not exceed eps")
    t, c = x_s.shape[:2]
    lat_shape = (t if per_frame else 1, c, mask.height, mask.width)
    state = OptState(x_s, mask, eta_p if eps > 0 else 0.0, eps, np.zeros(lat_shape, dtype=np.int64))
    cls = yt if mode == TARGETED else y0
    start = budget.used
    trace = []

    def ask(lattice):
        res = query(oracle, budget, state.render(lattice), cls, strict_top1)
        if on_query is not None:
            on_query(res)
        return res

    rounds = 0
    try:
        res = ask(state.lattice)
        state.best_score, state.label = res.requested_score, res.top1_label
        trace.append((0, True, state.best_score))
        if goal_reached(state.label, mode, y0, yt) or eps == 0:
            return _finish(state, mode, y0, yt, budget.used - start, 0, trace, trace_path)
        mh, mw = mask.height, mask.width
        for i in range(max_rounds):
            rounds = i + 1
            side = square_side(alpha_schedule(alpha0, i, max_rounds), mw, mh)
            r = int(rng.integers(0, mh - side + 1))
            q = int(rng.integers(0, mw - side + 1))
            if random_direction:
                step = rng.integers(-1, 2, size=(lat_shape[0], c, side, side))
            else:
                step = 1
            accepted = False
            for sign in (1, -1):
                cand = state.lattice.copy()
                cand[:, :, r:r + side, q:q + side] += sign * step
                np.clip(cand, -1, 1, out=cand)
                res = ask(cand)
                if improves(res.requested_score, state.best_score, mode):
                    state.lattice = cand
                    state.best_score, state.label = res.requested_score, res.top1_label
                    accepted = True
                    break
            trace.append((rounds, accepted, state.best_score))
            if goal_reached(state.label, mode, y0, yt):
                break
    except BudgetExhausted:
        log.info("logo-ssa stopped: budget exhausted after %d rounds", rounds)
    return _finish(state, mode, y0, yt, budget.used - start, rounds, trace, trace_path)


def _finish(state, mode, y0, yt, queries, rounds, trace, trace_path) -> LogoSSAResult:
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["round", "accepted", "score"])
            for row in trace:
                wr.writerow([row[0], int(row[1]), repr(row[2])])
    success = state.label >= 0 and goal_reached(state.label, mode, y0, yt)
    return LogoSSAResult(state.x_cur, success, queries, rounds, state.best_score, state.label, trace)
