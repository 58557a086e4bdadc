"""Stage 2: policy-gradient search over logo placement, scale, logo and style."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .logo_style import StyleWeights, stylize_logo
from .policy import Policy, Rollout, reinforce_step
from .style_select import TARGETED, goal_reached
from .tensor_media import (Mask, load_slat, make_mask, overlay, resize_bilinear,
                           save_slat, scaled_size)
from .victim import QueryBudget, QueryResult, ScoreOracle, query

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-6
# action order of the policy
STEP_LOGO, STEP_STYLE, STEP_SCALE, STEP_U, STEP_V = range(5)


@dataclass(frozen=True)
class LogoAttributes:
    u: int
    v: int
    k: float
    l_ind: int
    s_ind: int

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "k": self.k, "l_ind": self.l_ind, "s_ind": self.s_ind}


class SearchSpace:
    """Discrete attribute space.

    ``k_choices`` are scale factors applied to the ``logo_h x logo_w`` base
    logo. Placement values are the stride grid plus the flush-to-edge
    position of every scale, so corners are always reachable.
    """

    def __init__(self, n_logos: int, n_styles: int, k_choices, logo_h: int, logo_w: int,
                 video_h: int, video_w: int, stride: int = 2):
        if n_logos < 1 or n_styles < 1 or len(k_choices) < 1:
            raise ValueError("search space needs at least one logo, style and scale")
        self.n_logos, self.n_styles = n_logos, n_styles
        self.k_choices = tuple(float(k) for k in k_choices)
        self.logo_h, self.logo_w = logo_h, logo_w
        self.video_h, self.video_w = video_h, video_w
        self.sides = [(scaled_size(k, logo_h), scaled_size(k, logo_w)) for k in self.k_choices]
        for sh, sw in self.sides:
            if sh > video_h or sw > video_w or sh < 1 or sw < 1:
                raise ValueError(f"scaled logo {sh}x{sw} does not fit {video_h}x{video_w}")
        self.u_values = self._grid(video_h, [s[0] for s in self.sides], stride)
        self.v_values = self._grid(video_w, [s[1] for s in self.sides], stride)

    @staticmethod
    def _grid(n: int, sizes, stride: int) -> np.ndarray:
        vals = set(range(0, n - min(sizes) + 1, stride))
        vals.update(n - s for s in sizes)
        return np.array(sorted(vals), dtype=np.int64)

    @classmethod
    def from_frame_fractions(cls, n_logos, n_styles, fractions, logo_h, logo_w, video_h, video_w,
                             stride: int = 2) -> "SearchSpace":
        """Scales given as fractions of the frame height."""
        ks = [f * video_h / logo_h for f in fractions]
        return cls(n_logos, n_styles, ks, logo_h, logo_w, video_h, video_w, stride)

    @property
    def head_sizes(self) -> tuple:
        return (self.n_logos, self.n_styles, len(self.k_choices), len(self.u_values), len(self.v_values))

    def mask(self, step: int, prefix) -> Optional[np.ndarray]:
        if step == STEP_U:
            return self.u_values <= self.video_h - self.sides[prefix[STEP_SCALE]][0]
        if step == STEP_V:
            return self.v_values <= self.video_w - self.sides[prefix[STEP_SCALE]][1]
        return None

    def decode(self, actions) -> LogoAttributes:
        l_i, s_i, k_i, u_i, v_i = actions
        return LogoAttributes(int(self.u_values[u_i]), int(self.v_values[v_i]),
                              self.k_choices[k_i], int(l_i), int(s_i))

    def feasible(self, attrs: LogoAttributes) -> bool:
        sh, sw = scaled_size(attrs.k, self.logo_h), scaled_size(attrs.k, self.logo_w)
        return (0 <= attrs.u <= self.video_h - sh and 0 <= attrs.v <= self.video_w - sw
                and 0 <= attrs.l_ind < self.n_logos and 0 <= attrs.s_ind < self.n_styles)


@dataclass
class Trajectory:
    actions: LogoAttributes
    logprobs: list
    reward: float = float("nan")
    rollout: Rollout = field(default=None, repr=False)


def sample_trajectory(policy: Policy, rng: np.random.Generator, space: SearchSpace) -> Trajectory:
    roll = policy.sample(rng, space.mask)
    return Trajectory(space.decode(roll.actions), list(roll.logprobs), rollout=roll)


def corner_distance(u: int, v: int, k: float, logo_h: int, logo_w: int,
                    video_h: int, video_w: int) -> float:
    """Smallest distance between a frame corner and its nearest logo corner."""
    sh, sw = scaled_size(k, logo_h), scaled_size(k, logo_w)
    logo = np.array([[u, v], [u, v + sw], [u + sh, v], [u + sh, v + sw]], dtype=np.float64)
    frame = np.array([[0, 0], [0, video_w], [video_h, 0], [video_h, video_w]], dtype=np.float64)
    d = np.linalg.norm(frame[:, None, :] - logo[None, :, :], axis=2)
    return float(d.min(axis=1).min())


def reward(score: float, k: float, h: int, w: int, d_m: float, mu_a: float, mu_d: float,
           mode: str) -> float:
    """``score`` is p(y_t | x_s) when targeted and p(y_0 | x_s) when untargeted."""
    p = float(np.clip(score, PROB_CLAMP, 1.0 - PROB_CLAMP))
    gain = np.log(p) if mode == TARGETED else np.log1p(-p)
    return float(gain - mu_a * k * k * h * w - mu_d * d_m)


@dataclass
class RLConfig:
    trajectories: int = 16
    max_iters: int = 50
    mu_a: float = 1e-4
    mu_d: float = 0.05
    lr: float = 0.1
    baseline: str = "mean"
    max_grad_norm: Optional[float] = 10.0
    plateau_tol: float = 1e-3
    plateau_patience: int = 10
    plateau_window: int = 5
    k_fractions: tuple = (0.20, 0.25, 0.30, 0.35)
    stride: int = 2
    hidden: int = 64
    style_iters: int = 200
    style_lr: float = 0.05
    style_weights: StyleWeights = field(default_factory=StyleWeights)


class StylizedLogoCache:
    """Memoises stylised logos per (logo, style) pair, optionally on disk."""

    def __init__(self, logos, styles, weights: StyleWeights, iters: int, lr: float,
                 cache_dir=None, logo_ids=None, seed: int = 0):
        self.logos, self.styles = logos, styles
        self.weights, self.iters, self.lr = weights, iters, lr
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.logo_ids = logo_ids or [str(i) for i in range(len(logos))]
        self.seed = seed
        self._mem = {}

    def _disk_key(self, li: int, si: int) -> str:
        style_hash = hashlib.sha1(np.asarray(self.styles[si], dtype="<f8").tobytes()).hexdigest()[:12]
        w = self.weights
        wkey = hashlib.sha1(repr((w.content, w.style, w.tv, self.iters, self.lr)).encode()).hexdigest()[:8]
        return f"{self.logo_ids[li]}_{style_hash}_{wkey}_{self.seed}"

    def get(self, li: int, si: int) -> np.ndarray:
        key = (li, si)
        if key in self._mem:
            return self._mem[key]
        path = self.cache_dir / f"{self._disk_key(li, si)}.slat" if self.cache_dir else None
        if path is not None and path.exists():
            out = load_slat(path, image=True)
        else:
            out = stylize_logo(self.logos[li], self.styles[si], self.weights, self.iters, self.lr)
            if path is not None:
                save_slat(path, out)
        self._mem[key] = out
        return out

    def __len__(self):
        return len(self._mem)


def compose(video: np.ndarray, stylized: np.ndarray, attrs: LogoAttributes) -> tuple[np.ndarray, Mask]:
    t, c, h, w = video.shape
    _, lh, lw = stylized.shape
    mask = make_mask(attrs.u, attrs.v, attrs.k, lh, lw, h, w, t, c)
    patch = resize_bilinear(stylized, mask.width, mask.height)
    return overlay(video, patch, mask), mask


@dataclass
class AttributeSearchResult:
    best_video: np.ndarray
    best_attrs: LogoAttributes
    best_mask: Mask
    best_reward: float
    best_query: QueryResult
    success: bool
    queries: int
    iterations: int
    best_reward_history: list = field(default_factory=list)
    policy: Optional[Policy] = None


def run_attribute_search(oracle: ScoreOracle, budget: QueryBudget, video: np.ndarray, style_set,
                         logo_set, cfg: RLConfig, *, rng: np.random.Generator, y0: int,
                         yt: Optional[int], mode: str = TARGETED, policy_seed: int = 0,
                         strict_top1: bool = False, cache: Optional[StylizedLogoCache] = None,
                         on_query=None) -> AttributeSearchResult:
    """Train the attribute policy against the victim until success or stop rule.

    Budget exhaustion propagates as :class:`BudgetExhausted`.
    """
    styles = list(style_set.images if hasattr(style_set, "images") else style_set)
    logos = list(logo_set)
    if not styles or not logos:
        raise ValueError("attribute search needs at least one style image and one logo")
    t, c, h, w = video.shape
    _, lh, lw = logos[0].shape
    space = SearchSpace.from_frame_fractions(len(logos), len(styles), cfg.k_fractions, lh, lw,
                                             h, w, cfg.stride)
    policy = Policy(space.head_sizes, hidden=cfg.hidden, seed=policy_seed)
    if cache is None:
        cache = StylizedLogoCache(logos, styles, cfg.style_weights, cfg.style_iters, cfg.style_lr)
    cls = yt if mode == TARGETED else y0

    best = None
    start = budget.used
    history, batch_means = [], []
    best_avg, stale = -np.inf, 0
    it = 0
    while it < cfg.max_iters:
        it += 1
        rolls, rewards = [], []
        for _ in range(cfg.trajectories):
            traj = sample_trajectory(policy, rng, space)
            a = traj.actions
            x_s, mask = compose(video, cache.get(a.l_ind, a.s_ind), a)
            res = query(oracle, budget, x_s, cls, strict_top1)
            if on_query is not None:
                on_query(res)
            d_m = corner_distance(a.u, a.v, a.k, lh, lw, h, w)
            r = reward(res.requested_score, a.k, lh, lw, d_m, cfg.mu_a, cfg.mu_d, mode)
            traj.reward = r
            rolls.append(traj.rollout)
            rewards.append(r)
            done = goal_reached(res.top1_label, mode, y0, yt)
            if best is None or r > best[0] or done:
                best = (r, x_s, a, mask, res)
            if done:
                history.append(best[0] if not history else max(history[-1], r))
                return AttributeSearchResult(x_s, a, mask, r, res, True, budget.used - start, it,
                                             history, policy)
        history.append(best[0])
        reinforce_step(policy, rolls, rewards, cfg.lr, cfg.baseline, cfg.max_grad_norm)

        batch_means.append(float(np.mean(rewards)))
        avg = float(np.mean(batch_means[-cfg.plateau_window:]))
        if avg > best_avg + cfg.plateau_tol:
            best_avg, stale = avg, 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                log.debug("attribute search plateaued after %d iterations", it)
                break
    r, x_s, a, mask, res = best
    return AttributeSearchResult(x_s, a, mask, r, res, False, budget.used - start, it, history, policy)
