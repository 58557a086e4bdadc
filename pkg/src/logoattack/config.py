"""Attack configuration (JSON file + CLI overrides)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .logo_style import StyleWeights
from .rl_attr import RLConfig
from .style_select import TARGETED, UNTARGETED

ABLATIONS = ("random_style_image", "solid_color_init", "vertical_strip_init",
             "mu_a_zero", "mu_d_zero", "random_step_direction")


@dataclass
class Ablations:
    random_style_image: bool = False      # A: skip stage 1, random style images
    solid_color_init: bool = False        # B: stage-1 init with a solid colour
    vertical_strip_init: bool = False     # C: stage-1 init with +-eta vertical stripes
    mu_a_zero: bool = False               # D: no logo-area penalty
    mu_d_zero: bool = False               # E: no corner-distance penalty
    random_step_direction: bool = False   # F: per-pixel random step signs in stage 3


@dataclass
class AttackConfig:
    mode: str = UNTARGETED
    target_class: Optional[int] = None
    target_rule: Optional[str] = None     # "rotate" | "next"; used when target_class is None
    query_limit: int = 300_000
    seed: int = 0
    oracle: str = "motion_hue"
    strict_top1: bool = False

    # stage 1
    ns: int = 5
    eta: float = 0.3
    stage1_iters: int = 3000
    stage1_alpha0: float = 0.1
    stage1_restarts: int = 10
    style_size: int = 32
    cumulative_lattice: bool = True

    # stage 2
    nl: int = 80
    logo_dir: Optional[str] = None
    logo_size: int = 32
    logo_seed: int = 0
    max_transparent_frac: float = 0.0
    max_white_frac: float = 0.5
    style_weights: StyleWeights = field(default_factory=StyleWeights)
    style_iters: int = 200
    style_lr: float = 0.05
    style_cache_dir: Optional[str] = None
    rl_trajectories: int = 16
    rl_max_iters: int = 50
    rl_lr: float = 0.1
    rl_baseline: str = "mean"
    mu_a: float = 1e-4
    mu_d: float = 0.05
    k_choices: tuple = (0.20, 0.25, 0.30, 0.35)
    placement_stride: int = 2

    # stage 3
    eta_p: float = 0.2
    eps: float = 0.5
    stage3_alpha0: float = 0.3
    stage3_rounds: int = 10_000
    per_frame_perturbation: bool = False

    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in (TARGETED, UNTARGETED):
            raise ValueError(f"mode must be targeted or untargeted, got {self.mode!r}")
        if self.mode == TARGETED and self.target_class is None and self.target_rule is None:
            raise ValueError("targeted mode needs target_class or target_rule")
        if self.target_rule not in (None, "rotate", "next"):
            raise ValueError(f"unknown target_rule {self.target_rule!r}")
        for name in ("ns", "nl", "stage1_iters", "stage1_restarts", "rl_trajectories",
                     "rl_max_iters", "stage3_rounds", "style_iters", "logo_size", "style_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.query_limit < 0:
            raise ValueError("query_limit must be non-negative")
        if not 0 < self.eta_p <= self.eps and self.eps != 0:
            raise ValueError("need 0 < eta_p <= eps")
        if not self.k_choices:
            raise ValueError("k_choices must not be empty")

    def rl_config(self) -> RLConfig:
        a = self.ablations
        return RLConfig(
            trajectories=self.rl_trajectories, max_iters=self.rl_max_iters,
            mu_a=0.0 if a.mu_a_zero else self.mu_a, mu_d=0.0 if a.mu_d_zero else self.mu_d,
            lr=self.rl_lr, baseline=self.rl_baseline, k_fractions=tuple(self.k_choices),
            stride=self.placement_stride, style_iters=self.style_iters, style_lr=self.style_lr,
            style_weights=self.style_weights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["k_choices"] = list(self.k_choices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("style_weights"), dict):
            d["style_weights"] = StyleWeights(**d["style_weights"])
        if isinstance(d.get("ablations"), dict):
            d["ablations"] = Ablations(**d["ablations"])
        if "k_choices" in d:
            d["k_choices"] = tuple(d["k_choices"])
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "AttackConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def with_ablation(self, **flags) -> "AttackConfig":
        return self.replace(ablations=dataclasses.replace(self.ablations, **flags))
