"""Black-box stylized-logo attacks on video classifiers.

Stage 1 searches small style images the victim assigns to the goal class,
stage 2 picks a logo, style, size and position with a REINFORCE-trained
policy, and stage 3 refines the pasted logo with a masked square search.
"""

from .config import Ablations, AttackConfig
from .metrics_defense import AttackResult, Report, aoa, e_warp, summarize
from .pipeline import attack_video, run_attack, run_batch
from .victim import MotionHueOracle, QueryBudget, gen_synthetic_video

__all__ = ["Ablations", "AttackConfig", "AttackResult", "MotionHueOracle", "QueryBudget",
           "Report", "aoa", "attack_video", "e_warp", "gen_synthetic_video", "run_attack",
           "run_batch", "summarize"]
__version__ = "0.1.0"
