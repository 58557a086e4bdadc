"""End-to-end attack: style selection -> attribute search -> Logo-SSA, plus
batch running with JSON-lines results."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import AttackConfig
from .logo_ssa import logo_ssa
from .logos import LogoSet, ingest_logos, procedural_logo_set
from .metrics_defense import AttackResult, Report, aoa, e_warp, summarize
from .rl_attr import StylizedLogoCache, run_attribute_search
from .style_select import (TARGETED, StageOneFailure, build_style_set, random_style_set)
from .tensor_media import load_slat, save_slat
from .victim import (NUM_CLASSES, BudgetExhausted, QueryBudget, ScoreOracle, iter_dataset,
                     make_oracle, query)

log = logging.getLogger(__name__)


def resolve_target(cfg: AttackConfig, y0: int, num_classes: int = NUM_CLASSES) -> Optional[int]:
    if cfg.mode != TARGETED:
        return None
    if cfg.target_class is not None:
        return cfg.target_class
    if cfg.target_rule == "next":
        return (y0 + 1) % num_classes
    # "rotate": same hue, direction turned by 90 degrees (toy class layout)
    d, h = divmod(y0, 2)
    return 2 * ((d + 2) % 4) + h


def load_logo_set(cfg: AttackConfig) -> LogoSet:
    if cfg.logo_dir:
        return ingest_logos(cfg.logo_dir, cfg.max_transparent_frac, cfg.max_white_frac,
                            cfg.logo_size, limit=cfg.nl)
    return procedural_logo_set(cfg.nl, cfg.logo_seed, cfg.logo_size)


def stage_rngs(seed: int, video_id: str):
    key = zlib.crc32(video_id.encode())
    children = np.random.SeedSequence(entropy=seed, spawn_key=(key,)).spawn(4)
    return ([np.random.default_rng(c) for c in children[:2]],
            int(children[2].generate_state(1)[0]), np.random.default_rng(children[3]))


class _Tracker:
    """Running best score per query, for score-vs-query plot data."""

    def __init__(self, budget: QueryBudget, targeted: bool):
        self.budget = budget
        self.targeted = targeted
        self.best = None
        self.rows = []

    def __call__(self, res):
        s = res.requested_score
        if s is None:
            return
        if self.best is None or (s > self.best if self.targeted else s < self.best):
            self.best = s
        self.rows.append((self.budget.used, self.best))


@dataclass
class AttackRun:
    result: AttackResult
    x_adv: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)


def attack_video(cfg: AttackConfig, video: np.ndarray, oracle: ScoreOracle, y0: int,
                 video_id: str = "", logos: Optional[LogoSet] = None) -> AttackRun:
    """Run all three stages on one clean video the oracle labels ``y0``."""
    yt = resolve_target(cfg, y0, getattr(oracle, "num_classes", NUM_CLASSES))
    t, c, h, w = video.shape
    budget = QueryBudget(cfg.query_limit)
    (rng1, rng2), policy_seed, rng3 = stage_rngs(cfg.seed, video_id)
    abl = cfg.ablations
    aq = [0, 0, 0]
    tracker = _Tracker(budget, cfg.mode == TARGETED)

    def fail(note, attrs=None, label=None):
        return AttackRun(AttackResult(video_id, cfg.mode, y0, yt, False, None, aq[0], aq[1], aq[2],
                                      0.0, 0.0, attrs, label, note), None, tracker.rows)

    if cfg.query_limit == 0:
        return fail("no query budget")

    # stage 1
    try:
        if abl.random_style_image:
            styles = random_style_set(rng1, cfg.ns, c, (cfg.style_size, cfg.style_size))
        else:
            init = "solid" if abl.solid_color_init else "stripes" if abl.vertical_strip_init else "uniform"
            styles = build_style_set(
                oracle, budget, y0, yt, cfg.stage1_iters, cfg.stage1_alpha0, cfg.ns, rng=rng1,
                video_shape=video.shape, mode=cfg.mode, eta=cfg.eta,
                image_size=(cfg.style_size, cfg.style_size), max_restarts=cfg.stage1_restarts,
                init=init, cumulative=cfg.cumulative_lattice, strict_top1=cfg.strict_top1)
    except (StageOneFailure, BudgetExhausted) as exc:
        aq[0] = budget.used
        return fail(f"stage 1: {exc}")
    aq[0] = budget.used

    # stage 2
    logos = logos if logos is not None else load_logo_set(cfg)
    rl = cfg.rl_config()
    cache = StylizedLogoCache(logos.images, styles.images, rl.style_weights, rl.style_iters,
                              rl.style_lr, cfg.style_cache_dir, logos.ids, cfg.seed)
    try:
        s2 = run_attribute_search(oracle, budget, video, styles, logos.images, rl, rng=rng2, y0=y0,
                                  yt=yt, mode=cfg.mode, policy_seed=policy_seed,
                                  strict_top1=cfg.strict_top1, cache=cache, on_query=tracker)
    except BudgetExhausted as exc:
        aq[1] = budget.used - aq[0]
        return fail(f"stage 2: {exc}")
    aq[1] = budget.used - aq[0]
    attrs = s2.best_attrs.to_dict()
    area = aoa(s2.best_mask, h, w)

    if s2.success:
        res = AttackResult(video_id, cfg.mode, y0, yt, True, 2, aq[0], aq[1], 0, area,
                           e_warp(s2.best_video), attrs, s2.best_query.top1_label)
        return AttackRun(res, s2.best_video, tracker.rows)

    # stage 3
    s3 = logo_ssa(oracle, budget, s2.best_video, s2.best_mask, y0, yt, cfg.mode, cfg.eta_p,
                  cfg.eps, rng=rng3, alpha0=cfg.stage3_alpha0, max_rounds=cfg.stage3_rounds,
                  per_frame=cfg.per_frame_perturbation,
                  random_direction=abl.random_step_direction, strict_top1=cfg.strict_top1,
                  on_query=tracker)
    aq[2] = s3.queries
    if not s3.success:
        return fail("stage 3: goal not reached", attrs, s3.label)
    res = AttackResult(video_id, cfg.mode, y0, yt, True, 3, aq[0], aq[1], aq[2], area,
                       e_warp(s3.x_adv), attrs, s3.label)
    return AttackRun(res, s3.x_adv, tracker.rows)


def run_attack(cfg: AttackConfig, video: np.ndarray, oracle: ScoreOracle, y0: int,
               video_id: str = "", logos: Optional[LogoSet] = None) -> AttackResult:
    return attack_video(cfg, video, oracle, y0, video_id, logos).result


# -- batches -------------------------------------------------------------------------

def result_line(result: AttackResult) -> str:
    return json.dumps(result.to_dict(), sort_keys=True)


def read_results(path) -> list[AttackResult]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for ln in path.read_text().splitlines():
        if ln.strip():
            out.append(AttackResult.from_dict(json.loads(ln)))
    return out


def screen_clean(oracle: ScoreOracle, video: np.ndarray, y0: int) -> bool:
    """Is the clean video classified correctly? Uses its own throwaway budget."""
    return query(oracle, QueryBudget(1), video).top1_label == y0


def run_batch(cfg: AttackConfig, dataset_dir, oracle: ScoreOracle, out_dir, workers: int = 1,
              limit: Optional[int] = None, video_ids=None) -> Report:
    """Attack every correctly classified video under ``dataset_dir``.

    Writes ``results.jsonl`` (one record per video, resumable), ``report.json``,
    ``trace.csv`` and adversarial videos under ``adv/``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"
    done = {r.video_id: r for r in read_results(results_path)}
    items = list(iter_dataset(dataset_dir))
    if video_ids is not None:
        wanted = set(video_ids)
        items = [it for it in items if it[0] in wanted]
    if limit is not None:
        items = items[:limit]
    if not items:
        raise ValueError(f"no videos found under {dataset_dir}")
    logos = load_logo_set(cfg)

    todo = []
    for vid, y0, path in items:
        if vid in done:
            continue
        try:
            video = load_slat(path)
        except OSError as exc:
            raise OSError(f"{path}: {exc}") from exc
        if not screen_clean(oracle, video, y0):
            log.info("skipping %s: clean video misclassified", vid)
            continue
        todo.append((vid, y0, video))

    def work(item):
        vid, y0, video = item
        return attack_video(cfg, video, oracle, y0, vid, logos)

    trace_path = out_dir / "trace.csv"
    new_trace = not trace_path.exists()
    with open(results_path, "a") as res_fh, open(trace_path, "a", newline="") as tr_fh:
        tw = csv.writer(tr_fh)
        if new_trace:
            tw.writerow(["video_id", "query_index", "best_score"])
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            # map() yields in submission order, keeping the output deterministic
            for (vid, _, _), run in zip(todo, pool.map(work, todo)):
                res_fh.write(result_line(run.result) + "\n")
                res_fh.flush()
                for qi, best in run.trace:
                    tw.writerow([vid, qi, repr(best)])
                if run.x_adv is not None:
                    save_slat(out_dir / "adv" / f"{vid.replace('/', '_')}.slat", run.x_adv)
                done[vid] = run.result

    results = read_results(results_path)
    report = summarize(results)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return report


def report_from_jsonl(path) -> Report:
    return summarize(read_results(path))
