"""Command-line entry point: ``python -m logoattack <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import AttackConfig
from .logos import ingest_logos, write_procedural_pngs
from .metrics_defense import cleanser_grid, lgs, patch_cleanser, summarize
from .pipeline import read_results, result_line, run_attack, run_batch, screen_clean
from .tensor_media import load_slat
from .victim import NUM_CLASSES, FunctionOracle, QueryBudget, make_oracle, query, write_dataset

log = logging.getLogger("logoattack")


def _config(args) -> AttackConfig:
    overrides = dict(mode=args.mode, target_class=args.target_class, seed=args.seed,
                     query_limit=args.query_limit, target_rule=args.target_rule)
    return AttackConfig.load(args.config, **overrides)


def cmd_attack(args) -> int:
    cfg = _config(args)
    oracle = make_oracle(cfg.oracle)
    out = Path(args.out)
    if args.dataset:
        report = run_batch(cfg, args.dataset, oracle, out, workers=args.workers, limit=args.limit)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0
    if args.label is None:
        raise SystemExit("--video needs --label (the clean class id)")
    video = load_slat(args.video)
    if not screen_clean(oracle, video, args.label):
        log.warning("clean video is not classified as %d; attacking anyway", args.label)
    res = run_attack(cfg, video, oracle, args.label, video_id=Path(args.video).stem)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a") as fh:
        fh.write(result_line(res) + "\n")
    print(result_line(res))
    return 0 if res.success else 1


def cmd_ingest_logos(args) -> int:
    logos = ingest_logos(args.dir, args.max_transparent, args.max_white, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # opaque PNGs, so the output directory can serve as ``logo_dir``
    for img, lid in zip(logos.images, logos.ids):
        rgb = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(out / f"{lid}.png")
    print(f"kept {len(logos)} logos -> {out}")
    return 0


def cmd_gen_logos(args) -> int:
    paths = write_procedural_pngs(args.out, args.n, args.seed)
    print(f"wrote {len(paths)} logos -> {args.out}")
    return 0


def cmd_gen_dataset(args) -> int:
    classes = range(NUM_CLASSES) if args.classes is None else args.classes
    paths = write_dataset(args.out, classes, range(args.seed0, args.seed0 + args.per_class),
                          t=args.frames, h=args.size, w=args.size)
    print(f"wrote {len(paths)} videos -> {args.out}")
    return 0


def cmd_evaluate_defense(args) -> int:
    """Replay stored adversarial videos through defense + oracle."""
    run_dir = Path(args.run)
    results = [r for r in read_results(run_dir / "results.jsonl") if r.success]
    oracle = make_oracle(args.oracle)
    smoothed = FunctionOracle(lambda v: oracle.scores(
        lgs(v, args.block, args.threshold, args.smoothing)), oracle.num_classes)
    still = 0
    for r in results:
        x = load_slat(run_dir / "adv" / f"{r.video_id.replace('/', '_')}.slat")
        if args.defense == "lgs":
            label = query(smoothed, QueryBudget(1), x).top1_label
        else:
            grid = cleanser_grid(x.shape[2], x.shape[3], args.max_patch, args.per_axis)
            label = patch_cleanser(oracle, QueryBudget(len(grid) ** 2 + len(grid)), x, grid)
        fooled = label == r.yt if r.mode == "targeted" else label != r.y0
        still += fooled
    n_all = len(read_results(run_dir / "results.jsonl"))
    out = {"defense": args.defense, "n": n_all, "adversarial": len(results),
           "fooled_after_defense": still, "fr": still / n_all if n_all else None}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    report = summarize(read_results(args.results))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logoattack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attack", help="attack one video or a dataset directory")
    a.add_argument("--config", help="JSON file with AttackConfig fields")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--video", help="a .slat video")
    src.add_argument("--dataset", help="directory laid out as <class>/<seed>.slat")
    a.add_argument("--label", type=int, help="clean class id (with --video)")
    a.add_argument("--mode", choices=["targeted", "untargeted"])
    a.add_argument("--target-class", type=int)
    a.add_argument("--target-rule", choices=["rotate", "next"])
    a.add_argument("--seed", type=int)
    a.add_argument("--query-limit", type=int)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--limit", type=int, help="attack at most this many videos")
    a.add_argument("--out", required=True,
                   help="output directory (--dataset) or JSONL file (--video)")
    a.set_defaults(func=cmd_attack)

    g = sub.add_parser("ingest-logos", help="filter and resize a directory of RGBA PNGs")
    g.add_argument("dir")
    g.add_argument("--out", required=True)
    g.add_argument("--max-transparent", type=float, default=0.0)
    g.add_argument("--max-white", type=float, default=0.5)
    g.add_argument("--size", type=int, default=32)
    g.set_defaults(func=cmd_ingest_logos)

    gl = sub.add_parser("gen-logos", help="write procedural RGBA logo PNGs")
    gl.add_argument("--out", required=True)
    gl.add_argument("-n", type=int, default=80)
    gl.add_argument("--seed", type=int, default=0)
    gl.set_defaults(func=cmd_gen_logos)

    d = sub.add_parser("gen-dataset", help="write synthetic motion/hue videos")
    d.add_argument("--out", required=True)
    d.add_argument("--per-class", type=int, default=4)
    d.add_argument("--seed0", type=int, default=0)
    d.add_argument("--classes", type=int, nargs="+")
    d.add_argument("--frames", type=int, default=8)
    d.add_argument("--size", type=int, default=64)
    d.set_defaults(func=cmd_gen_dataset)

    e = sub.add_parser("evaluate-defense", help="post-defense fooling rate of a finished run")
    e.add_argument("--run", required=True, help="output directory of `attack --dataset`")
    e.add_argument("--defense", choices=["lgs", "pc"], required=True)
    e.add_argument("--oracle", default="motion_hue")
    e.add_argument("--block", type=int, default=8)
    e.add_argument("--threshold", type=float, default=0.1)
    e.add_argument("--smoothing", type=float, default=0.8)
    e.add_argument("--max-patch", type=int, default=24)
    e.add_argument("--per-axis", type=int, default=3)
    e.set_defaults(func=cmd_evaluate_defense)

    r = sub.add_parser("report", help="summarize a results.jsonl file")
    r.add_argument("results")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
