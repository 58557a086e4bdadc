import csv
import json

import numpy as np
import pytest

from logoattack.config import AttackConfig
from logoattack.metrics_defense import summarize
from logoattack.pipeline import (attack_video, read_results, report_from_jsonl, resolve_target,
                                 run_attack, run_batch, stage_rngs)
from logoattack.tensor_media import load_slat, save_slat
from logoattack.victim import FunctionOracle, MotionHueOracle, gen_synthetic_video, write_dataset

TINY = dict(nl=6, style_iters=5, rl_max_iters=4, rl_trajectories=4, stage1_iters=100,
            stage3_rounds=100, query_limit=1500)


def tiny_cfg(mode="untargeted", **kw):
    rule = "rotate" if mode == "targeted" else None
    return AttackConfig(mode=mode, target_rule=rule, **{**TINY, **kw})


def small_video(c, seed=0):
    return gen_synthetic_video(c, seed, t=4, h=32, w=32)


def check_consistency(res, calls):
    assert calls == res.aq1 + res.aq2 + res.aq3
    if res.success:
        assert res.stage_of_success in (2, 3)
        assert (res.aq3 > 0) == (res.stage_of_success == 3)
        assert res.final_label != res.y0
        if res.yt is not None:
            assert res.final_label == res.yt
    else:
        assert res.stage_of_success is None


def test_resolve_target_rules():
    assert resolve_target(tiny_cfg(), 3) is None
    assert resolve_target(tiny_cfg("targeted"), 0) == 4
    assert [resolve_target(tiny_cfg("targeted"), y) for y in range(8)] == [4, 5, 6, 7, 0, 1, 2, 3]
    assert resolve_target(AttackConfig(mode="targeted", target_rule="next"), 7) == 0
    assert resolve_target(AttackConfig(mode="targeted", target_class=5), 1) == 5


def test_stage_rngs_deterministic_and_per_video():
    (a1, a2), sa, a3 = stage_rngs(0, "1/2")
    (b1, b2), sb, b3 = stage_rngs(0, "1/2")
    (c1, _), sc, _ = stage_rngs(0, "1/3")
    (d1, _), _, _ = stage_rngs(1, "1/2")
    assert sa == sb and a1.random() == b1.random() and a3.random() == b3.random()
    x = a2.random()
    assert x == b2.random()
    assert c1.random() != stage_rngs(0, "1/2")[0][0].random()
    assert d1.random() != stage_rngs(0, "1/2")[0][0].random()


@pytest.mark.parametrize("mode", ["untargeted", "targeted"])
def test_stage_gating_and_query_conservation(mode):
    cfg = tiny_cfg(mode)
    stages = set()
    for c in range(8):
        oracle = MotionHueOracle()
        res = run_attack(cfg, small_video(c), oracle, c, f"{c}/0")
        check_consistency(res, oracle.calls)
        assert res.total_queries <= cfg.query_limit
        stages.add(res.stage_of_success)
    assert {2, 3} <= stages


def test_same_seed_bit_identical():
    for c in (1, 3):
        a = attack_video(tiny_cfg("targeted"), small_video(c), MotionHueOracle(), c, f"{c}/0")
        b = attack_video(tiny_cfg("targeted"), small_video(c), MotionHueOracle(), c, f"{c}/0")
        assert a.result == b.result
        assert a.trace == b.trace
        assert (a.x_adv is None) == (b.x_adv is None)
        if a.x_adv is not None:
            assert np.array_equal(a.x_adv, b.x_adv)


def test_query_limit_zero_is_immediate_failure():
    oracle = MotionHueOracle()
    res = run_attack(tiny_cfg(query_limit=0), small_video(0), oracle, 0, "0/0")
    assert not res.success and res.total_queries == 0 and oracle.calls == 0


def test_ablation_random_style_has_no_stage_one_queries():
    cfg = tiny_cfg().with_ablation(random_style_image=True)
    for c in range(3):
        oracle = MotionHueOracle()
        res = run_attack(cfg, small_video(c), oracle, c, f"{c}/0")
        assert res.aq1 == 0
        check_consistency(res, oracle.calls)


def test_budget_exhaustion_is_a_failure_result():
    oracle = MotionHueOracle()
    res = run_attack(tiny_cfg("targeted", query_limit=40), small_video(2), oracle, 2, "2/0")
    assert not res.success and res.total_queries == oracle.calls <= 40
    assert res.note


def test_successful_adversarial_video_is_classified_as_claimed():
    run = attack_video(tiny_cfg("targeted"), small_video(4), MotionHueOracle(), 4, "4/0")
    assert run.result.success
    assert int(np.argmax(MotionHueOracle().scores(run.x_adv))) == run.result.yt == 0
    assert run.x_adv.min() >= 0 and run.x_adv.max() <= 1


# -- batches -------------------------------------------------------------------------

@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    write_dataset(root, classes=range(4), seeds=[0], t=4, h=32, w=32)
    return root


def test_run_batch_outputs(dataset, tmp_path):
    out = tmp_path / "run"
    report = run_batch(tiny_cfg(), dataset, MotionHueOracle(), out)
    results = read_results(out / "results.jsonl")
    assert [r.video_id for r in results] == ["0/0", "1/0", "2/0", "3/0"]
    assert report == summarize(results) == report_from_jsonl(out / "results.jsonl")
    assert json.loads((out / "report.json").read_text()) == report.to_dict()
    rows = list(csv.reader((out / "trace.csv").open()))
    assert rows[0] == ["video_id", "query_index", "best_score"]
    assert {r[0] for r in rows[1:]} == {r.video_id for r in results}
    for r in results:
        path = out / "adv" / f"{r.video_id.replace('/', '_')}.slat"
        assert path.exists() == r.success
        if r.success:
            assert load_slat(path).shape == (4, 3, 32, 32)


def test_run_batch_byte_identical(dataset, tmp_path):
    for name in ("a", "b"):
        run_batch(tiny_cfg("targeted"), dataset, MotionHueOracle(), tmp_path / name, workers=2)
    a = (tmp_path / "a" / "results.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "results.jsonl").read_bytes()
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_run_batch_resume_skips_finished(dataset, tmp_path):
    full = tmp_path / "full"
    run_batch(tiny_cfg(), dataset, MotionHueOracle(), full)
    part = tmp_path / "part"
    run_batch(tiny_cfg(), dataset, MotionHueOracle(), part, video_ids=["0/0", "2/0"])
    assert len(read_results(part / "results.jsonl")) == 2
    oracle = MotionHueOracle()
    run_batch(tiny_cfg(), dataset, oracle, part)
    resumed = read_results(part / "results.jsonl")
    assert sorted(r.video_id for r in resumed) == ["0/0", "1/0", "2/0", "3/0"]
    fresh = {r.video_id: r for r in read_results(full / "results.jsonl")}
    for r in resumed:
        assert r == fresh[r.video_id]
    # only the two new videos were screened and attacked
    new = [r for r in resumed if r.video_id in ("1/0", "3/0")]
    assert oracle.calls == 2 + sum(r.total_queries for r in new)


def test_run_batch_skips_misclassified_clean_videos(dataset, tmp_path):
    def always_class_one(video):
        p = np.full(8, 0.01)
        p[1] = 0.93
        return p
    report = run_batch(tiny_cfg(), dataset, FunctionOracle(always_class_one), tmp_path / "o")
    assert report.n == 1
    assert [r.video_id for r in read_results(tmp_path / "o" / "results.jsonl")] == ["1/0"]


def test_run_batch_forced_outcomes_fr_half(tmp_path):
    # video "0/0" flips as soon as it is touched; video "0/1" can never be moved
    flip, stuck = small_video(0, 0), gen_synthetic_video(0, 1, t=6, h=32, w=32)
    save_slat(tmp_path / "d" / "0" / "0.slat", flip)
    save_slat(tmp_path / "d" / "0" / "1.slat", stuck)
    flip = load_slat(tmp_path / "d" / "0" / "0.slat")

    def fn(video):
        p = np.full(8, 0.01)
        moved = video.shape == flip.shape and not np.array_equal(video, flip)
        p[1 if moved else 0] = 0.93
        return p
    report = run_batch(tiny_cfg(query_limit=300), tmp_path / "d", FunctionOracle(fn), tmp_path / "o")
    results = {r.video_id: r for r in read_results(tmp_path / "o" / "results.jsonl")}
    assert results["0/0"].success and results["0/0"].stage_of_success == 2
    assert not results["0/1"].success
    assert report.fr == 0.5 and report.fr2 == 0.5 and report.n == 2


def test_run_batch_empty_dataset(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError):
        run_batch(tiny_cfg(), tmp_path / "empty", MotionHueOracle(), tmp_path / "o")
