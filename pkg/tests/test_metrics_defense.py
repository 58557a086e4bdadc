import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logoattack.metrics_defense import (GRAY, AttackResult, FlowField, aoa, apply_gray,
                                        backward_warp, cleanser_grid, cleanser_queries, e_pair,
                                        e_warp, lgs, load_flows, mask_fraction, patch_cleanser,
                                        save_flows, summarize)
from logoattack.tensor_media import Mask, make_mask
from logoattack.victim import FunctionOracle, MotionHueOracle, QueryBudget, gen_synthetic_video


def brute_e_pair(xt, xm):
    c, h, w = xt.shape
    tot = 0.0
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                tot += abs(xt[ch, i, j] - xm[ch, i, j])
    return tot / (c * h * w)


def brute_e_warp(video):
    t = video.shape[0]
    return sum(brute_e_pair(video[i], video[0]) + brute_e_pair(video[i], video[i - 1])
               for i in range(1, t)) / (t - 1)


# -- AOA ------------------------------------------------------------------------------

def test_aoa_examples():
    m = make_mask(0, 0, 25 / 32, 32, 32, 112, 112, 1, 3)
    assert m.area == 625
    assert aoa(m, 112, 112) == 625 / 12544
    assert round(100 * aoa(m, 112, 112), 2) == 4.98
    assert aoa(None, 10, 10) == 0.0
    full = Mask(0, 0, 10, 10, (1, 3, 10, 10))
    assert aoa(full, 10, 10) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31))
def test_aoa_matches_mask_fraction(h, w, seed):
    rng = np.random.default_rng(seed)
    mh, mw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
    m = Mask(int(rng.integers(0, h - mh + 1)), int(rng.integers(0, w - mw + 1)), mh, mw, (2, 3, h, w))
    assert 0 <= aoa(m, h, w) <= 1
    assert aoa(m, h, w) == pytest.approx(mask_fraction(m.data))


# -- warping error -----------------------------------------------------------------------

def test_e_pair_examples():
    x = np.random.default_rng(0).random((3, 5, 6))
    assert e_pair(x, x) == 0.0
    assert e_pair(np.ones((3, 4, 4)), np.zeros((3, 4, 4))) == 1.0
    y = np.random.default_rng(1).random((3, 5, 6))
    assert e_pair(x, y) == pytest.approx(brute_e_pair(x, y), abs=1e-12)
    with pytest.raises(ValueError):
        e_pair(x, y[:, :4])


def test_e_pair_occlusion_masks_pixels():
    x, y = np.ones((1, 2, 2)), np.zeros((1, 2, 2))
    occ = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert e_pair(x, y, FlowField(np.zeros((2, 2, 2)), occ)) == 0.25


def test_backward_warp_integer_shift():
    frame = np.arange(16, dtype=float).reshape(1, 4, 4)
    flow = np.zeros((4, 4, 2))
    flow[..., 0] = 1.0            # sample one pixel to the right
    out = backward_warp(frame, flow)
    np.testing.assert_array_equal(out[0, :, :3], frame[0, :, 1:])
    half = np.zeros((4, 4, 2))
    half[..., 1] = 0.5
    np.testing.assert_allclose(backward_warp(frame, half)[0, 0], (frame[0, 0] + frame[0, 1]) / 2)


def test_e_warp_static_and_two_frames():
    frame = np.random.default_rng(2).random((3, 8, 8))
    assert e_warp(np.repeat(frame[None], 5, axis=0)) == 0.0
    v = np.random.default_rng(3).random((2, 3, 8, 8))
    assert e_warp(v) == pytest.approx(2 * e_pair(v[1], v[0]))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31))
def test_e_warp_brute_force(t, seed):
    v = np.random.default_rng(seed).random((t, 3, 6, 7))
    val = e_warp(v)
    assert val >= 0
    assert abs(val - brute_e_warp(v)) <= 1e-6


def test_e_warp_flow_inputs(tmp_path):
    v = np.random.default_rng(4).random((3, 3, 6, 6))
    flows = [FlowField.zero(6, 6) for _ in range(4)]
    assert e_warp(v, flows) == pytest.approx(e_warp(v))
    with pytest.raises(ValueError):
        e_warp(v, flows[:3])
    with pytest.raises(ValueError):
        e_warp(v[:1])
    rng = np.random.default_rng(5)
    flows = [FlowField(rng.normal(size=(6, 6, 2)), (rng.random((6, 6)) > 0.3).astype(float))
             for _ in range(4)]
    save_flows(tmp_path / "f.slaf", flows)
    back = load_flows(tmp_path / "f.slaf")
    assert (tmp_path / "f.slaf").read_bytes()[:4] == b"SLAF"
    for a, b in zip(flows, back):
        np.testing.assert_allclose(a.flow, b.flow, atol=1e-6)
        np.testing.assert_array_equal(a.occlusion, b.occlusion)


def test_load_flows_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_flows(p)


# -- LGS --------------------------------------------------------------------------------

def test_lgs_identities():
    v = np.random.default_rng(6).random((2, 3, 16, 16))
    assert np.array_equal(lgs(v, smoothing=0.0), v)
    const = np.full((2, 3, 16, 16), 0.3)
    assert np.array_equal(lgs(const), const)
    assert np.array_equal(lgs(v, threshold=10.0), v)


def test_lgs_checkerboard_block_flattened():
    v = np.full((1, 3, 16, 16), 0.5)
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    v[0, :, :8, :8] = board
    out = lgs(v, block=8, threshold=0.5, smoothing=1.0)
    np.testing.assert_allclose(out[0, :, :8, :8], 0.5)
    # the other blocks are flat and left alone
    np.testing.assert_array_equal(out[0, :, 8:, :], v[0, :, 8:, :])


def test_lgs_ragged_blocks():
    v = np.random.default_rng(7).random((1, 3, 10, 13))
    out = lgs(v, block=4, threshold=0.0, smoothing=1.0)
    corner = v[0, :, 8:, 12:]
    np.testing.assert_allclose(out[0, :, 8:, 12:],
                               np.broadcast_to(corner.mean(axis=(1, 2), keepdims=True), corner.shape))


# -- PatchCleanser -----------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(1, 8), st.integers(1, 4))
def test_cleanser_grid_covers_every_patch(h, w, patch, per_axis):
    patch = min(patch, h, w)
    grid = cleanser_grid(h, w, patch, per_axis)
    assert len(grid) == per_axis ** 2
    for r in range(h - patch + 1):
        for c in range(w - patch + 1):
            assert any(r0 <= r and r + patch <= r1 and c0 <= c and c + patch <= c1
                       for r0, r1, c0, c1 in grid)


def test_apply_gray_rect_and_mask():
    v = np.zeros((2, 3, 8, 8))
    a = apply_gray(v, [(0, 2, 0, 3)])
    assert a[:, :, :2, :3].min() == GRAY and a.sum() == GRAY * 2 * 3 * 6
    m = Mask(1, 1, 2, 2, v.shape)
    b = apply_gray(v, [m])
    assert b.sum() == GRAY * 2 * 3 * 4


def test_cleanser_unanimous_clean_video():
    v = gen_synthetic_video(2, 0)
    o = MotionHueOracle()
    grid = cleanser_grid(64, 64, 12)
    budget = QueryBudget(1000)
    assert patch_cleanser(o, budget, v, grid) == 2
    assert budget.used == len(grid) == o.calls


def test_cleanser_single_full_mask():
    v = np.random.default_rng(8).random((2, 3, 8, 8))
    seen = []

    def fn(x):
        seen.append(x.copy())
        return np.array([0.2, 0.8]) if np.all(x == GRAY) else np.array([0.9, 0.1])
    assert patch_cleanser(FunctionOracle(fn, 2), QueryBudget(5), v, [(0, 8, 0, 8)]) == 1
    assert len(seen) == 1


def test_cleanser_recovers_label_when_patch_masked():
    # the "patch" is a bright square at rows/cols 2..5; the oracle says class 1
    # while any of it is visible and class 0 once it is fully grayed out
    h = w = 24
    v = np.full((2, 3, h, w), 0.3)
    v[:, :, 2:6, 2:6] = 1.0

    def fn(x):
        visible = np.any(x[:, :, 2:6, 2:6] == 1.0)
        return np.array([0.1, 0.9]) if visible else np.array([0.9, 0.1])
    grid = cleanser_grid(h, w, 4, 3)
    o = FunctionOracle(fn, 2)
    b = QueryBudget(200)
    first = [int(np.argmax(fn(apply_gray(v, [m])))) for m in grid]
    assert first.count(0) >= 1 and first.count(1) > first.count(0)
    assert patch_cleanser(o, b, v, grid) == 0
    assert b.used <= cleanser_queries(first, len(grid))


def test_cleanser_budget_propagates():
    from logoattack.victim import BudgetExhausted
    with pytest.raises(BudgetExhausted):
        patch_cleanser(MotionHueOracle(), QueryBudget(3), gen_synthetic_video(0, 0),
                       cleanser_grid(64, 64, 12))


# -- summarize ----------------------------------------------------------------------------

def _res(vid, success, stage, aq=(1, 2, 0), aoa_=0.05, ti=0.1):
    return AttackResult(vid, "targeted", 0, 1, success, stage, *aq, aoa_, ti)


def test_summarize_all_failures():
    rep = summarize([_res("a", False, None), _res("b", False, None)])
    d = rep.to_dict()
    assert rep.fr == 0 and "aq" not in d and "aq2" not in d


def test_summarize_half_stage_two():
    rep = summarize([_res("a", True, 2, (40, 60, 0)), _res("b", False, None)])
    assert rep.fr == 0.5 and rep.fr2 == 0.5 and rep.aq2 == 100 and rep.aq == 100


def spreadsheet(rows):
    n = len(rows)
    ok = [r for r in rows if r["success"]]
    s2 = [r for r in ok if r["stage_of_success"] == 2]
    mean = lambda xs: sum(xs) / len(xs) if xs else None
    return {"n": n, "fr": len(ok) / n, "fr2": len(s2) / n,
            "aq": mean([r["aq1"] + r["aq2"] + r["aq3"] for r in ok]),
            "aq2": mean([r["aq1"] + r["aq2"] for r in s2]),
            "aoa": mean([r["aoa"] for r in ok]), "ti": mean([r["ti"] for r in ok])}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from([2, 3]), st.integers(0, 500),
                          st.integers(0, 500), st.integers(0, 500),
                          st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12),
       st.randoms())
def test_summarize_matches_spreadsheet_and_is_permutation_invariant(rows, rnd):
    results = []
    for i, (ok, stage, a1, a2, a3, ao, ti) in enumerate(rows):
        a3 = a3 if ok and stage == 3 else 0
        results.append(AttackResult(f"v{i:03d}", "targeted", 0, 1, ok, stage if ok else None,
                                    a1, a2, a3, ao, ti))
    rep = summarize(results)
    sheet = spreadsheet([r.to_dict() for r in results])
    for k, v in sheet.items():
        got = getattr(rep, k)
        assert (got is None) == (v is None)
        if v is not None:
            assert got == pytest.approx(v, rel=1e-12, abs=1e-12)
    shuffled = list(results)
    rnd.shuffle(shuffled)
    assert summarize(shuffled) == rep


def test_summarize_empty_rejected():
    with pytest.raises(ValueError):
        summarize([])


def test_attack_result_roundtrip():
    r = _res("x", True, 3, (1, 2, 3))
    assert AttackResult.from_dict(r.to_dict()) == r and r.total_queries == 6
