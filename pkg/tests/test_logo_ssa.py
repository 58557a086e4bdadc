import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logoattack.logo_ssa import logo_ssa
from logoattack.style_select import TARGETED, UNTARGETED
from logoattack.tensor_media import Mask, make_mask
from logoattack.victim import FunctionOracle, MotionHueOracle, QueryBudget


def brightness_oracle(mask, threshold=0.8):
    """p(class 1) grows with the mean brightness inside ``mask``; top-1 past ``threshold``."""
    sel = mask.data.astype(bool)

    def fn(v):
        m = float(v[sel].mean())
        p1 = 0.5 * m / threshold if m < threshold else 0.5 + 0.5 * (m - threshold) / (1 - threshold + 1e-9) + 1e-3
        p1 = min(p1, 1.0)
        return np.array([1.0 - p1, p1])
    return FunctionOracle(fn, num_classes=2)


def setup(t=2, h=24, w=24, u=4, v=6, k=0.5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.6, size=(t, 3, h, w))
    mask = make_mask(u, v, k, 16, 16, h, w, t, 3)
    return x, mask


def test_eps_zero_returns_input():
    x, mask = setup()
    o = brightness_oracle(mask)
    res = logo_ssa(o, QueryBudget(100), x, mask, 0, 1, TARGETED, eta_p=0.2, eps=0.0,
                   rng=np.random.default_rng(0))
    assert np.array_equal(res.x_adv, x) and res.queries == 1 and not res.success


def test_eps_zero_keeps_existing_success():
    x, mask = setup()
    o = brightness_oracle(mask, threshold=0.1)
    res = logo_ssa(o, QueryBudget(100), x, mask, 0, 1, TARGETED, eps=0.0,
                   rng=np.random.default_rng(0))
    assert res.success and res.queries == 1


def test_brightness_oracle_success_and_scaling():
    # squares covering a smaller share of the mask need proportionally more rounds
    costs = []
    for alpha0 in (0.2, 0.02):
        x, mask = setup(k=0.75, h=32, w=32)
        o = brightness_oracle(mask, threshold=0.55)
        res = logo_ssa(o, QueryBudget(50_000), x, mask, 0, 1, TARGETED,
                       rng=np.random.default_rng(1), alpha0=alpha0, max_rounds=20_000)
        assert res.success
        assert res.queries == o.calls
        costs.append(res.queries)
    assert costs[1] > 2 * costs[0]


def test_monotone_scores_and_trace(tmp_path):
    x, mask = setup()
    o = MotionHueOracle()
    x = np.repeat(x[:1], 8, axis=0)
    path = tmp_path / "trace.csv"
    res = logo_ssa(o, QueryBudget(600), x, mask, 0, 5, TARGETED, rng=np.random.default_rng(2),
                   max_rounds=250, trace_path=path)
    scores = [row[2] for row in res.trace]
    assert all(b >= a for a, b in zip(scores, scores[1:]))
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["round", "accepted", "score"] and len(rows) == len(res.trace) + 1


def test_untargeted_direction_monotone():
    x, mask = setup()
    x = np.repeat(x[:1], 8, axis=0)
    res = logo_ssa(MotionHueOracle(), QueryBudget(400), x, mask, 3, None, UNTARGETED,
                   rng=np.random.default_rng(3), max_rounds=150)
    scores = [row[2] for row in res.trace]
    assert all(b <= a for a, b in zip(scores, scores[1:]))


def test_budget_exhaustion_returns_partial():
    x, mask = setup()
    o = brightness_oracle(mask, threshold=0.99)
    b = QueryBudget(25)
    res = logo_ssa(o, b, x, mask, 0, 1, TARGETED, rng=np.random.default_rng(4))
    assert not res.success and res.queries == 25 == b.used


def test_rejects_bad_arguments():
    x, mask = setup()
    o = brightness_oracle(mask)
    with pytest.raises(ValueError):
        logo_ssa(o, QueryBudget(10), x, mask, 0, 1, eta_p=0.6, eps=0.5, rng=np.random.default_rng(0))
    empty = Mask(0, 0, 0, 0, (2, 3, 24, 24))
    with pytest.raises(ValueError):
        logo_ssa(o, QueryBudget(10), x, empty, 0, 1, rng=np.random.default_rng(0))


def _confinement_scan(seed, per_frame, random_direction, eta_p, eps, rounds):
    rng = np.random.default_rng(seed)
    t, h, w = 2, 20, 20
    x = rng.uniform(0, 1, size=(t, 3, h, w))
    k = float(rng.choice([0.25, 0.5, 0.75]))
    side = int(round(k * 16))
    u, v = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
    mask = make_mask(u, v, k, 16, 16, h, w, t, 3)
    outside = ~mask.data.astype(bool)
    seen = []

    def fn(video):
        assert np.array_equal(video[outside], x[outside])
        assert np.max(np.abs(video - x)) <= eps
        seen.append(1)
        s = float(np.sin(video.sum() * 13.1)) * 0.5 + 0.5
        return np.array([1 - s, s])
    o = FunctionOracle(fn, num_classes=2)
    res = logo_ssa(o, QueryBudget(10 * rounds), x, mask, 0, 1, TARGETED, eta_p=eta_p, eps=eps,
                   rng=rng, max_rounds=rounds, per_frame=per_frame,
                   random_direction=random_direction)
    assert np.array_equal(res.x_adv[outside], x[outside])
    assert np.max(np.abs(res.x_adv - x)) <= eps
    assert len(seen) == res.queries


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.booleans(), st.booleans(),
       st.sampled_from([(0.2, 0.5), (0.1, 0.1), (0.3, 0.4)]))
def test_mask_and_ball_confinement(seed, per_frame, random_direction, steps):
    _confinement_scan(seed, per_frame, random_direction, *steps, rounds=60)


def test_frame_constant_by_default():
    x, mask = setup(t=4)
    x = np.repeat(x[:1], 4, axis=0)
    res = logo_ssa(brightness_oracle(mask, 0.99), QueryBudget(200), x, mask, 0, 1,
                   rng=np.random.default_rng(5), max_rounds=80)
    d = res.x_adv - x
    for i in range(1, 4):
        assert np.array_equal(d[i], d[0])
