"""Adaptive allocation, environment randomization, replay buffer and the loop."""
import json
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aet import arena as A
from aet import orchestrator as OR
from aet.config import ADAConfig, ERConfig, preset
from aet.league import League
from aet.rollout import Segment


# ------------------------------------------------------------------ ADA

ADA_CASES = [
    # r_old, w_cat, w_mouse, expected
    (0.5, 0.7, 0.3, 0.6),  # cat ahead: quarter step
    (0.6, 0.3, 0.7, 0.5),  # mouse ahead: full step, clamped at beta
    (0.7, 0.45, 0.55, 0.6),
    (0.75, 0.9, 0.1, 0.8),  # clamped at alpha
    (0.8, 0.5, 0.5, 0.8),
    (0.5, 0.0, 1.0, 0.5),
]


@pytest.mark.parametrize("r,wc,wm,want", ADA_CASES)
def test_ada_hand_cases(r, wc, wm, want):
    assert OR.ada_ratio(r, wc, wm, alpha=0.8, beta=0.5) == pytest.approx(want, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.5, 0.8), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_ada_ratio_stays_clamped(r0, wcs):
    state = OR.AllocationState(r0, 0.8, 0.5)
    for wc in wcs:
        r = OR.ada_update(state, wc, 1 - wc)
        assert 0.5 <= r <= 0.8


def test_winrates_default_and_window():
    st_ = OR.AllocationState.from_config(ADAConfig(window=4))
    assert st_.winrates() == (0.5, 0.5)
    for won in (True, True, True, False, False):
        st_.window.append(won)
    assert st_.winrates() == (0.5, 0.5)  # only the last four count
    assert OR.AllocationState.from_config(ADAConfig(enabled=False, fixed_ratio=0.6)).ratio == 0.6


@pytest.mark.parametrize("n,r,want", [(8, 0.5, (4, 4)), (8, 0.8, (6, 2)), (10, 0.65, (7, 3)),
                                      (2, 0.8, (1, 1)), (3, 0.5, (2, 1)), (100, 0.8, (80, 20))])
def test_allocate_workers(n, r, want):
    assert OR.allocate_workers(n, r) == want


def test_allocate_workers_needs_two():
    with pytest.raises(ValueError):
        OR.allocate_workers(1, 0.5)


# ------------------------------------------------------------------ ER


def active_schedule(**kw):
    er = OR.ERSchedule(ERConfig(**kw))
    er.update(0.9, 0.1)
    er.update(0.9, 0.1)
    assert er.active
    return er


def test_er_hysteresis():
    er = OR.ERSchedule(ERConfig())
    assert not er.update(0.9, 0.1)  # one reading is not enough
    assert not er.update(0.5, 0.5)  # streak broken
    assert not er.update(0.8, 0.2)
    assert er.update(0.8, 0.2)
    assert er.update(0.6, 0.4)  # 0.2 gap keeps it on
    assert not er.update(0.54, 0.46)
    assert not OR.ERSchedule(ERConfig(enabled=False)).update(1.0, 0.0)


def test_er_draw_frequencies():
    er = active_schedule()
    rng = np.random.default_rng(0)
    n = 100_000
    kinds = Counter(er.draw(rng, "cat").kind for _ in range(n))
    for kind, p in zip(OR.ER_KINDS, (0.45, 0.35, 0.15, 0.05)):
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(kinds[kind] - n * p) <= 3 * sigma, (kind, kinds[kind])


def test_er_inactive_never_intervenes():
    er = OR.ERSchedule(ERConfig())
    rng = np.random.default_rng(1)
    assert all(er.draw(rng, "cat") == A.NO_INTERVENTION for _ in range(10_000))


def test_er_draw_consumes_fixed_stream():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    OR.ERSchedule(ERConfig()).draw(a, "cat")
    active_schedule().draw(b, "cat")
    assert a.random() == b.random()


@pytest.mark.parametrize("strong", ["cat", "mouse"])
def test_er_targets_relative_to_strong_side(strong):
    er = active_schedule()
    rng = np.random.default_rng(2)
    weak = "mouse" if strong == "cat" else "cat"
    for _ in range(2000):
        iv = er.draw(rng, strong)
        if iv.kind in ("levelup", "timed_buff"):
            assert iv.side == weak
        elif iv.kind == "hard_case":
            assert iv.side == strong and iv.case in A.HARD_CASES[strong]
    assert iv.kind in OR.ER_KINDS


def test_schedule_episode_aims_at_stronger_side():
    er = active_schedule(probs=(0.0, 1.0, 0.0, 0.0))
    alloc = OR.AllocationState()
    alloc.window.extend([True] * 9 + [False])
    lg = League(A.ArenaConfig(width=10, height=8, n_cheese=2))
    spec = OR.schedule_episode("mouse", lg, er, alloc, np.random.default_rng(0))
    assert spec.opponent_kind == "latest"
    assert spec.intervention.kind == "hard_case" and spec.intervention.side == "cat"


# ------------------------------------------------------------------ replay buffer


def seg(side, n=10):
    return Segment(side, 1, None, np.zeros(n, int), np.zeros(n, int), np.zeros(n), np.zeros(n),
                   np.zeros(n), np.zeros(n), np.ones(n, bool), 0.0)


def test_buffer_side_purity():
    buf = OR.ReplayBuffer("mouse", 100)
    with pytest.raises(ValueError):
        buf.add([seg("cat")])


def test_buffer_fifo_eviction():
    buf = OR.ReplayBuffer("cat", 30)
    segs = [seg("cat") for _ in range(5)]
    buf.add(segs)
    assert len(buf) == 30 and list(buf.segments) == segs[2:]
    assert buf.evicted == 20


def test_buffer_reuse_cap_one_refuses_second_use():
    buf = OR.ReplayBuffer("cat", 100, reuse_cap=1.0)
    buf.add([seg("cat"), seg("cat")])
    assert len(buf.sample(20)) == 2
    assert buf.sample(10) is None and len(buf) == 0


def test_buffer_global_budget():
    buf = OR.ReplayBuffer("mouse", 1000, reuse_cap=1.5)
    buf.add([seg("mouse") for _ in range(4)])
    taken = 0
    while (s := buf.sample(10)) is not None:
        taken += sum(x.n_valid for x in s)
    assert taken <= 1.5 * 40 and taken == 60
    # least-used segments go first
    buf = OR.ReplayBuffer("mouse", 1000, reuse_cap=2.0)
    a, b = seg("mouse"), seg("mouse")
    buf.add([a])
    buf.sample(10)
    buf.add([b])
    assert buf.sample(10) == [b]


# ------------------------------------------------------------------ the loop


def tiny(seed=0, **kw):
    return replace(preset("tiny"), seed=seed, **kw)


def test_tiny_run_artifacts(tmp_path):
    s = OR.run_aet(tiny(), tmp_path)
    assert s.iterations == 6 and s.stopped_by == "iterations"
    for name in ("config.json", "metrics.jsonl", "summary.json", "checkpoints/cat.snap",
                 "checkpoints/mouse.snap", "pool/manifest.json"):
        assert (tmp_path / name).exists(), name
    rows = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 12
    assert all(0.5 <= r["r_mouse"] <= 0.8 for r in rows)
    assert s.updates["cat"] > 0 and s.updates["mouse"] > 0


def test_tiny_run_is_byte_reproducible(tmp_path):
    OR.run_aet(tiny(seed=3), tmp_path / "a")
    OR.run_aet(tiny(seed=3), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a/checkpoints/mouse.snap").read_bytes() == \
        (tmp_path / "b/checkpoints/mouse.snap").read_bytes()


def test_frozen_cat_trains_mouse_only(tmp_path):
    cfg = tiny(iterations=3)
    cfg = replace(cfg, train=replace(cfg.train, frozen_cat="random"))
    s = OR.run_aet(cfg, tmp_path)
    assert set(s.updates) == {"mouse"}
    assert not (tmp_path / "checkpoints/cat.snap").exists()


def test_wall_clock_stop(tmp_path):
    s = OR.run_aet(tiny(wall_clock=0.0, iterations=50), tmp_path)
    assert s.stopped_by == "wall_clock" and s.iterations == 0
