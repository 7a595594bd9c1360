"""Arena dynamics, rewards, interventions and replay logs."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aet import arena as A
from aet import obsenc as O
from aet.bots import legal_commands, make_bot, play_scripted
from aet.rollout import Job, run_episodes

SMALL = A.ArenaConfig(width=10, height=8, n_cheese=2, max_steps=150, vision_radius=4)


def idle_all(state):
    return {a: (0, 0) for a in state.living_agents()}


def random_trace(config, seed, n_steps=None):
    """Play uniformly random legal commands; returns digests and reward tuples."""
    state = A.generate(config.with_seed(seed))
    rng = np.random.default_rng([seed, 99])
    digests, rewards = [state.digest()], []
    while not state.terminal and (n_steps is None or len(rewards) < n_steps):
        cmds = {}
        for a in state.living_agents():
            legal = legal_commands(state, a)
            cmds[a] = legal[int(rng.integers(len(legal)))]
        state, rw, _ = A.step(state, cmds)
        digests.append(state.digest())
        rewards.append(tuple((e.recipient, e.kind, e.value) for evs in rw for e in evs))
    return digests, rewards


# ------------------------------------------------------------------ generation


def test_config_validation():
    with pytest.raises(A.ArenaConfigError):
        A.ArenaConfig(width=4, height=4).validate()
    with pytest.raises(A.ArenaConfigError):
        A.ArenaConfig(n_cheese=2, n_holes=3).validate()
    with pytest.raises(A.ArenaConfigError):
        A.ArenaConfig(max_steps=0).validate()
    assert A.ArenaConfig().n_holes == 3


def test_same_seed_same_state():
    assert A.generate(A.ArenaConfig(rng_seed=7)) == A.generate(A.ArenaConfig(rng_seed=7))
    assert A.generate(A.ArenaConfig(rng_seed=7)) != A.generate(A.ArenaConfig(rng_seed=8))


def test_entity_counts_and_distinct_cells():
    s = A.generate(A.ArenaConfig(n_cheese=3, rng_seed=3))
    assert len(s.cheese_pos) == 3 and len(s.hole_pos) == 3
    cells = [tuple(p) for p in np.concatenate([s.pos, s.cheese_pos, s.hole_pos, s.rocket_pos])]
    assert len(set(cells)) == len(cells)
    assert not any(s.walls[c] for c in cells)


def test_connectivity_sweep():
    assert all(A.connectivity_ok(A.generate(A.ArenaConfig(rng_seed=s))) for s in range(100))


def test_placement_infeasible_raises():
    cfg = A.ArenaConfig(width=6, height=6, n_cheese=1, wall_density=0.45, placement_retries=2)
    with pytest.raises(A.ArenaConfigError):
        for seed in range(50):
            A.generate(cfg.with_seed(seed))


# ------------------------------------------------------------------ determinism and invariants


def test_hundred_seed_trace_determinism():
    for seed in range(100):
        assert random_trace(SMALL, seed, 40) == random_trace(SMALL, seed, 40)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_invariants_hold_along_random_play(seed):
    state = A.generate(SMALL.with_seed(seed))
    rng = np.random.default_rng(seed)
    n = len(state.cheese_pos)
    while not state.terminal:
        assert A.check_invariants(state) == []
        counts = np.bincount(state.cheese_state, minlength=4)
        assert counts.sum() == n
        cmds = {a: legal_commands(state, a)[int(rng.integers(len(legal_commands(state, a))))]
                for a in state.living_agents()}
        state, _, _ = A.step(state, cmds)
    assert A.check_invariants(state) == []
    assert state.winner in (A.Winner.CAT, A.Winner.MICE)
    with pytest.raises(A.InvalidCommand):
        A.step(state, {})


def test_idle_step_changes_only_counters():
    s = A.generate(SMALL.with_seed(4))
    nxt, _, _ = A.step(s, idle_all(s))
    assert nxt.step_count == s.step_count + 1
    for name in ("pos", "hp", "status", "cheese_pos", "cheese_state", "cheese_progress"):
        assert np.array_equal(getattr(nxt, name), getattr(s, name))


def test_command_for_eliminated_agent_rejected():
    s = A.generate(SMALL.with_seed(1)).copy()
    s.status[2] = A.ELIMINATED
    cmds = idle_all(s)
    cmds[2] = (0, 0)
    with pytest.raises(A.InvalidCommand):
        A.step(s, cmds)


def test_tied_countdown_strictly_decreases():
    s = A.generate(SMALL.with_seed(2)).copy()
    s.status[1] = A.TIED
    s.timer[1] = 5
    s.pos[1] = s.rocket_pos[0]
    s.rocket_occupant[0] = 1
    prev = 5
    for _ in range(4):
        s, _, _ = A.step(s, idle_all(s))
        assert s.timer[1] < prev
        prev = s.timer[1]


# ------------------------------------------------------------------ mask soundness


def tiny_state(seed):
    """A hand-built 5x5 state with random entity placement and statuses.

    The board is below the generator's size floor, so it is assembled directly.
    """
    rng = np.random.default_rng(seed)
    cfg = A.ArenaConfig(width=5, height=5, n_cheese=1, n_rockets=1, vision_radius=2)
    walls = rng.random((5, 5)) < 0.12
    floor = np.argwhere(~walls)
    spots = floor[rng.choice(len(floor), size=min(len(floor), 8), replace=False)]
    agents, cheese, hole, rocket = spots[:5], spots[5], spots[6], spots[7]
    status = rng.choice([A.FREE, A.FREE, A.CARRYING, A.CAUGHT, A.TIED, A.ELIMINATED], size=5)
    status[0] = 0
    cheese_state = int(rng.choice([A.LOOSE, A.AT_HOLE, A.IN_HOLE]))
    carrying = np.full(5, -1)
    holders = [m for m in A.MICE if status[m] == A.CARRYING]
    for m in holders[1:]:
        status[m] = A.FREE
    if holders:
        cheese_state = A.CARRIED
        carrying[holders[0]] = 0
        cheese = agents[holders[0]]
    elif cheese_state in (A.AT_HOLE, A.IN_HOLE):
        cheese = hole
    s = A.ArenaState(
        config=cfg, walls=walls, reachable=~walls, pos=agents.astype(np.int64),
        hp=np.full(5, 50, dtype=np.int64), max_hp=np.full(5, 100, dtype=np.int64),
        damage=np.array([50, 20, 20, 20, 20]), speed=np.ones(5, dtype=np.int64),
        status=status.astype(np.int64),
        timer=np.array([int(rng.random() < 0.2) * 3, 5, 5, 5, 5]),
        carrying=carrying.astype(np.int64), holding=-1,
        cheese_pos=np.array([cheese], dtype=np.int64),
        cheese_state=np.array([cheese_state]), cheese_progress=np.array([30]),
        cheese_hole=np.array([0 if cheese_state in (A.AT_HOLE, A.IN_HOLE) else -1]),
        hole_pos=np.array([hole]), hole_filled=np.array([cheese_state == A.IN_HOLE]),
        rocket_pos=np.array([rocket]), rocket_occupant=np.array([-1]),
        flags=np.zeros((5, A.N_FLAGS), dtype=bool))
    caught = [m for m in A.MICE if status[m] == A.CAUGHT]
    for m in caught[1:]:
        s.status[m] = A.FREE
    if caught:
        s.holding = caught[0]
        s.pos[caught[0]] = s.pos[0]
    if cheese_state == A.IN_HOLE:
        s.crack_pos = tuple(int(v) for v in floor[rng.integers(len(floor))])
        s.crack_hp = int(rng.choice([0, 40]))
        s.phase = A.Phase.ESCAPING
    return s


def test_mask_soundness_bruteforce_5x5():
    checked = 0
    for seed in range(300):
        s = tiny_state(seed)
        for agent in s.living_agents():
            mask = O.legal_mask(s, agent)
            for act, d in itertools.product(range(A.N_ACTIONS), range(A.N_DIRECTIONS)):
                cmds = idle_all(s)
                cmds[agent] = (act, d)
                try:
                    A.step(s, cmds, strict=True)
                    accepted = True
                except A.IllegalAction:
                    accepted = False
                if act == A.Action.MOVE:
                    expected = bool(mask.action[act] and mask.direction[d])
                else:
                    expected = bool(mask.action[act])
                assert accepted == expected, (seed, agent, A.Action(act).name, d)
                checked += 1
    assert checked > 10_000


# ------------------------------------------------------------------ terminal rules and rewards


def test_third_elimination_ends_game_for_cat():
    s = A.generate(SMALL.with_seed(5)).copy()
    s.status[1] = s.status[2] = A.ELIMINATED
    s.status[3] = A.TIED
    s.timer[3] = 1
    s.pos[3] = s.rocket_pos[0]
    s.rocket_occupant[0] = 3
    nxt, rewards, done = A.step(s, idle_all(s))
    assert done and nxt.winner == A.Winner.CAT
    kinds = {e.kind: e.value for e in rewards[A.CAT]}
    assert kinds["eliminate"] == 2.0 and kinds["win"] == 5.0
    assert any(e.kind == "eliminated" and e.value == -2.0 for e in rewards[3])


def test_second_escape_ends_game_for_mice():
    s = A.generate(SMALL.with_seed(6)).copy()
    s.cheese_state[:] = A.IN_HOLE
    s.status[1] = A.ESCAPED
    s.crack_pos = (int(s.pos[2][0]), int(s.pos[2][1]))  # same cell is within reach
    s.crack_hp = 0
    s.phase = A.Phase.ESCAPING
    cmds = idle_all(s)
    cmds[2] = (int(A.Action.INTERACT), 0)
    nxt, rewards, done = A.step(s, cmds)
    assert done and nxt.winner == A.Winner.MICE
    assert any(e.kind == "win" and e.value == 5.0 for e in rewards[2])
    assert any(e.kind == "lose" and e.value == -5.0 for e in rewards[A.CAT])


def test_timeout_is_a_cat_win():
    cfg = A.ArenaConfig(max_steps=3)
    s = A.generate(cfg)
    for _ in range(3):
        s, _, done = A.step(s, idle_all(s))
    assert done and s.winner == A.Winner.CAT


def test_catch_rewards():
    s = A.generate(SMALL.with_seed(8)).copy()
    r, c = int(s.pos[0][0]), int(s.pos[0][1])
    # put mouse 1 on a free neighbouring cell
    for d, (dr, dc) in enumerate(A.DIRECTIONS):
        rr, cc = r + dr, c + dc
        if 0 <= rr < 8 and 0 <= cc < 10 and not s.walls[rr, cc] and \
                not any((p == (rr, cc)).all() for p in s.pos):
            break
    s.pos[1] = (rr, cc)
    s.hp[1] = 10
    cmds = idle_all(s)
    cmds[0] = (int(A.Action.ATTACK), d)
    nxt, rewards, _ = A.step(s, cmds)
    assert nxt.status[1] == A.CAUGHT
    assert any(e.kind == "caught" and e.value == pytest.approx(-0.2) for e in rewards[1])
    assert any(e.kind == "catch" and e.value == pytest.approx(0.1) for e in rewards[0])


def test_cheese_in_pays_every_living_mouse():
    s = A.generate(SMALL.with_seed(9)).copy()
    s.cheese_state[0] = A.AT_HOLE
    s.cheese_pos[0] = s.hole_pos[0]
    s.cheese_hole[0] = 0
    s.cheese_progress[0] = 95
    s.pos[1] = s.hole_pos[0]  # same cell counts as adjacent
    s.status[3] = A.ELIMINATED
    cmds = idle_all(s)
    cmds[1] = (int(A.Action.PUSH), 0)
    nxt, rewards, _ = A.step(s, cmds)
    assert nxt.cheese_state[0] == A.IN_HOLE
    paid = {m for m in A.MICE if any(e.kind == "cheese_in" and e.value == 0.5 for e in rewards[m])}
    assert paid == {1, 2, 4}
    assert any(e.kind == "cheese_in" and e.value == -0.25 for e in rewards[0])


def test_anneal_endpoints():
    assert A.anneal(5, 1, 0) == 5 and A.anneal(5, 1, 1) == 1 and A.anneal(1, 0, 2.0) == 0


def test_reward_accounting_identity():
    """Per-agent episode returns equal the sum of the rewards handed to the trainer."""
    jobs = [Job(seed, make_bot("heuristic", "cat", 0.3), make_bot("heuristic", "mouse", 0.3))
            for seed in range(50)]
    from aet.nn.model import init_params
    from aet.rollout import NetPolicy
    spec = O.encoder_spec(SMALL, "mouse")
    net = NetPolicy(init_params("mouse", spec, seed=1, arena_hash=SMALL.shape_key()))
    jobs += [Job(100 + s, make_bot("heuristic", "cat", 0.3), net, record="mouse")
             for s in range(50)]
    results = run_episodes(SMALL, jobs, traj_len=32)
    assert len(results) == 100
    for r in results:
        assert r.error is None
        for a in range(A.N_AGENTS):
            assert sum(r.by_kind[a].values()) == pytest.approx(r.returns[a], abs=1e-9)
        if r.segments:
            for m in A.MICE:
                got = sum(float(s.rewards[s.valid].sum()) for s in r.segments if s.agent == m)
                assert got == pytest.approx(r.returns[m], abs=1e-9)


def test_first_time_guidance_fires_at_most_once():
    for seed in range(20):
        state = A.generate(SMALL.with_seed(seed))
        rng = np.random.default_rng(seed)
        seen = {}
        cat, mice = make_bot("heuristic", "cat", 0.2), make_bot("heuristic", "mouse", 0.2)
        while not state.terminal:
            state, rw, _ = A.step(state, {**cat.commands(state, rng), **mice.commands(state, rng)})
            for evs in rw:
                for e in evs:
                    if e.kind in ("find_rocket", "damage_mouse", "pickup"):
                        key = (e.recipient, e.kind)
                        seen[key] = seen.get(key, 0) + 1
        assert all(v == 1 for v in seen.values())


# ------------------------------------------------------------------ interventions


def test_noop_intervention_is_identity():
    s = A.generate(SMALL)
    assert A.apply_er_intervention(s, A.NO_INTERVENTION) == s


def test_pre_eliminate_leaves_three_free_mice():
    s = A.generate(SMALL)
    iv = A.ERIntervention("hard_case", "mouse", case="pre_eliminate", agent=2)
    out = A.apply_er_intervention(s, iv)
    assert out.mouse_counts()["free"] == 3


def test_far_spawn_moves_cat_away_from_cheese():
    s = A.generate(SMALL.with_seed(11))
    out = A.apply_er_intervention(s, A.ERIntervention("hard_case", "cat", case="far_spawn"))
    dist = A.bfs_distance(~s.walls, s.cheese_pos)
    assert dist[tuple(out.pos[0])] >= dist[tuple(s.pos[0])]


def test_timed_buff_reverts_at_window_end():
    s = A.generate(A.ArenaConfig(max_steps=100))
    iv = A.ERIntervention("timed_buff", "mouse", stat="damage", tier=1, window=40)
    s = A.apply_er_intervention(s, iv)
    trace = []
    for _ in range(41):
        trace.append(int(s.damage[1]))
        s, _, _ = A.step(s, idle_all(s))
    assert trace[:40] == [30] * 40
    assert int(s.damage[1]) == 20
    assert trace[40] == 20


def test_intervention_after_start_rejected():
    s = A.generate(SMALL)
    s, _, _ = A.step(s, idle_all(s))
    with pytest.raises(A.ArenaError):
        A.apply_er_intervention(s, A.ERIntervention("levelup", "mouse", stat="hp"))


# ------------------------------------------------------------------ replay logs


def _log_game(path, seed):
    run_episodes(SMALL, [Job(seed, make_bot("heuristic", "cat", 0.3),
                             make_bot("heuristic", "mouse", 0.3), log_path=str(path))])


def test_replay_log_verifies(tmp_path):
    for seed in range(10):
        p = tmp_path / f"g{seed}.jsonl"
        _log_game(p, seed)
        ok, bad, states = A.verify_replay(p)
        assert ok and bad is None and states[-1].terminal


def test_replay_detects_flipped_command(tmp_path):
    import json
    p = tmp_path / "g.jsonl"
    _log_game(p, 3)
    lines = p.read_text().splitlines()
    k = 5
    rec = json.loads(lines[k + 1])
    cmd = rec["commands"][1]
    rec["commands"][1] = [0, 0] if cmd != [0, 0] else [1, 4]
    lines[k + 1] = json.dumps(rec, sort_keys=True)
    p.write_text("\n".join(lines) + "\n")
    ok, bad, _ = A.verify_replay(p)
    assert not ok and bad == rec["step"] == k + 1


def test_scripted_play_reaches_terminal():
    s = play_scripted(SMALL, make_bot("heuristic", "cat"), make_bot("random", "mouse"), seed=3)
    assert s.terminal and s.winner == A.Winner.CAT
    assert "#" in A.render(s) or "." in A.render(s)
