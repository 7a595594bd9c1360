"""Observation encoding: vision limits, memory, masks and shape stability."""
import numpy as np
import pytest

from aet import arena as A
from aet import obsenc as O
from aet.bots import make_bot

SMALL = A.ArenaConfig(width=10, height=8, n_cheese=2, max_steps=150, vision_radius=3)


def sampled_states(config, n_games, seed=0):
    cat, mice = make_bot("heuristic", "cat", 0.3), make_bot("heuristic", "mouse", 0.3)
    for g in range(n_games):
        s = A.generate(config.with_seed(seed + g))
        rng = np.random.default_rng(g)
        while not s.terminal:
            yield s
            s, _, _ = A.step(s, {**cat.commands(s, rng), **mice.commands(s, rng)})


def far_cell(state, frm, radius):
    for r, c in np.argwhere(~state.walls):
        if max(abs(r - frm[0]), abs(c - frm[1])) > radius and \
                not any((p == (r, c)).all() for p in state.pos):
            return int(r), int(c)
    raise AssertionError("no far cell")


def test_shapes_constant_and_values_bounded():
    specs = {s: O.encoder_spec(SMALL, s) for s in ("cat", "mouse")}
    mem = O.MemoryBlock()
    for state in sampled_states(SMALL, 3):
        for a in state.living_agents():
            spec = specs[O.side_of(a)]
            ob = O.encode_value_obs(state, a, mem, spec)
            assert ob.image.shape == spec.image_shape
            assert ob.vector.shape == (spec.vector_size,)
            assert ob.entities.shape == (spec.entity_cap, O.ENTITY_FEATURES)
            assert ob.memory.shape == (spec.memory_size,)
            assert ob.image.min() >= 0 and ob.image.max() <= 1
            assert np.abs(ob.vector).max() <= 1 and np.abs(ob.entities).max() <= 1
            assert ob.action_mask[A.Action.IDLE]


def test_vector_layout_sizes_per_side():
    assert O.encoder_spec(A.ArenaConfig(), "cat").vector_size == 126
    assert O.encoder_spec(A.ArenaConfig(), "mouse").vector_size == 138
    assert "teammates" in O.encoder_spec(SMALL, "mouse").layout
    assert "teammates" not in O.encoder_spec(SMALL, "cat").layout


def test_self_location_channel():
    s = A.generate(SMALL)
    ob = O.encode_policy_obs(s, 2, O.MemoryBlock())
    assert ob.image[tuple(s.pos[2]) + (7,)] == 1.0


def test_hidden_cat_zero_channel_and_stale_memory():
    s = A.generate(SMALL.with_seed(3)).copy()
    near = None
    for r, c in np.argwhere(~s.walls):
        if max(abs(r - s.pos[1][0]), abs(c - s.pos[1][1])) == 1 and \
                not any((p == (r, c)).all() for p in s.pos):
            near = (int(r), int(c))
            break
    s.pos[0] = near
    mem = O.update_memory(O.MemoryBlock(), O.observe_facts(s, 1))
    assert mem.find(("agent", 0))[4] == 0
    s.pos[0] = far_cell(s, s.pos[1], SMALL.vision_radius)
    for _ in range(3):
        mem = O.update_memory(mem, O.observe_facts(s, 1))
    ob = O.encode_policy_obs(s, 1, mem)
    assert not ob.image[:, :, 6].any()
    opp = ob.vector[ob.layout["opponent"]]
    assert opp[0] == 0.0 and opp[1] == 1.0 and opp[6] > 0


def test_invisible_block_reveals_hidden_cat():
    s = A.generate(SMALL.with_seed(4)).copy()
    s.pos[0] = far_cell(s, s.pos[1], SMALL.vision_radius)
    ob = O.encode_value_obs(s, 1, O.MemoryBlock())
    assert ob.invisible_image[tuple(s.pos[0]) + (6,)] == 1.0
    assert not ob.image[:, :, 6].any()


def test_full_view_matches_oracle_encoder():
    cfg = A.ArenaConfig(width=10, height=8, n_cheese=2, max_steps=60, vision_radius=20)
    for state in sampled_states(cfg, 2):
        for a in state.living_agents():
            mem = O.MemoryBlock()
            masked = O.encode_policy_obs(state, a, mem)
            oracle = O.encode_policy_obs(state, a, mem, full_knowledge=True)
            assert np.array_equal(masked.image, oracle.image)
            assert np.array_equal(masked.vector, oracle.vector)
            assert np.array_equal(masked.entities, oracle.entities)
            inv_img, inv_vec = O.invisible_block(state, a)
            assert np.array_equal(inv_img, masked.image)
            assert np.array_equal(inv_vec, masked.vector)


def test_value_obs_prefix_equals_policy_obs():
    n = 0
    for state in sampled_states(SMALL, 12, seed=50):
        for a in state.living_agents():
            mem = O.MemoryBlock()
            p = O.encode_policy_obs(state, a, mem)
            v = O.encode_value_obs(state, a, mem)
            pf = p.flatten()
            assert np.array_equal(v.flatten()[:len(pf)], pf)
            n += 1
        if n >= 1000:
            break
    assert n >= 1000


def test_no_leakage_from_out_of_view_cat():
    s = A.generate(SMALL.with_seed(6)).copy()
    cells = [(int(r), int(c)) for r, c in np.argwhere(~s.walls)
             if max(abs(r - s.pos[1][0]), abs(c - s.pos[1][1])) > SMALL.vision_radius
             and not any((p == (r, c)).all() for p in s.pos)]
    assert len(cells) >= 2
    obs = []
    for cell in cells[:2]:
        t = s.copy()
        t.pos[0] = cell
        obs.append(O.encode_policy_obs(t, 1, O.MemoryBlock()).flatten())
    assert np.array_equal(obs[0], obs[1])


def test_dead_agent_rejected():
    s = A.generate(SMALL).copy()
    s.status[3] = A.ELIMINATED
    with pytest.raises(O.EncodeError):
        O.encode_policy_obs(s, 3, O.MemoryBlock())
    with pytest.raises(O.EncodeError):
        O.legal_mask(s, 3)


# ------------------------------------------------------------------ memory


def test_memory_first_sighting_age_zero():
    mem = O.update_memory(O.MemoryBlock(), [(("agent", 0), "opponent", 0.1, 0.2)])
    assert mem.sightings == ((("agent", 0), "opponent", 0.1, 0.2, 0),)


def test_memory_ages_grow_and_cap():
    mem = O.update_memory(O.MemoryBlock(max_age=5), [(("crack", 0), "crack", 0, 0)])
    for k in range(1, 9):
        mem = O.update_memory(mem)
        assert mem.sightings[0][4] == min(k, 5)


def test_memory_evicts_oldest_beyond_capacity():
    mem = O.MemoryBlock(capacity=16)
    for t in range(20):
        mem = O.update_memory(mem, [(("cheese", t), "cheese", t / 20, 0.0)], action=(1, t % 8))
    keys = [rec[0] for rec in mem.sightings]
    assert keys == [("cheese", t) for t in range(4, 20)]
    assert [rec[4] for rec in mem.sightings] == list(range(15, -1, -1))
    assert len(mem.actions) == 16 and mem.actions[-1] == (1, 19 % 8)
    assert mem.vector().shape == (O.MemoryBlock.size(16),)


def test_memory_resighting_replaces_record():
    mem = O.update_memory(O.MemoryBlock(), [(("agent", 0), "opponent", 0.0, 0.0)])
    mem = O.update_memory(mem, [(("agent", 0), "opponent", 0.5, 0.5)])
    assert len(mem.sightings) == 1 and mem.sightings[0][2:] == (0.5, 0.5, 0)


# ------------------------------------------------------------------ masks


def test_isolated_mouse_only_idle_and_move():
    s = A.generate(SMALL.with_seed(2)).copy()
    others = np.concatenate([s.cheese_pos, s.hole_pos, s.rocket_pos, s.pos[[0, 2, 3, 4]]])
    for r, c in np.argwhere(~s.walls):
        if all(max(abs(r - p[0]), abs(c - p[1])) > 1 for p in others):
            s.pos[1] = (r, c)
            break
    else:
        raise AssertionError("no isolated cell")
    mask = O.legal_mask(s, 1)
    assert set(np.flatnonzero(mask.action)) == {A.Action.IDLE, A.Action.MOVE}


def test_cat_adjacent_to_free_mouse_can_attack():
    s = A.generate(SMALL.with_seed(8)).copy()
    r, c = (int(v) for v in s.pos[0])
    for dr, dc in A.DIRECTIONS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < 8 and 0 <= cc < 10 and not s.walls[rr, cc]:
            break
    s.pos[1] = (rr, cc)
    assert O.legal_mask(s, 0).action[A.Action.ATTACK]
