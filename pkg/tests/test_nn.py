"""Tensor engine, network, Adam and snapshot format."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aet import arena as A
from aet import obsenc as O
from aet import ppo
from aet.nn import engine as E
from aet.nn import model as M
from aet.nn import snapshot
from aet.nn.adam import AdamState, adam_step

TINY_NET = M.NetConfig(conv_channels=4, res_blocks=1, pool_grid=(2, 2), image_hidden=8,
                       vector_hidden=(8,), entity_hidden=4, memory_hidden=4, mid_hidden=16,
                       head_hidden=8, invisible_hidden=4)
TINY_DIMS = M.InputDims(5, 6, 12, 4, 10)


def random_batch(rng, dims=TINY_DIMS, n=6, invisible=True):
    am = rng.random((n, A.N_ACTIONS)) < 0.6
    am[:, 0] = True
    dm = rng.random((n, A.N_DIRECTIONS)) < 0.7
    dm[:, 2] = True
    ent = rng.random((n, dims.entity_cap, O.ENTITY_FEATURES))
    ent[:, :, 0] = rng.random((n, dims.entity_cap)) < 0.6
    img = rng.random((n, dims.height, dims.width, O.N_CHANNELS))
    vec = rng.normal(size=(n, dims.vector))
    return M.ObsBatch(img, vec, ent, rng.random((n, dims.memory)), am, dm,
                      rng.random(img.shape) if invisible else None,
                      rng.normal(size=vec.shape) if invisible else None)


def tiny_params(seed=1, jitter=0.3):
    p = M.init_params("mouse", TINY_DIMS, TINY_NET, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for t in p.tensors.values():
        t.data += rng.normal(0, jitter, t.data.shape)
    return p


def ppo_batch(rng, obs):
    n = len(obs)
    acts = np.array([np.flatnonzero(obs.action_mask[i])[-1] for i in range(n)])
    dirs = np.array([np.flatnonzero(obs.direction_mask[i])[0] for i in range(n)])
    return ppo.Batch(obs, acts, dirs, rng.normal(-1, 0.3, n), rng.normal(size=n),
                     rng.normal(size=n), rng.normal(size=n))


# ------------------------------------------------------------------ engine basics


def test_sum_of_params_gives_ones():
    w = E.parameter(np.arange(6.0).reshape(2, 3))
    E.sum_(w).backward()
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_zero_times_output_gives_zero_grads():
    p = tiny_params()
    obs = random_batch(np.random.default_rng(0))
    out = M.forward(p, obs)
    E.scale(E.sum_(out["value"]), 0.0).backward()
    assert all(np.all(g == 0) for g in p.grads().values())


def test_backward_without_graph_rejected():
    with pytest.raises(E.GraphError):
        E.parameter(np.ones(3)).backward()


def test_masked_logits_get_zero_gradient():
    logits = E.parameter(np.random.default_rng(0).normal(size=(4, 8)))
    mask = np.random.default_rng(1).random((4, 8)) < 0.5
    mask[:, 0] = True
    lp = E.masked_log_softmax(logits, mask)
    E.sum_(E.mul(lp, E.Tensor(np.random.default_rng(2).normal(size=(4, 8))))).backward()
    assert np.all(logits.grad[~mask] == 0)
    assert np.all(lp.data[~mask] == E.MASK_SENTINEL)


def test_all_masked_row_rejected():
    with pytest.raises(ValueError):
        E.masked_log_softmax(E.Tensor(np.zeros((1, 3))), np.zeros((1, 3), dtype=bool))


# ------------------------------------------------------------------ gradient check


def _fd(p, loss_fn, h):
    out = {}
    for name, t in p.tensors.items():
        num = np.zeros_like(t.data)
        for i in np.ndindex(t.data.shape):
            orig = t.data[i]
            t.data[i] = orig + h
            a = loss_fn()
            t.data[i] = orig - h
            b = loss_fn()
            t.data[i] = orig
            num[i] = (a - b) / (2 * h)
        out[name] = num
    return out


def _rel(a, b):
    return np.linalg.norm(a - b) / max(1e-12, np.linalg.norm(a) + np.linalg.norm(b))


def gradient_check(h=1e-3, max_tries=5):
    """Compare analytic and central-difference gradients of the full PPO loss.

    Piecewise-linear ops (relu, max-pool, clipping) make finite differences
    meaningless when a perturbation crosses a kink. The evaluation point is
    therefore accepted only if the h and h/4 difference quotients agree, a test
    that never looks at the analytic gradient.
    """
    cfg = ppo.PPOConfig(normalize_advantages=False)
    for attempt in range(max_tries):
        rng = np.random.default_rng(3 + attempt)
        p = tiny_params(seed=1 + attempt)
        batch = ppo_batch(rng, random_batch(rng))

        def loss_fn():
            with E.no_grad():
                return float(ppo.total_loss(batch, p, cfg)[0].data)

        fd = _fd(p, loss_fn, h)
        fd_fine = _fd(p, loss_fn, h / 4)
        if max(_rel(fd[k], fd_fine[k]) for k in fd) > 1e-4:
            continue
        p.zero_grad()
        ppo.total_loss(batch, p, cfg)[0].backward()
        grads = p.grads()
        return p, {k: _rel(grads[k], fd[k]) for k in fd}
    raise AssertionError("no smooth evaluation point found")


def test_gradient_check_every_block():
    p, errors = gradient_check()
    assert p.n_params() <= 2000
    # every layer type is represented
    for block in ("conv0.w", "res0a.w", "res0b.w", "ent.w", "mem.w", "act.w", "dir.w",
                  "inv.w", "val.w"):
        assert block in errors
    worst = max(errors.values())
    assert worst < 1e-3, {k: v for k, v in errors.items() if v >= 1e-3}


# ------------------------------------------------------------------ forward properties


def test_zero_weights_uniform_policy_and_zero_value():
    p = M.init_params("mouse", TINY_DIMS, TINY_NET, zero=True, dtype=np.float64)
    obs = random_batch(np.random.default_rng(5))
    la, ld, v = M.infer(p, obs)
    for row, mask in zip(np.exp(la), obs.action_mask):
        np.testing.assert_allclose(row[mask], 1.0 / mask.sum(), atol=1e-12)
        assert np.all(row[~mask] == 0)
    assert np.all(v == 0)


def test_single_legal_action_has_probability_one():
    p = tiny_params()
    obs = random_batch(np.random.default_rng(6), n=3)
    obs.action_mask[:] = False
    obs.action_mask[:, 4] = True
    la, _ = M.forward_policy(p, obs)
    np.testing.assert_allclose(la[:, 4], 0.0, atol=1e-12)


def test_probabilities_sum_to_one():
    rng = np.random.default_rng(7)
    p = M.init_params("cat", TINY_DIMS, TINY_NET, seed=3)
    for _ in range(10):
        obs = random_batch(rng, n=100)
        la, ld = M.forward_policy(p, obs)
        np.testing.assert_allclose(np.exp(la.astype(np.float64)).sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.exp(ld.astype(np.float64)).sum(-1), 1.0, atol=1e-6)


def test_value_deterministic_and_needs_invisible_block():
    p = tiny_params()
    obs = random_batch(np.random.default_rng(8))
    assert np.array_equal(M.forward_value(p, obs), M.forward_value(p, obs))
    policy_only = random_batch(np.random.default_rng(8), invisible=False)
    with pytest.raises(E.ShapeError):
        M.forward_value(p, policy_only)


def test_shape_mismatch_rejected():
    p = tiny_params()
    obs = random_batch(np.random.default_rng(9), dims=M.InputDims(5, 6, 13, 4, 10))
    with pytest.raises(E.ShapeError):
        M.forward_policy(p, obs)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_entity_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = tiny_params()
    obs = random_batch(rng, n=4)
    perm = rng.permutation(TINY_DIMS.entity_cap)
    shuffled = M.ObsBatch(obs.image, obs.vector, obs.entities[:, perm], obs.memory,
                          obs.action_mask, obs.direction_mask, obs.invisible_image,
                          obs.invisible_vector)
    a, b = M.infer(p, obs), M.infer(p, shuffled)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_default_network_under_parameter_budget():
    for side in ("cat", "mouse"):
        p = M.init_params(side, O.encoder_spec(A.ArenaConfig(), side))
        assert p.n_params() <= 100_000
        assert p.dtype == np.float32


# ------------------------------------------------------------------ sampling


def test_joint_log_prob_skips_direction_for_non_directional():
    la = np.log(np.full((1, 8), 1 / 8))
    ld = np.log(np.full((1, 8), 1 / 8))
    lp = M.joint_log_prob(la, ld, np.array([int(A.Action.PICKUP)]), np.array([3]))
    assert lp[0] == pytest.approx(np.log(1 / 8))
    lp = M.joint_log_prob(la, ld, np.array([int(A.Action.MOVE)]), np.array([3]))
    assert lp[0] == pytest.approx(2 * np.log(1 / 8))


def test_argmax_ties_lowest_index():
    la = np.log(np.array([[0.1, 0.4, 0.4, 0.1, 0, 0, 0, 0]]) + 1e-300)
    a, d, _ = M.sample_actions(la, la, "argmax", None)
    assert a[0] == 1 and d[0] == 1


def test_single_legal_action_always_sampled():
    la = np.full((1, 8), E.MASK_SENTINEL)
    la[0, 3] = 0.0
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, _, lp = M.sample_action(la[0], la[0], "stochastic", rng)
        assert a == 3


def test_stochastic_frequencies_within_three_sigma():
    probs = np.array([0.05, 0.3, 0.0, 0.15, 0.25, 0.1, 0.1, 0.05])
    la = np.log(np.where(probs > 0, probs, 1.0))
    la[probs == 0] = E.MASK_SENTINEL
    n = 100_000
    rng = np.random.default_rng(42)
    a, _, _ = M.sample_actions(np.repeat(la[None], n, 0), np.repeat(la[None], n, 0),
                               "stochastic", rng)
    counts = np.bincount(a, minlength=8)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert counts[2] == 0
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma + 1e-9)


# ------------------------------------------------------------------ Adam


def _scalar_params(x):
    p = M.init_params("cat", TINY_DIMS, TINY_NET, zero=True)
    p.tensors = {"x": E.parameter(np.array([x], dtype=np.float64), name="x")}
    return p


def test_adam_matches_hand_trajectory():
    p = _scalar_params(1.0)
    st_ = AdamState(lr=0.1)
    want = [0.900000001, 0.9320946864243543, 0.9448186999677903]
    for g, w in zip([1.0, -2.0, 0.5], want):
        adam_step(p, {"x": np.array([g])}, st_)
        assert p.tensors["x"].data[0] == pytest.approx(w, abs=1e-7)
    assert st_.step == 3


def test_adam_zero_grad_keeps_params():
    p = _scalar_params(2.0)
    st_ = AdamState()
    adam_step(p, {"x": np.zeros(1)}, st_)
    assert p.tensors["x"].data[0] == 2.0 and st_.step == 1


def test_adam_descends_under_constant_gradient():
    p = _scalar_params(0.0)
    st_ = AdamState(lr=0.01)
    for _ in range(20):
        adam_step(p, {"x": np.array([3.0])}, st_)
    assert p.tensors["x"].data[0] < 0


def test_adam_skips_non_finite_gradient():
    p = _scalar_params(1.0)
    st_ = AdamState()
    _, _, info = adam_step(p, {"x": np.array([np.nan])}, st_)
    assert info["skipped"] and st_.step == 0 and st_.skipped == 1
    assert p.tensors["x"].data[0] == 1.0


# ------------------------------------------------------------------ snapshots


def test_snapshot_round_trip_bit_exact(tmp_path):
    p = M.init_params("mouse", O.encoder_spec(A.ArenaConfig(), "mouse"), seed=4,
                      arena_hash=A.ArenaConfig().shape_key())
    p.step = 1000
    blob = snapshot.serialize(p)
    q = snapshot.deserialize(blob)
    assert snapshot.serialize(q) == blob
    assert q.side == "mouse" and q.step == 1000 and q.arena_hash == p.arena_hash
    path = snapshot.save(p, tmp_path / "m.snap")
    r = snapshot.load(path, expected_arena_hash=p.arena_hash)
    spec = O.encoder_spec(A.ArenaConfig(), "mouse")
    rng = np.random.default_rng(0)
    dims = M.InputDims.from_spec(spec)
    obs = random_batch(rng, dims=dims, n=100)
    for x, y in zip(M.infer(p, obs), M.infer(r, obs)):
        assert np.array_equal(x, y)


def test_snapshot_rejects_tampering_and_wrong_arena():
    p = M.init_params("cat", TINY_DIMS, TINY_NET, arena_hash="abcd" * 4)
    blob = bytearray(snapshot.serialize(p))
    blob[0] ^= 0xFF
    with pytest.raises(snapshot.SnapshotError):
        snapshot.deserialize(bytes(blob))
    blob = bytearray(snapshot.serialize(p))
    blob[20] ^= 0x01
    with pytest.raises(snapshot.SnapshotError):
        snapshot.deserialize(bytes(blob))
    with pytest.raises(snapshot.SnapshotError):
        snapshot.deserialize(snapshot.serialize(p), expected_arena_hash="ffff" * 4)
