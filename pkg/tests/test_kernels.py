"""Numba and numpy kernel paths must agree; brute-force oracles for each kernel."""
import os
import subprocess
import sys
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aet import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not available")


def bfs_oracle(floor, sources):
    h, w = floor.shape
    dist = np.full((h, w), K.UNREACHABLE, dtype=np.int64)
    q = deque()
    for r, c in sources:
        if floor[r, c] and dist[r, c] != 0:
            dist[r, c] = 0
            q.append((r, c))
    while q:
        r, c = q.popleft()
        for dr, dc in K.DIRECTIONS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and floor[rr, cc] and dist[rr, cc] == K.UNREACHABLE:
                dist[rr, cc] = dist[r, c] + 1
                q.append((rr, cc))
    return dist


def gae_oracle(r, v, d, boot, gamma, lam):
    n = len(r)
    nxt = np.append(v[1:], boot)
    delta = r + gamma * (1 - d) * nxt - v
    adv = np.zeros(n)
    for t in range(n):
        acc, disc = 0.0, 1.0
        for k in range(t, n):
            acc += disc * delta[k]
            if d[k]:
                break
            disc *= gamma * lam
        adv[t] = acc
    return adv


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_bfs_matches_queue_oracle(h, w, seed):
    rng = np.random.default_rng(seed)
    floor = rng.random((h, w)) > 0.3
    src = rng.integers(0, [h, w], size=(rng.integers(1, 4), 2))
    want = bfs_oracle(floor, src)
    assert np.array_equal(K._bfs_distance_np(floor, src), want)
    assert np.array_equal(K.bfs_distance(floor, src), want)


def test_bfs_source_on_wall_is_ignored():
    floor = np.ones((3, 3), dtype=bool)
    floor[0, 0] = False
    d = K.bfs_distance(floor, [(0, 0)])
    assert (d == K.UNREACHABLE).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_gae_matches_sum_oracle(n, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n), rng.normal(size=n)
    d = (rng.random(n) < 0.2).astype(float)
    boot = float(rng.normal())
    want = gae_oracle(r, v, d, boot, 0.97, 0.9)
    np.testing.assert_allclose(K.gae(r, v, d, boot, 0.97, 0.9), want, atol=1e-10)
    np.testing.assert_allclose(K._gae_np(r, v, d, boot, 0.97, 0.9), want, atol=1e-10)


def test_im2col_matches_explicit_patches():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 5, 3)).astype(np.float32)
    cols = K.im2col3(x)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for b in range(2):
        for r in range(4):
            for c in range(5):
                patch = xp[b, r:r + 3, c:c + 3, :].reshape(-1)
                assert np.array_equal(cols[b, r, c], patch)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 6, 4))
    g = rng.normal(size=(3, 5, 6, 36))
    lhs = np.sum(K.im2col3(x) * g)
    rhs = np.sum(x * K.col2im3(g, 4))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_numba
def test_numba_and_numpy_paths_agree():
    rng = np.random.default_rng(2)
    x = rng.random((4, 6, 7, 5), dtype=np.float32)
    assert np.array_equal(K._im2col3_np(x), K._im2col3_nb(x))
    d = rng.random((4, 6, 7, 45), dtype=np.float32)
    np.testing.assert_allclose(K._col2im3_np(d, 5), K._col2im3_nb(d, 5), rtol=1e-5, atol=1e-5)
    floor = rng.random((9, 11)) > 0.25
    src = np.array([[0, 0], [4, 5]])
    assert np.array_equal(K._bfs_distance_np(floor, src), K._bfs_distance_nb(floor, src))
    r, v = rng.normal(size=50), rng.normal(size=50)
    dn = (rng.random(50) < 0.1).astype(float)
    np.testing.assert_allclose(K._gae_np(r, v, dn, 0.3, 0.99, 0.95),
                               K._gae_nb(r, v, dn, 0.3, 0.99, 0.95), atol=1e-12)


def test_env_switch_selects_numpy_path():
    code = "from aet import _kernels as K; print(K.backend())"
    env = {**os.environ, "AET_NO_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
