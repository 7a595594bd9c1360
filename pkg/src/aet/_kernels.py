"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``AET_NO_NUMBA=1`` in the environment before import to force the numpy
path (useful for debugging and for the kernel benchmark). The integer and
gather kernels agree exactly between paths; ``col2im3`` sums in a different
order and agrees to float rounding.
"""
import os

import numpy as np

UNREACHABLE = 1 << 20

_DISABLED = os.environ.get("AET_NO_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by AET_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

# 8-connected neighbourhood, compass order N, NE, E, SE, S, SW, W, NW as (drow, dcol)
DIRECTIONS = np.array(
    [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)],
    dtype=np.int64,
)


# ---------------------------------------------------------------- numpy path


def _bfs_distance_np(floor, sources):
    h, w = floor.shape
    dist = np.full((h, w), UNREACHABLE, dtype=np.int64)
    frontier = np.zeros((h, w), dtype=bool)
    for r, c in sources:
        if floor[r, c]:
            frontier[r, c] = True
    d = 0
    seen = frontier.copy()
    while frontier.any():
        dist[frontier] = d
        grown = np.zeros((h + 2, w + 2), dtype=bool)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                grown[1 + dr:h + 1 + dr, 1 + dc:w + 1 + dc] |= frontier
        frontier = grown[1:h + 1, 1:w + 1] & floor & ~seen
        seen |= frontier
        d += 1
    return dist


def _gae_np(rewards, values, dones, bootstrap, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n, dtype=np.float64)
    last = 0.0
    next_value = bootstrap
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterminal * next_value - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv


def _im2col3_np(x):
    # x: (B, H, W, C) -> (B, H, W, 9*C), zero padding 1, feature = (i*3 + j)*C + ch
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i * 3 + j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b, h, w, 9 * c)


def _col2im3_np(dcols, c):
    b, h, w, _ = dcols.shape
    d = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i * 3 + j, :]
    return dxp[:, 1:h + 1, 1:w + 1, :]


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _bfs_distance_nb(floor, sources):
        h, w = floor.shape
        dist = np.full((h, w), UNREACHABLE, dtype=np.int64)
        qr = np.empty(h * w, dtype=np.int64)
        qc = np.empty(h * w, dtype=np.int64)
        head = 0
        tail = 0
        for s in range(sources.shape[0]):
            r = sources[s, 0]
            c = sources[s, 1]
            if floor[r, c] and dist[r, c] == UNREACHABLE:
                dist[r, c] = 0
                qr[tail] = r
                qc[tail] = c
                tail += 1
        while head < tail:
            r = qr[head]
            c = qc[head]
            head += 1
            for dr in range(-1, 2):
                for dc in range(-1, 2):
                    rr = r + dr
                    cc = c + dc
                    if rr < 0 or rr >= h or cc < 0 or cc >= w:
                        continue
                    if floor[rr, cc] and dist[rr, cc] == UNREACHABLE:
                        dist[rr, cc] = dist[r, c] + 1
                        qr[tail] = rr
                        qc[tail] = cc
                        tail += 1
        return dist

    @njit(cache=True)
    def _gae_nb(rewards, values, dones, bootstrap, gamma, lam):
        n = rewards.shape[0]
        adv = np.zeros(n, dtype=np.float64)
        last = 0.0
        next_value = bootstrap
        for t in range(n - 1, -1, -1):
            nonterminal = 1.0 - dones[t]
            delta = rewards[t] + gamma * nonterminal * next_value - values[t]
            last = delta + gamma * lam * nonterminal * last
            adv[t] = last
            next_value = values[t]
        return adv

    @njit(cache=True)
    def _im2col3_nb(x):
        b, h, w, c = x.shape
        cols = np.zeros((b, h, w, 9 * c), dtype=x.dtype)
        for n in range(b):
            for r in range(h):
                for q in range(w):
                    for i in range(3):
                        rr = r + i - 1
                        if rr < 0 or rr >= h:
                            continue
                        for j in range(3):
                            cc = q + j - 1
                            if cc < 0 or cc >= w:
                                continue
                            base = (i * 3 + j) * c
                            for ch in range(c):
                                cols[n, r, q, base + ch] = x[n, rr, cc, ch]
        return cols

    @njit(cache=True)
    def _col2im3_nb(dcols, c):
        b, h, w, _ = dcols.shape
        dx = np.zeros((b, h, w, c), dtype=dcols.dtype)
        for n in range(b):
            for r in range(h):
                for q in range(w):
                    for i in range(3):
                        rr = r + i - 1
                        if rr < 0 or rr >= h:
                            continue
                        for j in range(3):
                            cc = q + j - 1
                            if cc < 0 or cc >= w:
                                continue
                            base = (i * 3 + j) * c
                            for ch in range(c):
                                dx[n, rr, cc, ch] += dcols[n, r, q, base + ch]
        return dx


# ---------------------------------------------------------------- dispatch


def bfs_distance(floor, sources):
    """8-connected shortest-path distance from the nearest source to every cell.

    Walls and cells not reachable from any source hold ``UNREACHABLE``.
    """
    floor = np.ascontiguousarray(floor, dtype=np.bool_)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    if HAVE_NUMBA:
        return _bfs_distance_nb(floor, sources)
    return _bfs_distance_np(floor, sources)


def gae(rewards, values, dones, bootstrap, gamma, lam):
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    dones = np.ascontiguousarray(dones, dtype=np.float64)
    if HAVE_NUMBA:
        return _gae_nb(rewards, values, dones, float(bootstrap), float(gamma), float(lam))
    return _gae_np(rewards, values, dones, float(bootstrap), float(gamma), float(lam))


def im2col3(x):
    """Unfold 3x3 same-padded patches of a channels-last batch: (B, H, W, C) -> (B, H, W, 9*C)."""
    x = np.ascontiguousarray(x)
    if HAVE_NUMBA:
        return _im2col3_nb(x)
    return _im2col3_np(x)


def col2im3(dcols, channels):
    """Adjoint of :func:`im2col3`: fold patch gradients back onto the input."""
    dcols = np.ascontiguousarray(dcols)
    if HAVE_NUMBA:
        return _col2im3_nb(dcols, channels)
    return _col2im3_np(dcols, channels)


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
