"""Scripted policies: random, idle and heuristic bots for both sides.

Bots read the full :class:`ArenaState` except where noted (the heuristic cat
only chases mice inside its vision radius). They are the frozen opponents for
smoke training and the anchor pair for TrueSkill tables.
"""
from __future__ import annotations

import numpy as np

from . import arena as A
from ._kernels import DIRECTIONS, UNREACHABLE, bfs_distance


def side_agents(side: str) -> tuple[int, ...]:
    return (A.CAT,) if side == "cat" else A.MICE


def legal_commands(state: A.ArenaState, agent: int) -> list[tuple[int, int]]:
    out = [(int(A.Action.IDLE), 0)]
    for a in A.Action:
        if a == A.Action.IDLE:
            continue
        if a == A.Action.MOVE:
            out += [(int(a), d) for d in range(A.N_DIRECTIONS) if A.is_legal(state, agent, (a, d))]
        elif A.is_legal(state, agent, (a, 0)):
            out.append((int(a), 0))
    return out


def _toward(state: A.ArenaState, agent: int, targets) -> tuple[int, int] | None:
    """MOVE command stepping along a shortest path to the nearest target."""
    targets = [tuple(int(v) for v in t) for t in targets]
    if not targets:
        return None
    dist = bfs_distance(~state.walls, np.array(targets))
    r, c = (int(v) for v in state.pos[agent])
    here = dist[r, c]
    best, best_d = None, here
    for d, (dr, dc) in enumerate(DIRECTIONS):
        rr, cc = r + int(dr), c + int(dc)
        if not (0 <= rr < state.config.height and 0 <= cc < state.config.width):
            continue
        if state.walls[rr, cc] or A._occupied(state, rr, cc, agent):
            continue
        if dist[rr, cc] < best_d:
            best, best_d = d, dist[rr, cc]
    if best is None or here >= UNREACHABLE:
        return None
    return (int(A.Action.MOVE), best)


def _away(state: A.ArenaState, agent: int, threat) -> tuple[int, int] | None:
    r, c = (int(v) for v in state.pos[agent])
    best, best_d = None, A.chebyshev((r, c), threat)
    for d, (dr, dc) in enumerate(DIRECTIONS):
        rr, cc = r + int(dr), c + int(dc)
        if not (0 <= rr < state.config.height and 0 <= cc < state.config.width):
            continue
        if state.walls[rr, cc] or A._occupied(state, rr, cc, agent):
            continue
        dd = A.chebyshev((rr, cc), threat)
        if dd > best_d:
            best, best_d = d, dd
    return None if best is None else (int(A.Action.MOVE), best)


def _dir_to(src, dst) -> int:
    dr = int(np.sign(int(dst[0]) - int(src[0])))
    dc = int(np.sign(int(dst[1]) - int(src[1])))
    for d, (a, b) in enumerate(DIRECTIONS):
        if a == dr and b == dc:
            return d
    return 0


class ScriptedPolicy:
    """Base class; subclasses implement :meth:`agent_command`."""

    name = "scripted"

    def __init__(self, side: str, noise: float = 0.0):
        self.side = side
        self.noise = noise

    def agent_command(self, state, agent, rng):
        raise NotImplementedError

    def commands(self, state: A.ArenaState, rng: np.random.Generator) -> dict[int, tuple[int, int]]:
        out = {}
        for a in side_agents(self.side):
            if not state.alive(a):
                continue
            if self.noise > 0 and rng.random() < self.noise:
                legal = legal_commands(state, a)
                out[a] = legal[int(rng.integers(len(legal)))]
            else:
                out[a] = self.agent_command(state, a, rng)
        return out

    def describe(self) -> dict:
        return {"kind": "scripted", "name": self.name, "side": self.side, "noise": self.noise}


class IdlePolicy(ScriptedPolicy):
    name = "idle"

    def agent_command(self, state, agent, rng):
        return (int(A.Action.IDLE), 0)


class RandomPolicy(ScriptedPolicy):
    """Uniform over legal (action, direction) commands."""

    name = "random"

    def agent_command(self, state, agent, rng):
        legal = legal_commands(state, agent)
        return legal[int(rng.integers(len(legal)))]


class HeuristicCat(ScriptedPolicy):
    name = "heuristic"

    def agent_command(self, state, agent, rng):
        s = state
        me = s.pos[A.CAT]
        if s.timer[A.CAT] > 0:
            return (int(A.Action.IDLE), 0)
        if s.holding >= 0:
            if A.is_legal(s, A.CAT, (A.Action.INTERACT, 0)) and A._free_rockets_adjacent(s, me):
                return (int(A.Action.INTERACT), 0)
            free = [s.rocket_pos[i] for i in range(len(s.rocket_pos)) if s.rocket_occupant[i] < 0]
            return _toward(s, A.CAT, free) or (int(A.Action.IDLE), 0)
        targets = A._mouse_targets_of_cat(s)
        if targets:
            return (int(A.Action.ATTACK), _dir_to(me, s.pos[targets[0]]))
        if A._at_hole_adjacent(s, me):
            return (int(A.Action.INTERACT), 0)
        R = s.config.vision_radius
        seen = [s.pos[m] for m in A.MICE
                if s.status[m] in A.ON_GRID and A.chebyshev(s.pos[m], me) <= R]
        if seen:
            return _toward(s, A.CAT, seen) or (int(A.Action.IDLE), 0)
        pushing = [s.cheese_pos[c] for c in range(len(s.cheese_pos))
                   if s.cheese_state[c] == A.AT_HOLE]
        if s.crack_pos is not None:
            guard = [s.crack_pos]
        elif pushing:
            guard = pushing
        else:
            guard = [s.cheese_pos[c] for c in range(len(s.cheese_pos))
                     if s.cheese_state[c] in (A.LOOSE, A.CARRIED)]
        if guard and A.chebyshev(min(guard, key=lambda g: A.chebyshev(g, me)), me) > 2:
            return _toward(s, A.CAT, guard) or (int(A.Action.IDLE), 0)
        legal = [c for c in legal_commands(s, A.CAT) if c[0] == A.Action.MOVE]
        return legal[int(rng.integers(len(legal)))] if legal else (int(A.Action.IDLE), 0)


class HeuristicMouse(ScriptedPolicy):
    name = "heuristic"

    def agent_command(self, state, agent, rng):
        s = state
        me = s.pos[agent]
        if s.status[agent] not in A.ON_GRID:
            return (int(A.Action.IDLE), 0)
        legal = lambda act: A.is_legal(s, agent, (act, 0))  # noqa: E731
        if legal(A.Action.RESCUE):
            return (int(A.Action.RESCUE), 0)
        if legal(A.Action.INTERACT):
            return (int(A.Action.INTERACT), 0)
        if s.crack_pos is not None and s.crack_hp > 0 and A.adjacent(s.crack_pos, me):
            return (int(A.Action.ATTACK), _dir_to(me, s.crack_pos))
        cat_near = A.chebyshev(s.pos[A.CAT], me) <= 1 and s.timer[A.CAT] == 0
        if s.status[agent] == A.CARRYING:
            busy = {int(s.cheese_hole[c]) for c in range(len(s.cheese_pos))
                    if s.cheese_state[c] in (A.AT_HOLE, A.IN_HOLE)}
            holes = [s.hole_pos[i] for i in range(len(s.hole_pos))
                     if not s.hole_filled[i] and i not in busy]
            if any(A.adjacent(h, me) for h in holes):
                return (int(A.Action.DROP), 0)
            if cat_near:
                return _away(s, agent, s.pos[A.CAT]) or _toward(s, agent, holes) or (0, 0)
            return _toward(s, agent, holes) or (int(A.Action.IDLE), 0)
        if cat_near and s.holding < 0:
            flee = _away(s, agent, s.pos[A.CAT])
            if flee is not None:
                return flee
        if legal(A.Action.PUSH):
            return (int(A.Action.PUSH), 0)
        if legal(A.Action.PICKUP):
            return (int(A.Action.PICKUP), 0)
        tied = [s.pos[m] for m in A.MICE if m != agent and s.status[m] == A.TIED]
        if tied:
            return _toward(s, agent, tied) or (int(A.Action.IDLE), 0)
        if s.crack_pos is not None:
            return _toward(s, agent, [s.crack_pos]) or (int(A.Action.IDLE), 0)
        goals = [s.cheese_pos[c] for c in range(len(s.cheese_pos))
                 if s.cheese_state[c] in (A.LOOSE, A.AT_HOLE)]
        return _toward(s, agent, goals) or (int(A.Action.IDLE), 0)


_REGISTRY = {
    "idle": IdlePolicy,
    "random": RandomPolicy,
    ("heuristic", "cat"): HeuristicCat,
    ("heuristic", "mouse"): HeuristicMouse,
}


def make_bot(name: str, side: str, noise: float = 0.0) -> ScriptedPolicy:
    cls = _REGISTRY.get(name) or _REGISTRY.get((name, side))
    if cls is None:
        raise KeyError(f"unknown bot {name!r} for side {side!r}")
    return cls(side, noise)


def play_scripted(config: A.ArenaConfig, cat: ScriptedPolicy, mice: ScriptedPolicy,
                  seed: int, intervention: A.ERIntervention = A.NO_INTERVENTION):
    """Play one game between two scripted policies; returns the terminal state."""
    state = A.apply_er_intervention(A.generate(config.with_seed(seed)), intervention)
    rng = np.random.default_rng([seed, 1])
    while not state.terminal:
        cmds = {**cat.commands(state, rng), **mice.commands(state, rng)}
        state, _, _ = A.step(state, cmds)
    return state
