"""Seeded 1-cat-vs-4-mice grid arena.

The mice carry cheese to holes, push it in, and once every hole is filled a
wall crack appears; two escapes win the game for the mice. The cat catches
mice, ties them to rockets and wins on three eliminations or on timeout.

States are plain value objects. :func:`step` never mutates its input, so a
state can be kept as a replay checkpoint or handed to another worker.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from ._kernels import DIRECTIONS, UNREACHABLE, bfs_distance


class ArenaError(Exception):
    """Base class for arena errors."""


class ArenaConfigError(ArenaError):
    pass


class InvalidCommand(ArenaError):
    """Command set does not match the living agents, or targets a finished game."""


class IllegalAction(ArenaError):
    """Raised by ``step(..., strict=True)`` when an action's preconditions fail."""


class Action(IntEnum):
    IDLE = 0
    MOVE = 1
    PICKUP = 2
    DROP = 3
    PUSH = 4
    ATTACK = 5
    RESCUE = 6
    INTERACT = 7


class Direction(IntEnum):
    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7


class Status(IntEnum):
    FREE = 0
    CARRYING = 1
    CAUGHT = 2
    TIED = 3
    ELIMINATED = 4
    ESCAPED = 5


class CheeseState(IntEnum):
    LOOSE = 0
    CARRIED = 1
    AT_HOLE = 2
    IN_HOLE = 3


class Phase(IntEnum):
    PUSHING = 0
    ESCAPING = 1
    TERMINAL = 2


class Winner(IntEnum):
    NONE = 0
    CAT = 1
    MICE = 2


# plain-int aliases; enum attribute lookup is slow on the hot path
FREE, CARRYING, CAUGHT, TIED, ELIMINATED, ESCAPED = (int(v) for v in Status)
LOOSE, CARRIED, AT_HOLE, IN_HOLE = (int(v) for v in CheeseState)
ON_GRID = (FREE, CARRYING)
_STATUS_NAMES = tuple(v.name.lower() for v in Status)

N_ACTIONS = len(Action)
N_DIRECTIONS = len(Direction)
DIRECTIONAL_ACTIONS = frozenset({Action.MOVE, Action.ATTACK})

CAT = 0
MICE = (1, 2, 3, 4)
N_AGENTS = 5

# first-time-only guidance flags, one column per kind
FLAG_FIND_ROCKET = 0
FLAG_DAMAGE_MOUSE = 1
FLAG_PICKUP = 2
N_FLAGS = 3


@dataclass(frozen=True)
class ActionCommand:
    action: Action = Action.IDLE
    direction: Direction = Direction.N

    @classmethod
    def of(cls, cmd) -> "ActionCommand":
        if isinstance(cmd, ActionCommand):
            return cmd
        a, d = cmd
        return cls(Action(int(a)), Direction(int(d)))


IDLE = ActionCommand()


@dataclass(frozen=True)
class ArenaConfig:
    width: int = 16
    height: int = 12
    n_cheese: int = 3
    n_holes: int | None = None
    n_rockets: int = 2
    max_steps: int = 400
    vision_radius: int = 5
    mouse_hp: int = 100
    cat_hp: int = 100
    cat_damage: int = 50
    mouse_damage: int = 20
    crack_damage: int = 10
    rocket_countdown: int = 50
    caught_timeout: int = 20
    stun_steps: int = 8
    push_progress_per_step: int = 10
    crack_hp: int = 100
    wall_density: float = 0.1
    rng_seed: int = 0
    placement_retries: int = 64

    def __post_init__(self):
        if self.n_holes is None:
            object.__setattr__(self, "n_holes", self.n_cheese)

    def validate(self) -> "ArenaConfig":
        if self.n_holes != self.n_cheese:
            raise ArenaConfigError("n_holes must equal n_cheese")
        if self.n_cheese < 1:
            raise ArenaConfigError("n_cheese must be >= 1")
        if self.max_steps <= 0:
            raise ArenaConfigError("max_steps must be > 0")
        if self.width * self.height <= 4 * (self.n_cheese + self.n_holes + 5):
            raise ArenaConfigError(
                f"{self.width}x{self.height} board too small for "
                f"{self.n_cheese} cheeses, {self.n_holes} holes and 5 agents")
        if not 0.0 <= self.wall_density < 0.5:
            raise ArenaConfigError("wall_density must be in [0, 0.5)")
        if min(self.push_progress_per_step, self.crack_damage, self.crack_hp,
               self.mouse_hp, self.cat_hp, self.vision_radius) <= 0:
            raise ArenaConfigError("rates, hp values and vision radius must be positive")
        return self

    def with_seed(self, seed: int) -> "ArenaConfig":
        return dataclasses.replace(self, rng_seed=int(seed))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def shape_key(self) -> str:
        """Hash of everything except the seed; snapshots are only portable across equal keys."""
        d = self.to_dict()
        d.pop("rng_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class RewardEvent:
    recipient: int
    kind: str
    value: float
    is_guidance: bool = False
    is_team: bool = False


@dataclass
class ArenaState:
    config: ArenaConfig
    walls: np.ndarray  # (H, W) bool
    reachable: np.ndarray  # (H, W) bool, the connected floor region entities live in
    pos: np.ndarray  # (5, 2) row, col
    hp: np.ndarray
    max_hp: np.ndarray
    damage: np.ndarray
    speed: np.ndarray
    status: np.ndarray
    timer: np.ndarray  # caught: struggle countdown; tied: rocket countdown; cat: stun
    carrying: np.ndarray  # cheese index per agent, -1 if none
    holding: int  # mouse held by the cat, -1 if none
    cheese_pos: np.ndarray  # (n, 2)
    cheese_state: np.ndarray
    cheese_progress: np.ndarray
    cheese_hole: np.ndarray  # hole index while at-hole / in-hole
    hole_pos: np.ndarray
    hole_filled: np.ndarray
    rocket_pos: np.ndarray
    rocket_occupant: np.ndarray
    crack_pos: tuple[int, int] | None = None
    crack_hp: int = 0
    step_count: int = 0
    phase: Phase = Phase.PUSHING
    winner: Winner = Winner.NONE
    flags: np.ndarray = None  # (5, N_FLAGS) first-time guidance already paid
    buff: tuple | None = None  # (agents, stat, saved values, until_step)
    events: tuple = ()  # what happened during the step that produced this state

    _ARRAYS = ("walls", "reachable", "pos", "hp", "max_hp", "damage", "speed", "status",
               "timer", "carrying", "cheese_pos", "cheese_state", "cheese_progress",
               "cheese_hole", "hole_pos", "hole_filled", "rocket_pos", "rocket_occupant",
               "flags")

    def copy(self) -> "ArenaState":
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for name in self._ARRAYS:
            kw[name] = kw[name].copy()
        return ArenaState(**kw)

    @property
    def terminal(self) -> bool:
        return self.phase == Phase.TERMINAL

    @property
    def crack_open(self) -> bool:
        return self.crack_pos is not None and self.crack_hp <= 0

    def alive(self, agent: int) -> bool:
        return self.status[agent] not in (ELIMINATED, ESCAPED)

    def living_agents(self) -> list[int]:
        return [a for a in range(N_AGENTS) if self.alive(a)]

    def on_grid(self, agent: int) -> bool:
        return agent == CAT or self.status[agent] in ON_GRID

    def mouse_counts(self) -> dict[str, int]:
        counts = np.bincount(self.status[1:], minlength=len(Status))
        return dict(zip(_STATUS_NAMES, (int(c) for c in counts)))

    def _canonical(self) -> bytes:
        h = hashlib.sha256()
        for name in self._ARRAYS:
            a = np.ascontiguousarray(getattr(self, name))
            h.update(name.encode())
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        h.update(repr((self.holding, self.crack_pos, self.crack_hp, self.step_count,
                       int(self.phase), int(self.winner), self.buff, self.events,
                       self.config)).encode())
        return h.digest()

    def digest(self) -> str:
        return self._canonical().hex()

    def __eq__(self, other):
        if not isinstance(other, ArenaState):
            return NotImplemented
        return self._canonical() == other._canonical()

    __hash__ = None


def chebyshev(a, b) -> int:
    return max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1])))


def adjacent(a, b) -> bool:
    return chebyshev(a, b) <= 1


# ------------------------------------------------------------------ generation


def _random_walls(rng, h, w, density):
    walls = np.zeros((h, w), dtype=bool)
    target = int(density * h * w)
    while walls.sum() < target:
        length = int(rng.integers(2, 6))
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        if rng.random() < 0.5:
            walls[r, c:c + length] = True
        else:
            walls[r:r + length, c] = True
    return walls


def generate(config: ArenaConfig) -> ArenaState:
    """Draw a fresh episode start from ``config.rng_seed``."""
    config.validate()
    h, w = config.height, config.width
    n, k = config.n_cheese, config.n_rockets
    n_place = 2 * n + k + N_AGENTS
    rng = np.random.default_rng(config.rng_seed)
    for _ in range(config.placement_retries):
        walls = _random_walls(rng, h, w, config.wall_density)
        floor = ~walls
        cells = np.argwhere(floor)
        if len(cells) < n_place:
            continue
        # keep the largest connected floor region
        remaining = floor.copy()
        best = None
        while remaining.any():
            seed_cell = np.argwhere(remaining)[0]
            comp = bfs_distance(floor, seed_cell[None]) < UNREACHABLE
            if best is None or comp.sum() > best.sum():
                best = comp
            remaining &= ~comp
        if best.sum() < max(n_place * 2, n_place + 8):
            continue
        region = np.argwhere(best)
        pick = rng.choice(len(region), size=n_place, replace=False)
        spots = region[pick]
        holes = spots[:n]
        cheeses = spots[n:2 * n]
        rockets = spots[2 * n:2 * n + k]
        agents = spots[2 * n + k:]
        break
    else:
        raise ArenaConfigError(
            f"could not place entities after {config.placement_retries} attempts")

    hp = np.array([config.cat_hp] + [config.mouse_hp] * 4, dtype=np.int64)
    return ArenaState(
        config=config,
        walls=walls,
        reachable=best,
        pos=agents.astype(np.int64),
        hp=hp.copy(),
        max_hp=hp.copy(),
        damage=np.array([config.cat_damage] + [config.mouse_damage] * 4, dtype=np.int64),
        speed=np.ones(N_AGENTS, dtype=np.int64),
        status=np.zeros(N_AGENTS, dtype=np.int64),
        timer=np.zeros(N_AGENTS, dtype=np.int64),
        carrying=np.full(N_AGENTS, -1, dtype=np.int64),
        holding=-1,
        cheese_pos=cheeses.astype(np.int64),
        cheese_state=np.zeros(n, dtype=np.int64),
        cheese_progress=np.zeros(n, dtype=np.int64),
        cheese_hole=np.full(n, -1, dtype=np.int64),
        hole_pos=holes.astype(np.int64),
        hole_filled=np.zeros(n, dtype=bool),
        rocket_pos=rockets.astype(np.int64),
        rocket_occupant=np.full(k, -1, dtype=np.int64),
        flags=np.zeros((N_AGENTS, N_FLAGS), dtype=bool),
    )


def connectivity_ok(state: ArenaState) -> bool:
    """Every placed entity sits on floor and all of them share one 8-connected region."""
    floor = ~state.walls
    points = [tuple(p) for p in state.pos] + [tuple(p) for p in state.cheese_pos]
    points += [tuple(p) for p in state.hole_pos] + [tuple(p) for p in state.rocket_pos]
    if any(state.walls[p] for p in points):
        return False
    if len(set(points)) != len(points):
        return False
    dist = bfs_distance(floor, np.array([points[0]]))
    return all(dist[p] < UNREACHABLE for p in points)


# ------------------------------------------------------------------ legality


def _in_bounds(cfg: ArenaConfig, r: int, c: int) -> bool:
    return 0 <= r < cfg.height and 0 <= c < cfg.width


def _step_target(state: ArenaState, agent: int, d: int):
    dr, dc = DIRECTIONS[d]
    r, c = int(state.pos[agent][0]) + int(dr), int(state.pos[agent][1]) + int(dc)
    return r, c


def _mouse_targets_of_cat(state: ArenaState) -> list[int]:
    return [m for m in MICE
            if state.status[m] in ON_GRID
            and adjacent(state.pos[m], state.pos[CAT])]


def _free_rockets_adjacent(state: ArenaState, where) -> list[int]:
    return [i for i in range(len(state.rocket_pos))
            if state.rocket_occupant[i] < 0 and adjacent(state.rocket_pos[i], where)]


def _at_hole_adjacent(state: ArenaState, where) -> list[int]:
    return [c for c in range(len(state.cheese_pos))
            if state.cheese_state[c] == AT_HOLE and adjacent(state.cheese_pos[c], where)]


def _loose_adjacent(state: ArenaState, where) -> list[int]:
    return [c for c in range(len(state.cheese_pos))
            if state.cheese_state[c] == LOOSE and adjacent(state.cheese_pos[c], where)]


def _rescuable_adjacent(state: ArenaState, mouse: int) -> list[int]:
    out = []
    for m in MICE:
        if m == mouse:
            continue
        if state.status[m] in (CAUGHT, TIED) and adjacent(state.pos[m], state.pos[mouse]):
            out.append(m)
    return out


def _cat_stunned(state: ArenaState) -> bool:
    return state.timer[CAT] > 0


def _check(state: ArenaState, agent: int, cmd: ActionCommand) -> str | None:
    """Return None if the command's preconditions hold, else a reason."""
    a = cmd.action
    if a == Action.IDLE:
        return None
    st = state.status[agent]
    if agent == CAT:
        if _cat_stunned(state):
            return "cat is stunned"
    elif st not in ON_GRID:
        return f"mouse is {Status(st).name.lower()}"
    if a == Action.MOVE:
        r, c = _step_target(state, agent, int(cmd.direction))
        if not _in_bounds(state.config, r, c) or state.walls[r, c]:
            return "move into wall or off board"
        return None
    me = state.pos[agent]
    if agent == CAT:
        if a == Action.ATTACK:
            if state.holding >= 0:
                return "cat already holds a mouse"
            return None if _mouse_targets_of_cat(state) else "no mouse in reach"
        if a == Action.INTERACT:
            if state.holding >= 0 and _free_rockets_adjacent(state, me):
                return None
            return None if _at_hole_adjacent(state, me) else "nothing to interact with"
        return f"cat cannot {a.name.lower()}"
    if a == Action.PICKUP:
        if st == CARRYING:
            return "already carrying"
        return None if _loose_adjacent(state, me) else "no loose cheese in reach"
    if a == Action.DROP:
        return None if st == CARRYING else "not carrying"
    if a == Action.PUSH:
        if st == CARRYING:
            return "hands full"
        return None if _at_hole_adjacent(state, me) else "no cheese at a hole in reach"
    if a == Action.ATTACK:
        if adjacent(state.pos[CAT], me) and not _cat_stunned(state):
            return None
        if state.crack_pos is not None and state.crack_hp > 0 and adjacent(state.crack_pos, me):
            return None
        return "nothing to attack"
    if a == Action.RESCUE:
        return None if _rescuable_adjacent(state, agent) else "no teammate to rescue"
    if a == Action.INTERACT:
        if state.crack_open and adjacent(state.crack_pos, me):
            return None
        return "no open crack in reach"
    return "unknown action"


def is_legal(state: ArenaState, agent: int, cmd) -> bool:
    return _check(state, agent, ActionCommand.of(cmd)) is None


# ------------------------------------------------------------------ dynamics


def _normalize_commands(state: ArenaState, commands) -> list[ActionCommand | None]:
    if isinstance(commands, dict):
        commands = [commands.get(a) for a in range(N_AGENTS)]
    commands = list(commands)
    if len(commands) != N_AGENTS:
        raise InvalidCommand(f"expected {N_AGENTS} command slots, got {len(commands)}")
    out = []
    for a, cmd in enumerate(commands):
        if not state.alive(a):
            if cmd is not None:
                raise InvalidCommand(
                    f"agent {a} is {Status(state.status[a]).name.lower()} and cannot act")
            out.append(None)
        else:
            if cmd is None:
                raise InvalidCommand(f"missing command for living agent {a}")
            out.append(ActionCommand.of(cmd))
    return out


def _occupied(state: ArenaState, r: int, c: int, exclude: int) -> bool:
    for b in range(N_AGENTS):
        if b != exclude and state.on_grid(b) and state.pos[b][0] == r and state.pos[b][1] == c:
            return True
    return False


def _move(s: ArenaState, agent: int, d: int):
    for _ in range(int(s.speed[agent])):
        r, c = _step_target(s, agent, d)
        if not _in_bounds(s.config, r, c) or s.walls[r, c] or _occupied(s, r, c, agent):
            return
        s.pos[agent] = (r, c)
        if s.carrying[agent] >= 0:
            s.cheese_pos[s.carrying[agent]] = (r, c)
        if agent == CAT and s.holding >= 0:
            s.pos[s.holding] = (r, c)


def _pick_in_direction(s: ArenaState, agent: int, d: int, candidates):
    """Prefer the target sitting in the commanded direction, else the first candidate."""
    r, c = _step_target(s, agent, d)
    for key, where in candidates:
        if where[0] == r and where[1] == c:
            return key
    return candidates[0][0] if candidates else None


def _release(s: ArenaState, mouse: int, events: list, kind: str, by: int):
    s.status[mouse] = FREE
    s.hp[mouse] = max(1, int(s.max_hp[mouse]) // 2)
    s.timer[mouse] = 0
    if s.holding == mouse:
        s.holding = -1
    for i in range(len(s.rocket_occupant)):
        if s.rocket_occupant[i] == mouse:
            s.rocket_occupant[i] = -1
    events.append((kind, by, mouse))


def _drop_cheese(s: ArenaState, mouse: int):
    ch = int(s.carrying[mouse])
    if ch < 0:
        return
    s.cheese_state[ch] = LOOSE
    s.cheese_pos[ch] = s.pos[mouse]
    s.carrying[mouse] = -1


def _cat_attack(s: ArenaState, cmd: ActionCommand, events: list):
    if s.holding >= 0:
        return
    targets = _mouse_targets_of_cat(s)
    if not targets:
        return
    m = _pick_in_direction(s, CAT, int(cmd.direction), [(t, s.pos[t]) for t in targets])
    dealt = min(int(s.damage[CAT]), int(s.hp[m]))
    s.hp[m] -= dealt
    events.append(("damage", CAT, m, dealt))
    if not s.flags[CAT, FLAG_DAMAGE_MOUSE]:
        s.flags[CAT, FLAG_DAMAGE_MOUSE] = True
    if s.hp[m] <= 0:
        _drop_cheese(s, m)
        s.hp[m] = 0
        s.status[m] = CAUGHT
        s.timer[m] = s.config.caught_timeout
        s.holding = m
        s.pos[m] = s.pos[CAT]
        events.append(("catch", CAT, m))


def _cat_interact(s: ArenaState, events: list):
    me = s.pos[CAT]
    if s.holding >= 0:
        rockets = _free_rockets_adjacent(s, me)
        if rockets:
            i = rockets[0]
            m = s.holding
            s.holding = -1
            s.status[m] = TIED
            s.timer[m] = s.config.rocket_countdown
            s.pos[m] = s.rocket_pos[i]
            s.rocket_occupant[i] = m
            events.append(("tie", CAT, m))
            return
    for ch in _at_hole_adjacent(s, me):
        s.cheese_state[ch] = LOOSE
        s.cheese_progress[ch] = 0
        s.cheese_hole[ch] = -1
        events.append(("knock", CAT, ch))
        return


def _mouse_attack(s: ArenaState, m: int, cmd: ActionCommand, events: list):
    me = s.pos[m]
    cands = []
    if adjacent(s.pos[CAT], me) and not _cat_stunned(s):
        cands.append(("cat", s.pos[CAT]))
    if s.crack_pos is not None and s.crack_hp > 0 and adjacent(s.crack_pos, me):
        cands.append(("crack", s.crack_pos))
    target = _pick_in_direction(s, m, int(cmd.direction), cands)
    if target == "cat":
        dealt = min(int(s.damage[m]), int(s.hp[CAT]))
        s.hp[CAT] -= dealt
        events.append(("hit_cat", m, CAT, dealt))
        if s.hp[CAT] <= 0:
            s.timer[CAT] = s.config.stun_steps
            s.hp[CAT] = s.max_hp[CAT]
            events.append(("stun", m, CAT))
            if s.holding >= 0:
                _release(s, s.holding, events, "struggle_free", s.holding)
    elif target == "crack":
        dealt = min(s.config.crack_damage, s.crack_hp)
        s.crack_hp -= dealt
        events.append(("crack_hit", m, dealt))
        if s.crack_hp <= 0:
            events.append(("crack_open", m))


def _spawn_crack(s: ArenaState, events: list):
    rng = np.random.default_rng([s.config.rng_seed, s.step_count, 7])
    taken = {tuple(p) for p in s.hole_pos} | {tuple(p) for p in s.rocket_pos}
    cells = [tuple(int(v) for v in p) for p in np.argwhere(s.reachable) if tuple(p) not in taken]
    s.crack_pos = cells[int(rng.integers(len(cells)))]
    s.crack_hp = s.config.crack_hp
    s.phase = Phase.ESCAPING
    events.append(("crack_spawn", -1))


def _update_first_sightings(s: ArenaState):
    if s.flags[CAT, FLAG_FIND_ROCKET]:
        return
    R = s.config.vision_radius
    if any(chebyshev(p, s.pos[CAT]) <= R for p in s.rocket_pos):
        s.flags[CAT, FLAG_FIND_ROCKET] = True


def step(state: ArenaState, commands, decay_progress: float = 0.0, strict: bool = False):
    """Advance one tick.

    Resolution is simultaneous with a fixed order: all moves (agent index
    order, lower index wins a contested cell), then all interactions, then
    timers. Illegal commands degrade to IDLE unless ``strict`` is set.

    Returns ``(next_state, rewards, terminal)`` where ``rewards`` holds one
    list of :class:`RewardEvent` per agent.
    """
    if state.terminal:
        raise InvalidCommand("episode already finished")
    cmds = _normalize_commands(state, commands)
    for a, cmd in enumerate(cmds):
        if cmd is None:
            continue
        why = _check(state, a, cmd)
        if why is not None:
            if strict:
                raise IllegalAction(f"agent {a} {cmd.action.name}: {why}")
            cmds[a] = IDLE

    s = state.copy()
    events: list = []

    for a, cmd in enumerate(cmds):
        if cmd is not None and cmd.action == Action.MOVE:
            _move(s, a, int(cmd.direction))

    pushers: dict[int, list[int]] = {}
    for a, cmd in enumerate(cmds):
        if cmd is None or cmd.action in (Action.IDLE, Action.MOVE):
            continue
        act = cmd.action
        if a == CAT:
            if _cat_stunned(s):
                continue
            if act == Action.ATTACK:
                _cat_attack(s, cmd, events)
            elif act == Action.INTERACT:
                _cat_interact(s, events)
            continue
        if s.status[a] not in ON_GRID:
            continue  # caught earlier this tick
        me = s.pos[a]
        if act == Action.PICKUP and s.carrying[a] < 0:
            loose = _loose_adjacent(s, me)
            if loose:
                ch = loose[0]
                s.cheese_state[ch] = CARRIED
                s.cheese_pos[ch] = me
                s.carrying[a] = ch
                s.status[a] = CARRYING
                events.append(("pickup", a, ch))
                if not s.flags[a, FLAG_PICKUP]:
                    s.flags[a, FLAG_PICKUP] = True
        elif act == Action.DROP and s.carrying[a] >= 0:
            ch = int(s.carrying[a])
            busy = {int(s.cheese_hole[c]) for c in range(len(s.cheese_pos))
                    if s.cheese_state[c] in (AT_HOLE, IN_HOLE)}
            holes = [i for i in range(len(s.hole_pos))
                     if not s.hole_filled[i] and i not in busy and adjacent(s.hole_pos[i], me)]
            s.carrying[a] = -1
            s.status[a] = FREE
            if holes:
                s.cheese_state[ch] = AT_HOLE
                s.cheese_pos[ch] = s.hole_pos[holes[0]]
                s.cheese_hole[ch] = holes[0]
                s.cheese_progress[ch] = 0
                events.append(("place", a, ch))
            else:
                s.cheese_state[ch] = LOOSE
                s.cheese_pos[ch] = me
                events.append(("drop", a, ch))
        elif act == Action.PUSH and s.carrying[a] < 0:
            at = _at_hole_adjacent(s, me)
            if at:
                pushers.setdefault(at[0], []).append(a)
        elif act == Action.ATTACK:
            _mouse_attack(s, a, cmd, events)
        elif act == Action.RESCUE:
            mates = _rescuable_adjacent(s, a)
            if mates:
                _release(s, mates[0], events, "rescue", a)
        elif act == Action.INTERACT:
            if s.crack_open and adjacent(s.crack_pos, me):
                s.status[a] = ESCAPED
                events.append(("escape", a))

    for ch, who in sorted(pushers.items()):
        if s.cheese_state[ch] != AT_HOLE:
            continue
        before = int(s.cheese_progress[ch])
        after = min(100, before + s.config.push_progress_per_step * len(who))
        s.cheese_progress[ch] = after
        events.append(("push", ch, tuple(who), after - before))
        if after >= 100:
            s.cheese_state[ch] = IN_HOLE
            s.hole_filled[s.cheese_hole[ch]] = True
            events.append(("cheese_in", ch))

    # timers
    for m in MICE:
        if s.status[m] == CAUGHT:
            s.timer[m] -= 1
            if s.timer[m] <= 0:
                _release(s, m, events, "struggle_free", m)
        elif s.status[m] == TIED:
            s.timer[m] -= 1
            if s.timer[m] <= 0:
                for i in range(len(s.rocket_occupant)):
                    if s.rocket_occupant[i] == m:
                        s.rocket_occupant[i] = -1
                s.status[m] = ELIMINATED
                s.timer[m] = 0
                events.append(("eliminate", CAT, m))
    if s.timer[CAT] > 0:
        s.timer[CAT] -= 1
    s.step_count += 1
    if s.buff is not None and s.step_count >= s.buff[3]:
        agents, stat, saved, _ = s.buff
        arr = getattr(s, stat)
        for a, v in zip(agents, saved):
            arr[a] = v
            if stat == "max_hp":
                s.hp[a] = min(int(s.hp[a]), v)
        s.buff = None
        events.append(("buff_end", -1))

    if s.crack_pos is None and all(s.cheese_state == IN_HOLE):
        _spawn_crack(s, events)
    _update_first_sightings(s)

    counts = s.mouse_counts()
    if counts["escaped"] >= 2:
        s.phase, s.winner = Phase.TERMINAL, Winner.MICE
    elif counts["eliminated"] >= 3:
        s.phase, s.winner = Phase.TERMINAL, Winner.CAT
    elif s.step_count >= s.config.max_steps:
        s.phase, s.winner = Phase.TERMINAL, Winner.CAT
    if s.terminal:
        events.append(("game_over", int(s.winner)))
    s.events = tuple(events)
    rewards = emit_rewards(state, s, decay_progress)
    return s, rewards, s.terminal


# ------------------------------------------------------------------ rewards


def anneal(start: float, end: float, progress: float) -> float:
    p = min(1.0, max(0.0, float(progress)))
    return start + (end - start) * p


def _nearest(dist_map: np.ndarray, where) -> int:
    return int(dist_map[int(where[0]), int(where[1])])


def _dist_maps(s: ArenaState):
    floor = ~s.walls
    maps = {}
    loose = [tuple(s.cheese_pos[c]) for c in range(len(s.cheese_pos))
             if s.cheese_state[c] == LOOSE]
    if loose:
        maps["cheese"] = bfs_distance(floor, np.array(loose))
    busy = {int(s.cheese_hole[c]) for c in range(len(s.cheese_pos))
            if s.cheese_state[c] in (AT_HOLE, IN_HOLE)}
    open_holes = [tuple(s.hole_pos[i]) for i in range(len(s.hole_pos))
                  if not s.hole_filled[i] and i not in busy]
    if open_holes:
        maps["hole"] = bfs_distance(floor, np.array(open_holes))
    if s.crack_pos is not None:
        maps["crack"] = bfs_distance(floor, np.array([s.crack_pos]))
    return maps


def _tied_map(s: ArenaState, exclude: int):
    tied = [tuple(s.pos[m]) for m in MICE if m != exclude and s.status[m] == TIED]
    if not tied:
        return None
    return bfs_distance(~s.walls, np.array(tied))


def emit_rewards(prev: ArenaState, nxt: ArenaState, decay_progress: float = 0.0):
    """Reward events for the transition ``prev -> nxt``, one list per agent."""
    out: list[list[RewardEvent]] = [[] for _ in range(N_AGENTS)]
    team = [m for m in MICE if nxt.status[m] != ELIMINATED]

    def give(agent, kind, value, guidance=False):
        out[agent].append(RewardEvent(agent, kind, float(value), guidance, False))

    def give_team(kind, value):
        for m in team:
            out[m].append(RewardEvent(m, kind, float(value), False, True))

    for ev in nxt.events:
        kind = ev[0]
        if kind == "catch":
            give(CAT, "catch", 0.1)
            give(ev[2], "caught", -0.2)
        elif kind == "tie":
            give(CAT, "tie", 0.1)
        elif kind == "eliminate":
            give(CAT, "eliminate", 2.0)
            give(ev[2], "eliminated", -2.0)
        elif kind == "cheese_in":
            give(CAT, "cheese_in", -0.25)
            give_team("cheese_in", 0.5)
        elif kind == "rescue":
            give(ev[1], "rescue", 0.5)
        elif kind == "push":
            _, _, who, delta = ev
            for m in who:
                give(m, "pushing", (delta / 100.0) / len(who))
        elif kind == "crack_hit":
            _, m, dealt = ev
            give(m, "crack_damage", 2.0 * dealt / prev.config.crack_hp)
            give(CAT, "crack_hp", 0.01 * (-100.0 * dealt / prev.config.crack_hp))
        elif kind == "crack_open":
            give_team("crack_open", 1.0)
        elif kind == "game_over":
            cat_won = ev[1] == Winner.CAT
            give(CAT, "win" if cat_won else "lose", 5.0 if cat_won else -5.0)
            give_team("lose" if cat_won else "win", -5.0 if cat_won else 5.0)

    for m in MICE:
        if nxt.status[m] == ELIMINATED and prev.status[m] == ELIMINATED:
            continue
        dhp = int(nxt.hp[m]) - int(prev.hp[m])
        if dhp != 0 and nxt.status[m] not in (ELIMINATED, ESCAPED):
            give(m, "hp_change", 0.003 * dhp)

    # first-time guidance
    if nxt.flags[CAT, FLAG_FIND_ROCKET] and not prev.flags[CAT, FLAG_FIND_ROCKET]:
        give(CAT, "find_rocket", 0.05, True)
    if nxt.flags[CAT, FLAG_DAMAGE_MOUSE] and not prev.flags[CAT, FLAG_DAMAGE_MOUSE]:
        give(CAT, "damage_mouse", 0.15, True)
    coef = anneal(1.0, 0.0, decay_progress)
    for m in MICE:
        if nxt.flags[m, FLAG_PICKUP] and not prev.flags[m, FLAG_PICKUP]:
            give(m, "pickup", 0.05 * coef, True)

    # distance guidance: potential-style reward on path-distance decrease
    dc = anneal(5.0, 1.0, decay_progress)
    dc_tied = anneal(3.0, 1.0, decay_progress)
    active = [m for m in MICE
              if prev.status[m] in ON_GRID
              and nxt.status[m] in ON_GRID]
    if active and not nxt.terminal:
        pm, nm = _dist_maps(prev), _dist_maps(nxt)
        for m in active:
            carrying = prev.status[m] == CARRYING
            if carrying != (nxt.status[m] == CARRYING):
                continue
            key = "hole" if carrying else "cheese"
            if key in pm and key in nm:
                d0, d1 = _nearest(pm[key], prev.pos[m]), _nearest(nm[key], nxt.pos[m])
                if d0 < UNREACHABLE and d1 < UNREACHABLE and d0 != d1:
                    give(m, "dist_" + key, 0.001 * (d0 - d1) * dc, True)
            if "crack" in pm and "crack" in nm:
                d0, d1 = _nearest(pm["crack"], prev.pos[m]), _nearest(nm["crack"], nxt.pos[m])
                if d0 < UNREACHABLE and d1 < UNREACHABLE and d0 != d1:
                    give(m, "dist_crack", 0.001 * (d0 - d1) * dc, True)
            tp, tn = _tied_map(prev, m), _tied_map(nxt, m)
            if tp is not None and tn is not None:
                d0, d1 = _nearest(tp, prev.pos[m]), _nearest(tn, nxt.pos[m])
                if d0 < UNREACHABLE and d1 < UNREACHABLE and d0 != d1:
                    give(m, "dist_tied", 0.01 * (d0 - d1) * dc_tied, True)
    return out


# ------------------------------------------------------------------ environment randomization


@dataclass(frozen=True)
class ERIntervention:
    """Episode-start handicap. ``side`` is the side the intervention acts on."""

    kind: str = "none"  # none | levelup | hard_case | timed_buff
    side: str = ""  # "cat" | "mouse"
    stat: str = ""  # levelup/timed_buff: hp | speed | damage
    tier: int = 1
    case: str = ""  # hard_case: pre_eliminate | low_hp | far_spawn
    agent: int = -1  # hard_case pre_eliminate target
    window: int = 0  # timed_buff duration in steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ERIntervention":
        return cls(**d) if d else cls()


NO_INTERVENTION = ERIntervention()
HARD_CASES = {"mouse": ("pre_eliminate", "low_hp"), "cat": ("far_spawn", "low_hp")}
LEVELUP_STATS = ("hp", "speed", "damage")


def _side_agents(side: str) -> list[int]:
    if side == "cat":
        return [CAT]
    if side == "mouse":
        return list(MICE)
    raise ValueError(f"unknown side {side!r}")


def _boost(s: ArenaState, agents, stat: str, tier: int):
    if stat == "hp":
        for a in agents:
            s.max_hp[a] = int(round(s.max_hp[a] * (1 + 0.25 * tier)))
            s.hp[a] = s.max_hp[a]
    elif stat == "speed":
        for a in agents:
            s.speed[a] = 2
    elif stat == "damage":
        for a in agents:
            s.damage[a] = int(round(s.damage[a] * (1 + 0.5 * tier)))
    else:
        raise ValueError(f"unknown stat {stat!r}")


def apply_er_intervention(state: ArenaState, iv: ERIntervention) -> ArenaState:
    if state.step_count != 0:
        raise ArenaError("interventions apply only at episode start")
    if iv.kind == "none":
        return state
    s = state.copy()
    agents = _side_agents(iv.side)
    if iv.kind == "levelup":
        _boost(s, agents, iv.stat, iv.tier)
    elif iv.kind == "timed_buff":
        if iv.window <= 0:
            raise ValueError("timed_buff needs a positive window")
        attr = {"hp": "max_hp", "speed": "speed", "damage": "damage"}[iv.stat]
        saved = tuple(int(getattr(s, attr)[a]) for a in agents)
        _boost(s, agents, iv.stat, iv.tier)
        s.buff = (tuple(agents), attr, saved, int(iv.window))
    elif iv.kind == "hard_case":
        if iv.case == "pre_eliminate":
            m = iv.agent if iv.agent in MICE else MICE[0]
            s.status[m] = ELIMINATED
        elif iv.case == "low_hp":
            for a in agents:
                s.hp[a] = max(1, int(s.max_hp[a]) // 2)
        elif iv.case == "far_spawn":
            dist = bfs_distance(~s.walls, s.cheese_pos)
            occupied = {tuple(p) for p in s.pos[1:]} | {tuple(p) for p in s.cheese_pos}
            occupied |= {tuple(p) for p in s.hole_pos} | {tuple(p) for p in s.rocket_pos}
            best, where = -1, None
            for r, c in np.argwhere(s.reachable):
                if (r, c) in occupied:
                    continue
                if dist[r, c] > best:
                    best, where = int(dist[r, c]), (int(r), int(c))
            s.pos[CAT] = where
        else:
            raise ValueError(f"unknown hard case {iv.case!r}")
    else:
        raise ValueError(f"unknown intervention {iv.kind!r}")
    return s


# ------------------------------------------------------------------ invariants


def check_invariants(s: ArenaState) -> list[str]:
    """Return violated invariants (empty when the state is consistent)."""
    bad = []
    n = len(s.cheese_pos)
    counts = np.bincount(s.cheese_state, minlength=4)
    if counts.sum() != n:
        bad.append("cheese conservation")
    holes = [int(s.cheese_hole[c]) for c in range(n)
             if s.cheese_state[c] in (AT_HOLE, IN_HOLE)]
    if len(holes) != len(set(holes)):
        bad.append("two cheeses share a hole")
    all_in = bool(np.all(s.cheese_state == IN_HOLE))
    if all_in != (s.crack_pos is not None):
        bad.append("crack exists iff all cheeses in hole")
    if not s.terminal and (s.phase == Phase.ESCAPING) != (s.crack_pos is not None):
        bad.append("escaping phase iff crack")
    if sum(s.mouse_counts().values()) != 4:
        bad.append("mouse status counts")
    if s.terminal and s.winner == Winner.NONE:
        bad.append("terminal without winner")
    if not s.terminal and s.winner != Winner.NONE:
        bad.append("winner before terminal")
    carried = [int(c) for c in s.carrying if c >= 0]
    if sorted(carried) != sorted(int(c) for c in np.flatnonzero(s.cheese_state == CARRIED)):
        bad.append("carried cheese bookkeeping")
    return bad


# ------------------------------------------------------------------ replay log


def _cmd_to_json(cmd: ActionCommand | None):
    return None if cmd is None else [int(cmd.action), int(cmd.direction)]


class ReplayLog:
    """Append-only JSON-lines episode log: a header, then one record per step."""

    def __init__(self, path, initial: ArenaState, intervention: ERIntervention = NO_INTERVENTION,
                 decay_progress: float = 0.0):
        self.path = path
        self._fh = open(path, "w")
        self._write({"type": "header", "config": initial.config.to_dict(),
                     "intervention": intervention.to_dict(), "decay_progress": decay_progress,
                     "hash": initial.digest()})

    def _write(self, rec):
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def record(self, state: ArenaState, commands: Sequence, rewards):
        """Log the step that produced ``state``."""
        self._write({
            "type": "step",
            "step": state.step_count,
            "commands": [_cmd_to_json(None if c is None else ActionCommand.of(c)) for c in commands],
            "rewards": [[[e.kind, e.value] for e in evs] for evs in rewards],
            "hash": state.digest(),
        })

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_replay(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    if not recs or recs[0].get("type") != "header":
        raise ArenaError(f"{path}: missing replay header")
    return recs[0], recs[1:]


def config_from_dict(d: dict) -> ArenaConfig:
    return ArenaConfig(**d)


def verify_replay(path) -> tuple[bool, int | None, list[ArenaState]]:
    """Re-simulate a logged episode and compare per-step hashes.

    Returns ``(ok, first_bad_step, states)``; ``first_bad_step`` is the step
    number of the first record that fails to reproduce (0 for the header).
    """
    header, recs = read_replay(path)
    cfg = config_from_dict(header["config"])
    state = apply_er_intervention(generate(cfg), ERIntervention.from_dict(header["intervention"]))
    decay = header.get("decay_progress", 0.0)
    states = [state]
    steps = [r for r in recs if r["type"] == "step"]
    if header.get("hash") not in (None, state.digest()):
        return False, 0, states
    for i, rec in enumerate(steps):
        cmds = [None if c is None else ActionCommand.of(c) for c in rec["commands"]]
        try:
            state, _, _ = step(state, cmds, decay)
        except ArenaError:
            return False, rec.get("step", i + 1), states
        states.append(state)
        if state.digest() != rec["hash"]:
            return False, rec.get("step", i + 1), states
    return True, None, states


def render(s: ArenaState) -> str:
    """Text frame: # wall, C cat, 1-4 mice, o cheese, O hole, @ filled hole, R rocket, X crack."""
    grid = [["#" if s.walls[r, c] else "." for c in range(s.config.width)]
            for r in range(s.config.height)]
    for (r, c), filled in zip(s.hole_pos, s.hole_filled):
        grid[r][c] = "@" if filled else "O"
    for r, c in s.rocket_pos:
        grid[r][c] = "R"
    for (r, c), st in zip(s.cheese_pos, s.cheese_state):
        if st in (LOOSE, AT_HOLE):
            grid[r][c] = "o"
    if s.crack_pos is not None:
        grid[s.crack_pos[0]][s.crack_pos[1]] = "x" if s.crack_open else "X"
    for m in MICE:
        if s.status[m] in (FREE, CARRYING, TIED):
            r, c = s.pos[m]
            grid[r][c] = str(m)
    r, c = s.pos[CAT]
    grid[r][c] = "C"
    head = (f"step {s.step_count} phase={Phase(s.phase).name.lower()} "
            f"mice={[Status(x).name.lower() for x in s.status[1:]]}")
    return head + "\n" + "\n".join("".join(row) for row in grid)
