"""Observation encoding: mini-image, vector blocks, memory, action mask.

Layout of the mini-image (H, W, 8), values in [0, 1]:

    0 walls            4 rocket tiles (free 1.0, occupied 0.5)
    1 cheeses          5 carried-cheese overlay
    2 holes            6 cat
    3 wall crack       7 mice

Everything except the wall channel is zeroed outside the observer's vision
radius (Chebyshev distance). Hole and rocket *positions* are part of the map
and appear in the vector block regardless of vision; dynamic entities
(opponents, cheese, crack) come from current sight or from memory.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arena as A

N_CHANNELS = 8
ENTITY_FEATURES = 8
STATUS_ONEHOT = len(A.Status)


class EncodeError(ValueError):
    pass


# ------------------------------------------------------------------ memory


@dataclass(frozen=True)
class MemoryBlock:
    """Fixed-capacity history: recent own actions plus last sightings with ages.

    ``sightings`` is ordered oldest-first; each entry is
    ``(key, kind, row, col, age)`` where ``key`` identifies the entity.
    """

    capacity: int = 16
    max_age: int = 64
    actions: tuple = ()
    sightings: tuple = ()

    KINDS = ("opponent", "cheese", "crack")

    def find(self, key):
        for rec in self.sightings:
            if rec[0] == key:
                return rec
        return None

    def vector(self) -> np.ndarray:
        M = self.capacity
        act = np.zeros((M, 3), dtype=np.float32)
        for i, (a, d) in enumerate(reversed(self.actions)):
            act[i] = (1.0, a / (A.N_ACTIONS - 1), d / (A.N_DIRECTIONS - 1))
        sig = np.zeros((M, 7), dtype=np.float32)
        for i, (_, kind, r, c, age) in enumerate(reversed(self.sightings)):
            sig[i, 0] = 1.0
            sig[i, 1 + self.KINDS.index(kind)] = 1.0
            sig[i, 4:7] = (r, c, age / self.max_age)
        return np.concatenate([act.ravel(), sig.ravel()])

    @staticmethod
    def size(capacity: int) -> int:
        return capacity * 10


def update_memory(memory: MemoryBlock, sightings=(), action=None) -> MemoryBlock:
    """Age every record by one step, then insert fresh sightings at age 0.

    ``sightings`` is an iterable of ``(key, kind, row, col)``. A re-sighted
    entity replaces its old record; beyond capacity the oldest record goes.
    ``row``/``col`` are stored as given (callers pass normalized coordinates).
    """
    cap = memory.capacity
    recs = [(k, kind, r, c, min(age + 1, memory.max_age)) for k, kind, r, c, age in memory.sightings]
    for key, kind, r, c in sightings:
        if kind not in MemoryBlock.KINDS:
            raise ValueError(f"unknown sighting kind {kind!r}")
        recs = [rec for rec in recs if rec[0] != key]
        recs.append((key, kind, r, c, 0))
    recs = recs[-cap:]
    actions = memory.actions
    if action is not None:
        actions = (actions + ((int(action[0]), int(action[1])),))[-cap:]
    return MemoryBlock(cap, memory.max_age, actions, tuple(recs))


# ------------------------------------------------------------------ helpers


class _View:
    """Plain-Python copy of the state fields the encoder reads (avoids numpy scalar overhead)."""

    __slots__ = ("cfg", "pos", "hp", "max_hp", "status", "timer", "carrying", "speed",
                 "cheese_pos", "cheese_state", "cheese_progress", "cheese_hole", "hole_pos",
                 "hole_filled", "rocket_pos", "rocket_occupant", "crack_pos", "crack_hp",
                 "holding", "step_count", "phase", "span", "sy", "sx")

    def __init__(self, state: A.ArenaState):
        cfg = self.cfg = state.config
        self.pos = [tuple(p) for p in state.pos.tolist()]
        self.hp = state.hp.tolist()
        self.max_hp = state.max_hp.tolist()
        self.status = state.status.tolist()
        self.timer = state.timer.tolist()
        self.carrying = state.carrying.tolist()
        self.speed = state.speed.tolist()
        self.cheese_pos = [tuple(p) for p in state.cheese_pos.tolist()]
        self.cheese_state = state.cheese_state.tolist()
        self.cheese_progress = state.cheese_progress.tolist()
        self.cheese_hole = state.cheese_hole.tolist()
        self.hole_pos = [tuple(p) for p in state.hole_pos.tolist()]
        self.hole_filled = state.hole_filled.tolist()
        self.rocket_pos = [tuple(p) for p in state.rocket_pos.tolist()]
        self.rocket_occupant = state.rocket_occupant.tolist()
        self.crack_pos = None if state.crack_pos is None else tuple(int(v) for v in state.crack_pos)
        self.crack_hp = int(state.crack_hp)
        self.holding = int(state.holding)
        self.step_count = int(state.step_count)
        self.phase = int(state.phase)
        self.span = max(cfg.height, cfg.width)
        self.sy = 2.0 / max(1, cfg.height - 1)
        self.sx = 2.0 / max(1, cfg.width - 1)

    def alive(self, a):
        return self.status[a] != A.ELIMINATED and self.status[a] != A.ESCAPED

    def norm(self, p):
        """Grid coordinates mapped to [-1, 1]."""
        return p[0] * self.sy - 1.0, p[1] * self.sx - 1.0

    def rel(self, src, dst):
        dr = dst[0] - src[0]
        dc = dst[1] - src[1]
        return dr / self.span, dc / self.span, max(abs(dr), abs(dc)) / self.span


def _norm_rc(cfg: A.ArenaConfig, r, c):
    """Map grid coordinates to [-1, 1]."""
    return (2.0 * r / max(1, cfg.height - 1) - 1.0, 2.0 * c / max(1, cfg.width - 1) - 1.0)


def _onehot(i: int, n: int):
    v = [0.0] * n
    v[int(i)] = 1.0
    return v


def _seen(me, where, radius) -> bool:
    return radius is None or max(abs(where[0] - me[0]), abs(where[1] - me[1])) <= radius


def observe_facts(state: A.ArenaState, agent: int):
    """Sightings available to ``agent`` this step, as memory insert records."""
    v = _View(state)
    R = v.cfg.vision_radius
    me = v.pos[agent]
    out = []
    opponents = A.MICE if agent == A.CAT else (A.CAT,)
    for o in opponents:
        if v.alive(o) and _seen(me, v.pos[o], R):
            out.append((("agent", o), "opponent", *v.norm(v.pos[o])))
    for c, where in enumerate(v.cheese_pos):
        if v.cheese_state[c] != A.IN_HOLE and _seen(me, where, R):
            out.append((("cheese", c), "cheese", *v.norm(where)))
    if v.crack_pos is not None and _seen(me, v.crack_pos, R):
        out.append((("crack", 0), "crack", *v.norm(v.crack_pos)))
    return out


# ------------------------------------------------------------------ action mask


@dataclass(frozen=True)
class ActionMask:
    action: np.ndarray  # (N_ACTIONS,) bool
    direction: np.ndarray  # (N_DIRECTIONS,) bool


def _move_dirs(state: A.ArenaState, agent: int) -> np.ndarray:
    cfg = state.config
    r0, c0 = (int(v) for v in state.pos[agent])
    ok = np.zeros(A.N_DIRECTIONS, dtype=bool)
    for d, (dr, dc) in enumerate(A.DIRECTIONS):
        r, c = r0 + int(dr), c0 + int(dc)
        ok[d] = 0 <= r < cfg.height and 0 <= c < cfg.width and not state.walls[r, c]
    return ok


def legal_mask(state: A.ArenaState, agent: int) -> ActionMask:
    """Legality of every action for ``agent`` in ``state``.

    MOVE is legal when at least one direction is; the direction mask lists
    those directions (all directions when MOVE is impossible, so the
    direction head stays a proper distribution).
    """
    if not state.alive(agent):
        raise EncodeError(f"agent {agent} is not alive")
    act = np.zeros(A.N_ACTIONS, dtype=bool)
    act[A.Action.IDLE] = True
    dirs = _move_dirs(state, agent)
    st = int(state.status[agent])
    me = state.pos[agent]
    near = lambda p: max(abs(int(p[0]) - int(me[0])), abs(int(p[1]) - int(me[1]))) <= 1  # noqa: E731
    if agent == A.CAT:
        if state.timer[A.CAT] == 0:
            act[A.Action.MOVE] = dirs.any()
            free_mouse_near = any(state.status[m] in A.ON_GRID and near(state.pos[m]) for m in A.MICE)
            act[A.Action.ATTACK] = state.holding < 0 and free_mouse_near
            rocket_ok = state.holding >= 0 and any(
                state.rocket_occupant[i] < 0 and near(state.rocket_pos[i])
                for i in range(len(state.rocket_pos)))
            knock_ok = any(state.cheese_state[c] == A.AT_HOLE and near(state.cheese_pos[c])
                           for c in range(len(state.cheese_pos)))
            act[A.Action.INTERACT] = rocket_ok or knock_ok
    elif st in A.ON_GRID:
        carrying = st == A.CARRYING
        act[A.Action.MOVE] = dirs.any()
        cheese_near = [state.cheese_state[c] for c in range(len(state.cheese_pos))
                       if near(state.cheese_pos[c])]
        act[A.Action.PICKUP] = not carrying and A.LOOSE in cheese_near
        act[A.Action.DROP] = carrying
        act[A.Action.PUSH] = not carrying and A.AT_HOLE in cheese_near
        cat_ok = near(state.pos[A.CAT]) and state.timer[A.CAT] == 0
        crack_ok = state.crack_pos is not None and state.crack_hp > 0 and near(state.crack_pos)
        act[A.Action.ATTACK] = cat_ok or crack_ok
        act[A.Action.RESCUE] = any(
            m != agent and state.status[m] in (A.CAUGHT, A.TIED) and near(state.pos[m])
            for m in A.MICE)
        act[A.Action.INTERACT] = (state.crack_pos is not None and state.crack_hp <= 0
                                  and near(state.crack_pos))
    if not act[A.Action.MOVE]:
        dirs = np.ones(A.N_DIRECTIONS, dtype=bool)
    return ActionMask(act, dirs)


# ------------------------------------------------------------------ observation


@dataclass
class Observation:
    side: str
    image: np.ndarray  # (H, W, 8) float32
    vector: np.ndarray  # (V,) float32: self, teammates, opponent, global, entity slots
    entities: np.ndarray  # (cap, ENTITY_FEATURES) float32, variable-length list
    memory: np.ndarray  # (10 * M,) float32
    action_mask: np.ndarray  # (N_ACTIONS,) bool
    direction_mask: np.ndarray  # (N_DIRECTIONS,) bool
    invisible_image: np.ndarray | None = None
    invisible_vector: np.ndarray | None = None
    layout: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def has_invisible(self) -> bool:
        return self.invisible_image is not None

    def policy_part(self) -> "Observation":
        return Observation(self.side, self.image, self.vector, self.entities, self.memory,
                           self.action_mask, self.direction_mask, layout=self.layout)

    def flatten(self) -> np.ndarray:
        parts = [self.image.ravel(), self.vector, self.entities.ravel(), self.memory,
                 self.action_mask.astype(np.float32), self.direction_mask.astype(np.float32)]
        if self.has_invisible:
            parts += [self.invisible_image.ravel(), self.invisible_vector]
        return np.concatenate(parts)


@dataclass(frozen=True)
class EncoderSpec:
    """Static shapes for one side under one arena config."""

    side: str
    height: int
    width: int
    vector_size: int
    entity_cap: int
    memory_size: int
    layout: dict

    @property
    def image_shape(self):
        return (self.height, self.width, N_CHANNELS)


SELF_FEATURES = 2 + 1 + STATUS_ONEHOT + 1 + 1 + 1 + 1  # rc, hp, status, timer, carry, speed, stunned
MATE_FEATURES = 1 + 2 + 2 + 1 + STATUS_ONEHOT + 1
OPP_FEATURES = 2 + 2 + 2 + 1 + 1 + 1  # visible, known, rc, drc, age, hp, flag
GLOBAL_FEATURES = 2 + 1 + 1 + 1 + 3 + 4
CHEESE_FEATURES = 1 + 2 + 2 + 1 + 4 + 1
HOLE_FEATURES = 1 + 2 + 2 + 1 + 2
CRACK_FEATURES = 1 + 2 + 2 + 1 + 2


def encoder_spec(config: A.ArenaConfig, side: str, entity_cap: int = 8,
                 memory_capacity: int = 16) -> EncoderSpec:
    n = config.n_cheese
    blocks = [("self", SELF_FEATURES)]
    if side == "mouse":
        blocks.append(("teammates", 3 * MATE_FEATURES))
        blocks.append(("opponent", OPP_FEATURES))
    else:
        blocks.append(("opponent", 4 * OPP_FEATURES))
    blocks += [("global", GLOBAL_FEATURES), ("cheese", n * CHEESE_FEATURES),
               ("holes", config.n_holes * HOLE_FEATURES), ("crack", CRACK_FEATURES)]
    layout, off = {}, 0
    for name, size in blocks:
        layout[name] = slice(off, off + size)
        off += size
    return EncoderSpec(side, config.height, config.width, off, entity_cap,
                       MemoryBlock.size(memory_capacity), layout)


def _image(state: A.ArenaState, v: _View, agent: int, radius) -> np.ndarray:
    cfg = v.cfg
    img = np.zeros((cfg.height, cfg.width, N_CHANNELS), dtype=np.float32)
    img[:, :, 0] = state.walls
    for c, (r, q) in enumerate(v.cheese_pos):
        st = v.cheese_state[c]
        if st == A.LOOSE:
            img[r, q, 1] = 1.0
        elif st == A.AT_HOLE:
            img[r, q, 1] = 0.5 + v.cheese_progress[c] / 200.0
        elif st == A.CARRIED:
            img[r, q, 5] = 1.0
    for i, (r, q) in enumerate(v.hole_pos):
        img[r, q, 2] = 0.5 if v.hole_filled[i] else 1.0
    if v.crack_pos is not None:
        img[v.crack_pos[0], v.crack_pos[1], 3] = 1.0 if v.crack_hp <= 0 else 0.5
    for i, (r, q) in enumerate(v.rocket_pos):
        img[r, q, 4] = 0.5 if v.rocket_occupant[i] >= 0 else 1.0
    r, q = v.pos[A.CAT]
    img[r, q, 6] = 1.0
    for m in A.MICE:
        st = v.status[m]
        r, q = v.pos[m]
        if st in A.ON_GRID:
            img[r, q, 7] = 1.0
        elif st == A.CAUGHT or st == A.TIED:
            img[r, q, 7] = max(img[r, q, 7], 0.5)
    if radius is not None:
        r0, c0 = v.pos[agent]
        keep = np.zeros((cfg.height, cfg.width), dtype=bool)
        keep[max(0, r0 - radius):r0 + radius + 1, max(0, c0 - radius):c0 + radius + 1] = True
        img[~keep, 1:] = 0.0
    return img


def _self_features(v: _View, agent: int):
    cfg = v.cfg
    r, c = v.norm(v.pos[agent])
    timer_scale = max(cfg.rocket_countdown, cfg.caught_timeout, cfg.stun_steps)
    return ([r, c, v.hp[agent] / v.max_hp[agent]]
            + _onehot(v.status[agent], STATUS_ONEHOT)
            + [min(1.0, v.timer[agent] / timer_scale),
               float(v.carrying[agent] >= 0),
               float(v.speed[agent] > 1),
               float(agent == A.CAT and v.timer[A.CAT] > 0)])


def _mate_features(v: _View, agent: int, m: int):
    cfg = v.cfg
    if not v.alive(m):
        return [0.0] * (MATE_FEATURES - STATUS_ONEHOT - 1) + _onehot(v.status[m], STATUS_ONEHOT) + [0.0]
    r, c = v.norm(v.pos[m])
    dr, dc, _ = v.rel(v.pos[agent], v.pos[m])
    timer_scale = max(cfg.rocket_countdown, cfg.caught_timeout)
    return ([1.0, r, c, dr, dc, v.hp[m] / v.max_hp[m]]
            + _onehot(v.status[m], STATUS_ONEHOT)
            + [min(1.0, v.timer[m] / timer_scale)])


def _opp_features(v: _View, agent: int, o: int, memory: MemoryBlock | None, radius):
    cfg = v.cfg
    if not v.alive(o):
        return [0.0] * OPP_FEATURES
    me = v.pos[agent]
    if o != A.CAT and v.status[o] == A.CAUGHT:
        # a held mouse travels with the cat; visible iff the cat is
        seen_now = _seen(me, v.pos[A.CAT], radius)
    else:
        seen_now = _seen(me, v.pos[o], radius)
    flag = float(v.holding >= 0) if o == A.CAT else float(v.status[o] in (A.CAUGHT, A.TIED))
    if seen_now:
        r, c = v.norm(v.pos[o])
        dr, dc, _ = v.rel(me, v.pos[o])
        return [1.0, 1.0, r, c, dr, dc, 0.0, v.hp[o] / v.max_hp[o], flag]
    rec = memory.find(("agent", o)) if memory is not None else None
    if rec is None:
        return [0.0] * OPP_FEATURES
    _, _, r, c, age = rec
    rr = (r + 1.0) / 2.0 * max(1, cfg.height - 1)
    cc = (c + 1.0) / 2.0 * max(1, cfg.width - 1)
    dr, dc, _ = v.rel(me, (round(rr), round(cc)))
    return [0.0, 1.0, r, c, dr, dc, age / memory.max_age, 0.0, 0.0]


def _global_features(v: _View):
    cfg = v.cfg
    n = len(v.cheese_pos)
    st = v.status[1:]
    at_hole = [v.cheese_progress[c] / 100.0 for c in range(n) if v.cheese_state[c] == A.AT_HOLE]
    return ([float(v.phase == A.Phase.PUSHING), float(v.phase == A.Phase.ESCAPING),
             1.0 - v.step_count / cfg.max_steps,
             sum(1 for x in v.cheese_state if x == A.IN_HOLE) / n,
             sum(at_hole) / len(at_hole) if at_hole else 0.0,
             float(v.crack_pos is not None),
             v.crack_hp / cfg.crack_hp if v.crack_pos is not None else 0.0,
             float(v.crack_pos is not None and v.crack_hp <= 0)]
            + [st.count(A.ESCAPED) / 4, st.count(A.ELIMINATED) / 4, st.count(A.TIED) / 4,
               st.count(A.CAUGHT) / 4])


def _entity_slots(v: _View, agent: int, memory: MemoryBlock | None, radius):
    cfg = v.cfg
    me = v.pos[agent]
    out = []
    for c, where in enumerate(v.cheese_pos):
        st = v.cheese_state[c]
        if st == A.IN_HOLE or _seen(me, where, radius):
            r, q = v.norm(where)
            dr, dq, dist = v.rel(me, where)
            out += [1.0, r, q, dr, dq, dist] + _onehot(st, 4) + [v.cheese_progress[c] / 100.0]
            continue
        rec = memory.find(("cheese", c)) if memory is not None else None
        if rec is None:
            out += [0.0] * CHEESE_FEATURES
        else:
            _, _, r, q, age = rec
            out += [0.5, r, q, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, age / memory.max_age]
    busy = {v.cheese_hole[c] for c in range(len(v.cheese_pos)) if v.cheese_state[c] == A.AT_HOLE}
    for i, where in enumerate(v.hole_pos):
        r, q = v.norm(where)
        dr, dq, dist = v.rel(me, where)
        out += [1.0, r, q, dr, dq, dist, float(v.hole_filled[i]), float(i in busy)]
    if v.crack_pos is not None and _seen(me, v.crack_pos, radius):
        r, q = v.norm(v.crack_pos)
        dr, dq, dist = v.rel(me, v.crack_pos)
        out += [1.0, r, q, dr, dq, dist, v.crack_hp / cfg.crack_hp, float(v.crack_hp <= 0)]
    else:
        rec = memory.find(("crack", 0)) if memory is not None else None
        if rec is None:
            out += [0.0] * CRACK_FEATURES
        else:
            _, _, r, q, age = rec
            out += [0.5, r, q, 0.0, 0.0, age / memory.max_age, 0.0, 0.0]
    return out


def _variable_entities(v: _View, agent: int, cap: int, radius) -> np.ndarray:
    me = v.pos[agent]
    rows = []
    for i, where in enumerate(v.rocket_pos):
        dr, dc, dist = v.rel(me, where)
        rows.append([1.0, 1.0, 0.0, 0.0, dr, dc, dist, float(v.rocket_occupant[i] >= 0)])
    for b in range(A.N_AGENTS):
        if b == agent or not v.alive(b) or v.status[b] == A.CAUGHT:
            continue
        if not _seen(me, v.pos[b], radius):
            continue
        dr, dc, dist = v.rel(me, v.pos[b])
        is_cat = b == A.CAT
        rows.append([1.0, 0.0, float(not is_cat), float(is_cat), dr, dc, dist,
                     v.hp[b] / v.max_hp[b]])
    out = np.zeros((cap, ENTITY_FEATURES), dtype=np.float32)
    if rows:
        rows = rows[:cap]
        out[:len(rows)] = rows
    return out


def _vector(v: _View, agent: int, memory, radius, spec: EncoderSpec) -> np.ndarray:
    parts = _self_features(v, agent)
    if agent != A.CAT:
        for m in A.MICE:
            if m != agent:
                parts += _mate_features(v, agent, m)
        parts += _opp_features(v, agent, A.CAT, memory, radius)
    else:
        for m in A.MICE:
            parts += _opp_features(v, agent, m, memory, radius)
    parts += _global_features(v)
    parts += _entity_slots(v, agent, memory, radius)
    vec = np.asarray(parts, dtype=np.float32)
    if vec.shape[0] != spec.vector_size:
        raise EncodeError(f"vector size {vec.shape[0]} != spec {spec.vector_size}")
    return np.clip(vec, -1.0, 1.0)


def side_of(agent: int) -> str:
    return "cat" if agent == A.CAT else "mouse"


def encode_policy_obs(state: A.ArenaState, agent: int, memory: MemoryBlock,
                      spec: EncoderSpec | None = None, full_knowledge: bool = False) -> Observation:
    """Policy input for ``agent``. ``full_knowledge`` disables the vision limit (oracle encoder)."""
    if not state.alive(agent):
        raise EncodeError(f"agent {agent} is not alive")
    side = side_of(agent)
    if spec is None:
        spec = encoder_spec(state.config, side, memory_capacity=memory.capacity)
    radius = None if full_knowledge else state.config.vision_radius
    mask = legal_mask(state, agent)
    v = _View(state)
    return Observation(
        side=side,
        image=_image(state, v, agent, radius),
        vector=_vector(v, agent, memory, radius, spec),
        entities=_variable_entities(v, agent, spec.entity_cap, radius),
        memory=memory.vector(),
        action_mask=mask.action,
        direction_mask=mask.direction,
        layout=spec.layout,
    )


def invisible_block(state: A.ArenaState, agent: int, spec: EncoderSpec | None = None):
    """Ground-truth image and vector with the vision limit lifted."""
    side = side_of(agent)
    if spec is None:
        spec = encoder_spec(state.config, side)
    v = _View(state)
    return _image(state, v, agent, None), _vector(v, agent, None, None, spec)


def encode_value_obs(state: A.ArenaState, agent: int, memory: MemoryBlock,
                     spec: EncoderSpec | None = None) -> Observation:
    obs = encode_policy_obs(state, agent, memory, spec)
    obs.invisible_image, obs.invisible_vector = invisible_block(state, agent, spec)
    return obs
