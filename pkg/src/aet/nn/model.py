"""Policy/value network: conv-residual image encoder, vector and entity MLPs,
memory MLP, a shared mid layer, two policy heads and a value head that also
sees the ground-truth (invisible) block.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import arena as A
from ..obsenc import ENTITY_FEATURES, N_CHANNELS, EncoderSpec, Observation
from . import engine as E
from .engine import ShapeError, Tensor


@dataclass(frozen=True)
class NetConfig:
    conv_channels: int = 16
    res_blocks: int = 2
    pool_grid: tuple = (3, 4)
    image_hidden: int = 64
    vector_hidden: tuple = (80, 64)
    entity_hidden: int = 32
    memory_hidden: int = 32
    mid_hidden: int = 128
    head_hidden: int = 64
    invisible_hidden: int = 40
    use_memory: bool = True
    use_invisible: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_grid"] = list(self.pool_grid)
        d["vector_hidden"] = list(self.vector_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["pool_grid"] = tuple(d["pool_grid"])
        d["vector_hidden"] = tuple(d["vector_hidden"])
        return cls(**d)


@dataclass(frozen=True)
class InputDims:
    height: int
    width: int
    vector: int
    entity_cap: int
    memory: int

    @classmethod
    def from_spec(cls, spec: EncoderSpec) -> "InputDims":
        return cls(spec.height, spec.width, spec.vector_size, spec.entity_cap, spec.memory_size)


@dataclass
class NetworkParams:
    side: str
    net: NetConfig
    dims: InputDims
    tensors: dict
    arena_hash: str = ""
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "NetworkParams":
        tens = {k: E.parameter(v.data.copy(), name=k) for k, v in self.tensors.items()}
        return NetworkParams(self.side, self.net, self.dims, tens, self.arena_hash, self.step,
                             dict(self.meta))

    def astype(self, dtype) -> "NetworkParams":
        out = self.copy()
        for t in out.tensors.values():
            t.data = t.data.astype(dtype)
        return out

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]


def _layer_shapes(net: NetConfig, dims: InputDims):
    C = net.conv_channels
    gh, gw = net.pool_grid
    shapes = [("conv0", (N_CHANNELS * 9, C))]
    for i in range(net.res_blocks):
        shapes += [(f"res{i}a", (C * 9, C)), (f"res{i}b", (C * 9, C))]
    shapes.append(("img", (C * gh * gw, net.image_hidden)))
    prev = dims.vector
    for i, h in enumerate(net.vector_hidden):
        shapes.append((f"vec{i}", (prev, h)))
        prev = h
    shapes.append(("ent", (ENTITY_FEATURES, net.entity_hidden)))
    mid_in = net.image_hidden + prev + net.entity_hidden
    if net.use_memory:
        shapes.append(("mem", (dims.memory, net.memory_hidden)))
        mid_in += net.memory_hidden
    shapes += [("mid", (mid_in, net.mid_hidden)),
               ("pol", (net.mid_hidden, net.head_hidden)),
               ("act", (net.head_hidden, A.N_ACTIONS)),
               ("dir", (net.head_hidden, A.N_DIRECTIONS))]
    val_in = net.mid_hidden
    if net.use_invisible:
        shapes.append(("inv", (dims.vector + N_CHANNELS * gh * gw, net.invisible_hidden)))
        val_in += net.invisible_hidden
    shapes += [("val0", (val_in, net.head_hidden)), ("val", (net.head_hidden, 1))]
    return shapes


_SMALL_INIT = {"act", "dir", "val"}


def init_params(side: str, spec: EncoderSpec | InputDims, net: NetConfig | None = None,
                seed: int = 0, arena_hash: str = "", dtype=np.float32,
                zero: bool = False) -> NetworkParams:
    """He-normal weights, zero biases; output layers start small so the initial
    policy is close to uniform over legal actions."""
    if side not in ("cat", "mouse"):
        raise ValueError(f"side must be 'cat' or 'mouse', got {side!r}")
    net = net or NetConfig()
    dims = spec if isinstance(spec, InputDims) else InputDims.from_spec(spec)
    rng = np.random.default_rng([seed, 0 if side == "cat" else 1])
    tensors = {}
    for name, (fan_in, fan_out) in _layer_shapes(net, dims):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            std = np.sqrt(2.0 / fan_in) * (0.01 if name in _SMALL_INIT else 1.0)
            if name.startswith("res") and name.endswith("b"):
                std *= 0.5
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
        tensors[name + ".w"] = E.parameter(w.astype(dtype), name=name + ".w")
        tensors[name + ".b"] = E.parameter(np.zeros(fan_out, dtype=dtype), name=name + ".b")
    return NetworkParams(side, net, dims, tensors, arena_hash, 0)


# ------------------------------------------------------------------ batching


@dataclass
class ObsBatch:
    image: np.ndarray  # (B, H, W, 8)
    vector: np.ndarray
    entities: np.ndarray
    memory: np.ndarray
    action_mask: np.ndarray
    direction_mask: np.ndarray
    invisible_image: np.ndarray | None = None
    invisible_vector: np.ndarray | None = None

    def __len__(self):
        return self.image.shape[0]

    def take(self, idx) -> "ObsBatch":
        pick = lambda x: None if x is None else x[idx]  # noqa: E731
        return ObsBatch(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, batches) -> "ObsBatch":
        batches = list(batches)
        out = {}
        for f in cls.__dataclass_fields__:
            vals = [getattr(b, f) for b in batches]
            out[f] = None if any(v is None for v in vals) else np.concatenate(vals)
        return cls(**out)


def stack_obs(obs_list) -> ObsBatch:
    obs_list = list(obs_list)
    inv = all(o.has_invisible for o in obs_list)
    return ObsBatch(
        image=np.stack([o.image for o in obs_list]),
        vector=np.stack([o.vector for o in obs_list]),
        entities=np.stack([o.entities for o in obs_list]),
        memory=np.stack([o.memory for o in obs_list]),
        action_mask=np.stack([o.action_mask for o in obs_list]),
        direction_mask=np.stack([o.direction_mask for o in obs_list]),
        invisible_image=np.stack([o.invisible_image for o in obs_list]) if inv else None,
        invisible_vector=np.stack([o.invisible_vector for o in obs_list]) if inv else None,
    )


def _as_batch(obs) -> ObsBatch:
    if isinstance(obs, ObsBatch):
        return obs
    if isinstance(obs, Observation):
        return stack_obs([obs])
    return stack_obs(obs)


def _check_shapes(p: NetworkParams, b: ObsBatch):
    d = p.dims
    want = {"image": (d.height, d.width, N_CHANNELS), "vector": (d.vector,),
            "entities": (d.entity_cap, ENTITY_FEATURES), "memory": (d.memory,),
            "action_mask": (A.N_ACTIONS,), "direction_mask": (A.N_DIRECTIONS,)}
    for name, shape in want.items():
        got = getattr(b, name).shape[1:]
        if tuple(got) != shape:
            raise ShapeError(f"{name}: expected {shape}, got {tuple(got)}")


# ------------------------------------------------------------------ forward


def _dense(p, name, x):
    return E.linear(x, p.tensors[name + ".w"], p.tensors[name + ".b"])


def _conv(p, name, x):
    return E.conv3x3(x, p.tensors[name + ".w"], p.tensors[name + ".b"])


def _trunk(p: NetworkParams, b: ObsBatch) -> Tensor:
    net = p.net
    dt = p.dtype
    img = Tensor(np.ascontiguousarray(b.image, dtype=dt))
    x = E.relu(_conv(p, "conv0", img))
    for i in range(net.res_blocks):
        y = E.relu(_conv(p, f"res{i}a", x))
        x = E.relu(E.add(x, _conv(p, f"res{i}b", y)))
    x = E.adaptive_avgpool(x, net.pool_grid)
    x = E.reshape(x, (len(b), -1))
    feats = [E.relu(_dense(p, "img", x))]
    v = Tensor(b.vector.astype(dt, copy=False))
    for i in range(len(net.vector_hidden)):
        v = E.relu(_dense(p, f"vec{i}", v))
    feats.append(v)
    ent = Tensor(b.entities.astype(dt, copy=False))
    e = E.relu(_dense(p, "ent", ent))
    feats.append(E.masked_maxpool(e, b.entities[:, :, 0] > 0))
    if net.use_memory:
        feats.append(E.relu(_dense(p, "mem", Tensor(b.memory.astype(dt, copy=False)))))
    return E.relu(_dense(p, "mid", E.concat(feats, axis=-1)))


def _policy_head(p: NetworkParams, mid: Tensor, b: ObsBatch):
    h = E.relu(_dense(p, "pol", mid))
    la = E.masked_log_softmax(_dense(p, "act", h), b.action_mask)
    ld = E.masked_log_softmax(_dense(p, "dir", h), b.direction_mask)
    return la, ld


def _value_head(p: NetworkParams, mid: Tensor, b: ObsBatch) -> Tensor:
    net = p.net
    parts = [mid]
    if net.use_invisible:
        if b.invisible_image is None or b.invisible_vector is None:
            raise ShapeError("value net needs the invisible block (got a policy observation)")
        if b.invisible_vector.shape[1:] != (p.dims.vector,):
            raise ShapeError("invisible vector has the wrong width")
        dt = p.dtype
        inv_img = Tensor(np.ascontiguousarray(b.invisible_image, dtype=dt))
        pooled = E.reshape(E.adaptive_avgpool(inv_img, net.pool_grid), (len(b), -1))
        inv = E.concat([Tensor(b.invisible_vector.astype(dt, copy=False)), pooled], axis=-1)
        parts.append(E.relu(_dense(p, "inv", inv)))
    h = E.relu(_dense(p, "val0", E.concat(parts, axis=-1) if len(parts) > 1 else mid))
    return E.reshape(_dense(p, "val", h), (len(b),))


def forward(p: NetworkParams, obs, policy: bool = True, value: bool = True):
    """Batched forward pass; returns a dict of graph tensors."""
    b = _as_batch(obs)
    _check_shapes(p, b)
    mid = _trunk(p, b)
    out = {}
    if policy:
        out["logp_action"], out["logp_direction"] = _policy_head(p, mid, b)
    if value:
        out["value"] = _value_head(p, mid, b)
    return out


def forward_policy(p: NetworkParams, obs):
    """Action and direction log-probabilities (numpy). A single observation gives 1-D outputs."""
    single = isinstance(obs, Observation)
    with E.no_grad():
        out = forward(p, obs, policy=True, value=False)
    la, ld = out["logp_action"].data, out["logp_direction"].data
    return (la[0], ld[0]) if single else (la, ld)


def forward_value(p: NetworkParams, obs):
    single = isinstance(obs, Observation)
    with E.no_grad():
        v = forward(p, obs, policy=False, value=True)["value"].data
    return float(v[0]) if single else v


def infer(p: NetworkParams, obs: ObsBatch):
    """Sampler fast path: log-probs and values in one pass, no graph recorded."""
    with E.no_grad():
        out = forward(p, obs, policy=True, value=True)
    return out["logp_action"].data, out["logp_direction"].data, out["value"].data


# ------------------------------------------------------------------ action sampling

DIRECTIONAL_MASK = np.zeros(A.N_ACTIONS, dtype=bool)
DIRECTIONAL_MASK[[int(a) for a in A.DIRECTIONAL_ACTIONS]] = True


def uses_direction(action) -> np.ndarray:
    return DIRECTIONAL_MASK[np.asarray(action)]


def joint_log_prob(logp_action, logp_direction, action, direction):
    """log pi(a) + [a consumes a direction] * log pi(d), batched over rows."""
    rows = np.arange(len(action))
    la = logp_action[rows, action]
    ld = logp_direction[rows, direction]
    return la + np.where(uses_direction(action), ld, 0.0)


def draw_index(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = np.exp(logp.astype(np.float64))
    c = np.cumsum(p, axis=-1)
    c /= c[:, -1:]
    idx = (c < u[:, None]).sum(axis=-1)
    # never land on a zero-probability entry through rounding
    idx = np.minimum(idx, logp.shape[-1] - 1)
    bad = p[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = np.argmax(logp[bad], axis=-1)
    return idx


def sample_actions(logp_action, logp_direction, mode: str, rng: np.random.Generator):
    """Batched sampling of both heads. Returns (actions, directions, joint log-probs)."""
    logp_action = np.atleast_2d(logp_action)
    logp_direction = np.atleast_2d(logp_direction)
    if mode == "argmax":
        a = np.argmax(logp_action, axis=-1)
        d = np.argmax(logp_direction, axis=-1)
    elif mode == "stochastic":
        u = rng.random((logp_action.shape[0], 2))
        a = draw_index(logp_action, u[:, 0])
        d = draw_index(logp_direction, u[:, 1])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return a, d, joint_log_prob(logp_action, logp_direction, a, d)


def sample_action(logp_action, logp_direction, mode: str, rng: np.random.Generator):
    a, d, lp = sample_actions(logp_action, logp_direction, mode, rng)
    return int(a[0]), int(d[0]), float(lp[0])
