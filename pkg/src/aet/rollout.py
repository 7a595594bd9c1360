"""Episode runner shared by samplers, evaluators and the league.

Several episodes advance in lockstep so that network inference is batched
across every agent a policy controls. Each episode draws its random numbers
from its own generator, so outcomes do not depend on how episodes are grouped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import arena as A
from . import obsenc as O
from .bots import ScriptedPolicy, side_agents
from .nn.model import (NetworkParams, ObsBatch, draw_index, forward_policy, infer, joint_log_prob,
                       stack_obs)
from .ppo import Batch, compute_gae

log = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    pass


@dataclass(eq=False)
class NetPolicy:
    """A network-driven controller for one side."""

    params: NetworkParams
    mode: str = "stochastic"
    tag: str = ""

    @property
    def side(self) -> str:
        return self.params.side

    def describe(self) -> dict:
        return {"kind": "net", "side": self.side, "step": self.params.step, "tag": self.tag}


@dataclass(frozen=True)
class Job:
    seed: int
    cat: object  # NetPolicy | ScriptedPolicy
    mouse: object
    intervention: A.ERIntervention = A.NO_INTERVENTION
    record: str | None = None  # side whose transitions are kept
    log_path: str | None = None  # write a replay log here
    meta: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass
class Segment:
    """Fixed-length slice of one agent's trajectory; rows past ``n_valid`` are padding."""

    side: str
    agent: int
    obs: ObsBatch
    actions: np.ndarray
    directions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    valid: np.ndarray
    bootstrap: float
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    version: int = 0
    uses: int = 0

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def finalize(self, gamma: float, lam: float):
        self.advantages = compute_gae(self.rewards, self.values, self.dones, self.bootstrap,
                                      gamma, lam)
        self.returns = self.values.astype(np.float64) + self.advantages
        return self

    def to_batch(self) -> Batch:
        idx = np.flatnonzero(self.valid)
        return Batch(self.obs.take(idx), self.actions[idx], self.directions[idx],
                     self.logp[idx], self.values[idx], self.advantages[idx], self.returns[idx])


@dataclass
class EpisodeResult:
    seed: int
    winner: int
    steps: int
    returns: np.ndarray  # (5,) summed reward per agent
    by_kind: list  # per agent: {kind: total}
    intervention: A.ERIntervention
    segments: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def cat_won(self) -> bool:
        return self.winner == int(A.Winner.CAT)


# ------------------------------------------------------------------ internals


class _Trace:
    """Per-agent transition lists for the recorded side."""

    __slots__ = ("obs", "a", "d", "logp", "v", "r")

    def __init__(self):
        self.obs, self.a, self.d, self.logp, self.v, self.r = [], [], [], [], [], []


class _Episode:
    def __init__(self, job: Job, config: A.ArenaConfig, mem_capacity: int,
                 decay_progress: float = 0.0):
        self.job = job
        self.state = A.apply_er_intervention(A.generate(config.with_seed(job.seed)),
                                             job.intervention)
        self.rng = np.random.default_rng([job.seed, 2])
        self.memory = {a: O.MemoryBlock(capacity=mem_capacity) for a in range(A.N_AGENTS)}
        self.last_cmd = {a: None for a in range(A.N_AGENTS)}
        self.returns = np.zeros(A.N_AGENTS)
        self.by_kind = [dict() for _ in range(A.N_AGENTS)]
        self.traces = {}
        self.error = None
        self.log = None
        if job.log_path is not None:
            self.log = A.ReplayLog(job.log_path, self.state, job.intervention, decay_progress)
        if job.record is not None:
            self.traces = {a: _Trace() for a in (side_agents(job.record))}

    def controller(self, side):
        return self.job.cat if side == "cat" else self.job.mouse


def _segments_from_trace(tr: _Trace, side: str, agent: int, L: int, version: int,
                         gamma: float, lam: float):
    T = len(tr.a)
    if T == 0:
        return []
    obs = stack_obs(tr.obs)
    a = np.asarray(tr.a, dtype=np.int64)
    d = np.asarray(tr.d, dtype=np.int64)
    lp = np.asarray(tr.logp, dtype=np.float64)
    v = np.asarray(tr.v, dtype=np.float64)
    r = np.asarray(tr.r, dtype=np.float64)
    out = []
    for lo in range(0, T, L):
        hi = min(T, lo + L)
        n = hi - lo
        pad = L - n
        idx = np.arange(lo, hi)
        seg_obs = obs.take(idx)
        if pad:
            seg_obs = ObsBatch.concat([seg_obs, _padding(seg_obs, pad)])
        dones = np.zeros(L)
        valid = np.zeros(L, dtype=bool)
        valid[:n] = True
        if hi == T:
            dones[n - 1:] = 1.0
            boot = 0.0
        else:
            boot = float(v[hi])
        seg = Segment(side, agent, seg_obs,
                      np.concatenate([a[idx], np.zeros(pad, dtype=np.int64)]),
                      np.concatenate([d[idx], np.zeros(pad, dtype=np.int64)]),
                      np.concatenate([lp[idx], np.zeros(pad)]),
                      np.concatenate([v[idx], np.zeros(pad)]),
                      np.concatenate([r[idx], np.zeros(pad)]),
                      dones, valid, boot, version=version)
        out.append(seg.finalize(gamma, lam))
    return out


def _padding(like: ObsBatch, n: int) -> ObsBatch:
    z = lambda x: None if x is None else np.zeros((n,) + x.shape[1:], dtype=x.dtype)  # noqa: E731
    pad = ObsBatch(*(z(getattr(like, f)) for f in ObsBatch.__dataclass_fields__))
    pad.action_mask[:, int(A.Action.IDLE)] = True
    pad.direction_mask[:] = True
    return pad


def _credit(ep: _Episode, rewards):
    for a, events in enumerate(rewards):
        if not events:
            continue
        total = 0.0
        kinds = ep.by_kind[a]
        for ev in events:
            total += ev.value
            kinds[ev.kind] = kinds.get(ev.kind, 0.0) + ev.value
        ep.returns[a] += total
        tr = ep.traces.get(a)
        if tr is not None:
            if not tr.r:
                raise RolloutError(f"reward for agent {a} before its first action")
            # rewards landing after an agent has left the board join its last transition
            tr.r[-1] += total


def run_episodes(config: A.ArenaConfig, jobs, *, decay_progress: float = 0.0,
                 traj_len: int = 128, gamma: float = 0.99, lam: float = 0.95,
                 mem_capacity: int = 16, version: int = 0) -> list[EpisodeResult]:
    """Play every job to completion; returns results in job order.

    A job whose episode raises is discarded (its result carries ``error``)
    without disturbing the others.
    """
    eps = []
    for job in jobs:
        try:
            eps.append(_Episode(job, config, mem_capacity, decay_progress))
        except Exception as exc:  # noqa: BLE001
            log.warning("episode setup failed for seed %s: %s", job.seed, exc)
            eps.append(None)
    specs = {side: O.encoder_spec(config, side, memory_capacity=mem_capacity)
             for side in ("cat", "mouse")}
    active = [e for e in eps if e is not None]
    while active:
        commands = {id(e): {} for e in active}
        groups: dict[int, list] = {}
        for e in active:
            try:
                for a in e.state.living_agents():
                    mem = O.update_memory(e.memory[a], O.observe_facts(e.state, a), e.last_cmd[a])
                    e.memory[a] = mem
                side = None
                for side in ("cat", "mouse"):
                    ctrl = e.controller(side)
                    agents = [a for a in side_agents(side) if e.state.alive(a)]
                    if not agents:
                        continue
                    if isinstance(ctrl, ScriptedPolicy):
                        for a, cmd in ctrl.commands(e.state, e.rng).items():
                            commands[id(e)][a] = cmd
                        continue
                    recorded = e.job.record == side
                    for a in agents:
                        if recorded:
                            ob = O.encode_value_obs(e.state, a, e.memory[a], specs[side])
                        else:
                            ob = O.encode_policy_obs(e.state, a, e.memory[a], specs[side])
                        groups.setdefault(id(ctrl), []).append((e, a, ob, recorded, ctrl))
            except Exception as exc:  # noqa: BLE001
                e.error = f"{type(exc).__name__}: {exc}"
        for rows in groups.values():
            rows = [r for r in rows if r[0].error is None]
            if not rows:
                continue
            ctrl = rows[0][4]
            batch = stack_obs([r[2] for r in rows])
            if any(r[3] for r in rows):
                la, ld, val = infer(ctrl.params, batch)
            else:
                la, ld = forward_policy(ctrl.params, batch)
                val = np.zeros(len(rows))
            u = np.stack([r[0].rng.random(2) for r in rows]) if ctrl.mode == "stochastic" else None
            acts, dirs = _choose(la, ld, ctrl.mode, u)
            lps = joint_log_prob(la, ld, acts, dirs)
            for i, (e, a, ob, recorded, _) in enumerate(rows):
                commands[id(e)][a] = (int(acts[i]), int(dirs[i]))
                if recorded:
                    tr = e.traces[a]
                    tr.obs.append(ob)
                    tr.a.append(int(acts[i]))
                    tr.d.append(int(dirs[i]))
                    tr.logp.append(float(lps[i]))
                    tr.v.append(float(val[i]))
                    tr.r.append(0.0)
        still = []
        for e in active:
            if e.error is not None:
                log.warning("discarding episode seed=%s: %s", e.job.seed, e.error)
                continue
            try:
                cmds = commands[id(e)]
                for a, c in cmds.items():
                    e.last_cmd[a] = c
                e.state, rewards, done = A.step(e.state, cmds, decay_progress)
                _credit(e, rewards)
                if e.log is not None:
                    e.log.record(e.state, [cmds.get(a) for a in range(A.N_AGENTS)], rewards)
            except Exception as exc:  # noqa: BLE001
                e.error = f"{type(exc).__name__}: {exc}"
                log.warning("discarding episode seed=%s: %s", e.job.seed, e.error)
                continue
            if not done:
                still.append(e)
        active = still
    for e in eps:
        if e is not None and e.log is not None:
            e.log.close()
    results = []
    for job, e in zip(jobs, eps):
        if e is None or e.error is not None:
            results.append(EpisodeResult(job.seed, int(A.Winner.NONE), 0, np.zeros(A.N_AGENTS),
                                         [{} for _ in range(A.N_AGENTS)], job.intervention,
                                         meta=job.meta, error=(e.error if e else "setup failed")))
            continue
        segs = []
        for a, tr in e.traces.items():
            segs += _segments_from_trace(tr, job.record, a, traj_len, version, gamma, lam)
        results.append(EpisodeResult(job.seed, int(e.state.winner), int(e.state.step_count),
                                     e.returns, e.by_kind, job.intervention, segs, job.meta))
    return results


def _choose(la, ld, mode, u):
    if mode == "argmax":
        return np.argmax(la, axis=-1), np.argmax(ld, axis=-1)
    if mode != "stochastic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    return draw_index(la, u[:, 0]), draw_index(ld, u[:, 1])


def play_match(config: A.ArenaConfig, cat, mouse, n_games: int, seed: int,
               intervention: A.ERIntervention = A.NO_INTERVENTION, batch: int = 16):
    """Play ``n_games`` seeded games (no recording); returns the results."""
    seeds = [int(s) for s in np.random.default_rng([seed, 5]).integers(0, 2**31 - 1, n_games)]
    out = []
    for lo in range(0, n_games, batch):
        jobs = [Job(s, cat, mouse, intervention) for s in seeds[lo:lo + batch]]
        out += run_episodes(config, jobs)
    return out
