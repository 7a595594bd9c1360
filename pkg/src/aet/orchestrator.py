"""The training loop: samplers under adaptive allocation, environment
randomization, replay buffers, one trainer per side, and pool admission.

The loop runs in synchronous rounds. In each round every sampler worker
plays one episode for the side it is allocated to, then each trainer consumes
whatever its replay buffer can supply. Workers are logical slots; episodes are
spread over ``processes`` OS processes (in-process when that is 1), and every
episode has its own seeded generator, so results do not depend on the
process count.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import Counter, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arena as A
from . import obsenc as O
from .bots import make_bot
from .config import ADAConfig, ERConfig, ExperimentConfig, save_config
from .league import League, MatchSpec, Rating, other
from .nn import snapshot
from .nn.adam import AdamState, adam_step
from .nn.model import NetworkParams, init_params
from .ppo import Batch, PPOConfig, loss_and_grads
from .rollout import EpisodeResult, Job, NetPolicy, Segment, run_episodes

log = logging.getLogger(__name__)

ER_KINDS = ("levelup", "hard_case", "timed_buff", "none")


class TrainerCrash(RuntimeError):
    pass


# ------------------------------------------------------------------ ADA


def ada_ratio(r_old: float, w_cat: float, w_mouse: float, alpha: float = 0.8,
              beta: float = 0.5) -> float:
    """New mouse share of sampler resources after observing the two win rates."""
    gap = w_cat - w_mouse
    dif = 0.25 * gap if w_cat >= w_mouse else gap
    return min(alpha, max(beta, r_old + dif))


@dataclass
class AllocationState:
    ratio: float = 0.5
    alpha: float = 0.8
    beta: float = 0.5
    window: deque = field(default_factory=lambda: deque(maxlen=200))  # True = cat won

    @classmethod
    def from_config(cls, cfg: ADAConfig) -> "AllocationState":
        ratio = cfg.initial_ratio if cfg.enabled else (cfg.fixed_ratio or 0.5)
        return cls(ratio, cfg.alpha, cfg.beta, deque(maxlen=cfg.window))

    def winrates(self):
        if not self.window:
            return 0.5, 0.5
        wc = sum(self.window) / len(self.window)
        return wc, 1.0 - wc


def ada_update(state: AllocationState, w_cat: float, w_mouse: float) -> float:
    state.ratio = ada_ratio(state.ratio, w_cat, w_mouse, state.alpha, state.beta)
    return state.ratio


def allocate_workers(n: int, ratio_mouse: float) -> tuple[int, int]:
    """(mouse workers, cat workers), each side keeping at least one."""
    if n < 2:
        raise ValueError("need at least two workers")
    mouse = int(math.floor(n * ratio_mouse + 0.5))
    mouse = min(n - 1, max(1, mouse))
    return mouse, n - mouse


# ------------------------------------------------------------------ ER


class ERSchedule:
    """Hysteresis trigger on the windowed win-rate gap plus the intervention draw."""

    def __init__(self, cfg: ERConfig):
        self.cfg = cfg
        self.active = False
        self.streak = 0
        self.counts = Counter()

    def update(self, w_cat: float, w_mouse: float) -> bool:
        gap = abs(w_cat - w_mouse)
        if not self.cfg.enabled:
            self.active = False
            return False
        if self.active:
            if gap < self.cfg.gap_off:
                self.active = False
                self.streak = 0
        else:
            self.streak = self.streak + 1 if gap > self.cfg.gap_on else 0
            if self.streak >= self.cfg.persistence:
                self.active = True
        return self.active

    def draw(self, rng: np.random.Generator, strong_side: str) -> A.ERIntervention:
        """Draw one intervention aimed against ``strong_side``. Consumes a fixed
        number of uniforms whether or not the trigger is active."""
        u = rng.random(4)
        if not self.active:
            return A.NO_INTERVENTION
        cum = np.cumsum(self.cfg.probs)
        kind = ER_KINDS[min(int(np.searchsorted(cum, u[0], side="right")), 3)]
        weak = other(strong_side)
        if kind == "levelup":
            stat = A.LEVELUP_STATS[int(u[1] * len(A.LEVELUP_STATS))]
            iv = A.ERIntervention("levelup", weak, stat=stat, tier=self.cfg.tier)
        elif kind == "timed_buff":
            stat = A.LEVELUP_STATS[int(u[1] * len(A.LEVELUP_STATS))]
            iv = A.ERIntervention("timed_buff", weak, stat=stat, tier=self.cfg.tier,
                                  window=self.cfg.buff_window)
        elif kind == "hard_case":
            cases = A.HARD_CASES[strong_side]
            case = cases[int(u[2] * len(cases))]
            agent = A.MICE[int(u[3] * len(A.MICE))] if case == "pre_eliminate" else -1
            iv = A.ERIntervention("hard_case", strong_side, case=case, agent=agent)
        else:
            iv = A.NO_INTERVENTION
        self.counts[kind] += 1
        return iv


def schedule_episode(side: str, league: League, er: ERSchedule, alloc: AllocationState,
                     rng: np.random.Generator, hist_ratio: float = 0.2,
                     seed: int = 0) -> MatchSpec:
    spec = league.select_opponent(side, rng, hist_ratio, seed)
    wc, wm = alloc.winrates()
    strong = "cat" if wc > wm else "mouse"
    spec.intervention = er.draw(rng, strong)
    return spec


# ------------------------------------------------------------------ replay buffer


class ReplayBuffer:
    """FIFO of trajectory segments for one side with a sample-reuse budget.

    A segment may be consumed at most ``ceil(reuse_cap)`` times, and overall
    consumption never exceeds ``reuse_cap`` times the transitions added.
    """

    def __init__(self, side: str, capacity: int, reuse_cap: float = 1.2):
        self.side = side
        self.capacity = capacity
        self.reuse_cap = reuse_cap
        self.max_uses = int(math.ceil(reuse_cap - 1e-12))
        self.segments: deque[Segment] = deque()
        self.size = 0
        self.added = 0
        self.consumed = 0
        self.evicted = 0

    def add(self, segments):
        for seg in segments:
            if seg.side != self.side:
                raise ValueError(f"{seg.side} segment offered to the {self.side} buffer")
            self.segments.append(seg)
            n = seg.n_valid
            self.size += n
            self.added += n
        while self.size > self.capacity and self.segments:
            old = self.segments.popleft()
            self.size -= old.n_valid
            self.evicted += old.n_valid

    def __len__(self):
        return self.size

    def _pick(self, batch_size: int):
        picked, n = [], 0
        for uses in range(self.max_uses):
            for seg in self.segments:
                if n >= batch_size:
                    break
                if seg.uses == uses:
                    picked.append(seg)
                    n += seg.n_valid
        return picked, n

    def can_sample(self, batch_size: int) -> bool:
        picked, n = self._pick(batch_size)
        return n >= batch_size and self.consumed + n <= self.reuse_cap * self.added + 1e-9

    def sample(self, batch_size: int):
        """Segments totalling at least ``batch_size`` transitions, or None."""
        picked, n = self._pick(batch_size)
        if n < batch_size or self.consumed + n > self.reuse_cap * self.added + 1e-9:
            return None
        for seg in picked:
            seg.uses += 1
        self.consumed += n
        # fully used segments leave the buffer
        keep = deque(s for s in self.segments if s.uses < self.max_uses)
        self.size = sum(s.n_valid for s in keep)
        self.segments = keep
        return picked


# ------------------------------------------------------------------ trainer


@dataclass
class Trainer:
    side: str
    params: NetworkParams
    opt: AdamState
    ppo: PPOConfig
    chunk: int = 512
    max_grad_norm: float | None = None
    updates: int = 0
    skipped: int = 0
    last: dict = field(default_factory=dict)


def trainer_iteration(trainer: Trainer, buffer: ReplayBuffer, batch_size: int):
    """One optimizer step from buffered data; returns stats or None when the
    buffer cannot supply a batch. Non-finite losses skip the update."""
    segs = buffer.sample(batch_size)
    if segs is None:
        return None
    batch = Batch.concat(s.to_batch() for s in segs)
    grads, stats = loss_and_grads(trainer.params, batch, trainer.ppo, trainer.chunk)
    if not np.isfinite(stats["loss"]):
        trainer.skipped += 1
        log.warning("%s trainer: non-finite loss, update skipped", trainer.side)
        stats["skipped"] = True
        trainer.params.zero_grad()
        return stats
    _, _, info = adam_step(trainer.params, grads, trainer.opt, trainer.max_grad_norm)
    trainer.params.zero_grad()
    if info["skipped"]:
        trainer.skipped += 1
    else:
        trainer.updates += 1
        trainer.params.step += 1
    stats.update(info)
    stats["batch"] = len(batch)
    trainer.last = stats
    return stats


# ------------------------------------------------------------------ sampler processes


def _run_chunk(args):
    config, jobs, kw = args
    return run_episodes(config, jobs, **kw)


class SamplerPool:
    def __init__(self, processes: int):
        self.processes = max(1, processes)
        self._ex = ProcessPoolExecutor(self.processes) if self.processes > 1 else None

    def run(self, config, jobs, lockstep: int, **kw) -> list[EpisodeResult]:
        chunks = [jobs[i:i + lockstep] for i in range(0, len(jobs), lockstep)]
        if self._ex is None:
            out = []
            for ch in chunks:
                out += run_episodes(config, ch, **kw)
            return out
        results = self._ex.map(_run_chunk, [(config, ch, kw) for ch in chunks])
        return [r for part in results for r in part]

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


# ------------------------------------------------------------------ the loop


@dataclass
class RunSummary:
    out_dir: Path
    iterations: int
    episodes: int
    env_steps: int
    updates: dict
    final_ratio: float
    winrates: tuple
    checkpoints: dict
    stopped_by: str = "iterations"


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    raise TypeError(type(o))


def run_aet(cfg: ExperimentConfig, out_dir, *, log_every: int = 10) -> RunSummary:
    """Run a full experiment and write its artifacts under ``out_dir``:

    ``config.json``, ``metrics.jsonl``, ``checkpoints/{cat,mouse}.snap``,
    ``pool/`` (manifest plus snapshots) and ``summary.json``.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    arena_cfg = cfg.arena
    ahash = arena_cfg.shape_key()
    master = np.random.default_rng([cfg.seed, 11])

    frozen_cat = None
    if cfg.train.frozen_cat is not None:
        frozen_cat = make_bot(cfg.train.frozen_cat, "cat", cfg.train.frozen_noise)
    trained = ("mouse",) if frozen_cat is not None else ("cat", "mouse")

    trainers: dict[str, Trainer] = {}
    buffers: dict[str, ReplayBuffer] = {}
    for side in trained:
        spec = O.encoder_spec(arena_cfg, side)
        params = init_params(side, spec, cfg.net, seed=cfg.seed, arena_hash=ahash)
        trainers[side] = Trainer(side, params, AdamState(lr=cfg.train.lr), cfg.ppo,
                                 cfg.train.chunk, cfg.train.max_grad_norm)
        buffers[side] = ReplayBuffer(side, cfg.train.buffer_capacity, cfg.ppo.reuse_cap)
    published = {s: t.params.copy() for s, t in trainers.items()}

    league = League(arena_cfg, cfg.league.capacity, out / "pool", cfg.league.pfsp_p)
    alloc = AllocationState.from_config(cfg.ada)
    er = ERSchedule(cfg.er)
    procs = cfg.processes or min(cfg.workers, os.cpu_count() or 1)
    pool = SamplerPool(procs)

    metrics_path = out / "metrics.jsonl"
    mf = metrics_path.open("w")
    episodes = env_steps = discarded = 0
    last_admit = {s: 0 for s in trained}
    t0 = time.monotonic()
    stopped_by = "iterations"
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            if cfg.wall_clock is not None and time.monotonic() - t0 > cfg.wall_clock:
                stopped_by = "wall_clock"
                it -= 1
                break
            # ---- sampling
            if frozen_cat is not None:
                n_mouse, n_cat = cfg.workers, 0
            else:
                n_mouse, n_cat = allocate_workers(cfg.workers, alloc.ratio)
            jobs = []
            for w in range(cfg.workers):
                side = "mouse" if w < n_mouse else "cat"
                seed = int(master.integers(0, 2**31 - 1))
                n_side = n_mouse if side == "mouse" else n_cat
                idx_in_side = w if side == "mouse" else w - n_mouse
                if cfg.league.per_worker_hmp:
                    dedicated = idx_in_side >= n_side - round(n_side * cfg.league.hist_ratio)
                    hist = 1.0 if dedicated else 0.0
                else:
                    hist = cfg.league.hist_ratio
                spec = schedule_episode(side, league, er, alloc, master, hist, seed)
                learner = NetPolicy(published[side], cfg.train.sample_mode)
                if side == "mouse" and frozen_cat is not None:
                    opp, opp_latest = frozen_cat, True
                elif spec.opponent_kind == "hmp":
                    opp = NetPolicy(league.params_of(other(side), spec.opponent_id),
                                    cfg.train.sample_mode)
                    opp_latest = False
                else:
                    opp, opp_latest = NetPolicy(published[other(side)], cfg.train.sample_mode), True
                cat, mouse = (learner, opp) if side == "cat" else (opp, learner)
                jobs.append(Job(seed, cat, mouse, spec.intervention, record=side,
                                meta={"side": side, "latest": opp_latest}))
            decay = min(1.0, env_steps / max(1, cfg.train.decay_horizon))
            results = pool.run(arena_cfg, jobs, cfg.train.lockstep, decay_progress=decay,
                               traj_len=cfg.ppo.traj_len, gamma=cfg.ppo.gamma, lam=cfg.ppo.lam,
                               version=0)
            for r in results:
                if r.error is not None:
                    discarded += 1
                    continue
                side = r.meta["side"]
                for seg in r.segments:
                    seg.version = published[side].step
                buffers[side].add(r.segments)
                episodes += 1
                env_steps += r.steps
                if r.meta["latest"]:
                    alloc.window.append(bool(r.cat_won))

            # ---- training
            stats = {}
            for side in trained:
                for _ in range(cfg.train.max_updates_per_iteration):
                    try:
                        s = trainer_iteration(trainers[side], buffers[side], cfg.train.batch_size)
                    except Exception as exc:
                        _checkpoint(out, published)
                        raise TrainerCrash(f"{side} trainer failed: {exc}") from exc
                    if s is None:
                        break
                    stats[side] = s
                    if not s.get("skipped"):
                        published[side] = trainers[side].params.copy()
                tr = trainers[side]
                if tr.updates - last_admit[side] >= cfg.league.admit_every:
                    last_admit[side] = tr.updates
                    league.admit(published[side], cfg.league.admit_games,
                                 seed=cfg.seed * 7919 + it)

            # ---- allocation and randomization
            wc, wm = alloc.winrates()
            if it % cfg.ada.interval == 0 and alloc.window:
                if cfg.ada.enabled and frozen_cat is None:
                    ada_update(alloc, wc, wm)
                er.update(wc, wm)

            if it % cfg.train.checkpoint_every == 0:
                _checkpoint(out, published)

            for side in ("cat", "mouse"):
                entry = league.pools[side][-1] if league.pools[side] else None
                rating = entry.rating if entry else Rating()
                s = stats.get(side, {})
                rec = {
                    "iteration": it, "side": side,
                    "version": published[side].step if side in published else None,
                    "loss": s.get("loss"), "policy_loss": s.get("policy_loss"),
                    "value_loss": s.get("value_loss"), "entropy": s.get("entropy"),
                    "grad_norm": s.get("grad_norm"),
                    "w_cat": wc, "w_mouse": wm, "r_mouse": alloc.ratio,
                    "er_active": er.active, "interventions": dict(sorted(er.counts.items())),
                    "trueskill_mu": rating.mu, "trueskill_sigma": rating.sigma,
                    "episodes": episodes, "env_steps": env_steps, "discarded": discarded,
                    "buffer": len(buffers[side]) if side in buffers else 0,
                }
                mf.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")
            mf.flush()
            if log_every and it % log_every == 0:
                log.info("it=%d eps=%d steps=%d wc=%.2f r_m=%.2f er=%s upd=%s", it, episodes,
                         env_steps, wc, alloc.ratio, er.active,
                         {s: t.updates for s, t in trainers.items()})
    finally:
        mf.close()
        pool.close()
    ckpts = _checkpoint(out, published)
    summary = RunSummary(out, it, episodes, env_steps,
                         {s: t.updates for s, t in trainers.items()}, alloc.ratio,
                         alloc.winrates(), ckpts, stopped_by)
    (out / "summary.json").write_text(json.dumps({
        "iterations": it, "episodes": episodes, "env_steps": env_steps,
        "updates": summary.updates, "final_ratio": alloc.ratio,
        "winrates": list(summary.winrates), "stopped_by": stopped_by,
        "checkpoints": {k: str(v) for k, v in ckpts.items()},
        "interventions": dict(er.counts), "discarded": discarded,
        "elapsed_s": round(time.monotonic() - t0, 1),
    }, indent=1, sort_keys=True))
    return summary


def _checkpoint(out: Path, published: dict) -> dict:
    paths = {}
    for side, p in published.items():
        paths[side] = snapshot.save(p, out / "checkpoints" / f"{side}.snap")
    return paths
